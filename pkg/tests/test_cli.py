import csv
import json
import warnings

import numpy as np
import pytest

from _models import discrete_model
from stmseg import FallbackWarning, LabeledDataset, TrainingConfig, load_model, sample_sequence, save_model, train
from stmseg.bench import boundary_offset, confusion_matrix, load_scenario, per_frame_accuracy
from stmseg.cli import EXIT_DATA, EXIT_MODEL, EXIT_OK, EXIT_USAGE, main, read_labels, render_model
from stmseg.stm import stage_marginal


@pytest.fixture(autouse=True)
def _quiet_fallbacks():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FallbackWarning)
        yield


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def model_file(tmp_path):
    p = tmp_path / "model.json"
    p.write_bytes(save_model(load_scenario("separable-2x3").build_model(0)))
    return p


def test_simulate_writes_sequence_and_sidecar(tmp_path, model_file, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--model", str(model_file), "--frames", "50", "--count", "1", "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["seq_0000.csv", "seq_0000.hidden.csv"]
    rows = _rows(out / "seq_0000.csv")
    assert rows[0] == ["f0", "f1", "label"] and len(rows) == 51
    hidden = _rows(out / "seq_0000.hidden.csv")
    assert hidden[0] == ["s", "d", "z"] and len(hidden) == 51
    assert [r[2] for r in rows[1:]] == [r[0] for r in hidden[1:]]
    assert json.loads(capsys.readouterr().out)["written"] == 1


def test_simulate_is_deterministic(tmp_path, model_file):
    for name in ("a", "b"):
        main(["simulate", "--model", str(model_file), "--frames", "30", "--count", "2", "--seed", "5",
              "--out", str(tmp_path / name)])
    for f in ("seq_0000.csv", "seq_0001.csv", "seq_0001.hidden.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    main(["simulate", "--model", str(model_file), "--frames", "30", "--seed", "6", "--out", str(tmp_path / "c")])
    assert (tmp_path / "a" / "seq_0000.csv").read_bytes() != (tmp_path / "c" / "seq_0000.csv").read_bytes()


def test_simulate_usage_and_model_errors(tmp_path, model_file, capsys):
    assert main(["simulate", "--model", str(model_file), "--frames", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--frames", "5", "--out", str(tmp_path)])
    assert exc.value.code == EXIT_USAGE
    doc = json.loads(model_file.read_text())
    doc["actions"][0]["theta"][0] = [0.5, 0.1, 0.0]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    capsys.readouterr()
    assert main(["simulate", "--model", str(bad), "--frames", "5", "--out", str(tmp_path / "x")]) == EXIT_DATA
    assert "theta" in capsys.readouterr().err
    assert main(["simulate", "--scenario", "nope", "--frames", "5", "--out", str(tmp_path / "y")]) == EXIT_USAGE


def _simulate(tmp_path, model_file, count=4, frames=120, seed=0):
    out = tmp_path / "data"
    assert main(["simulate", "--model", str(model_file), "--frames", str(frames), "--count", str(count),
                 "--seed", str(seed), "--out", str(out)]) == 0
    return out


def test_simulate_train_round_trip(tmp_path, model_file, capsys):
    data = _simulate(tmp_path, model_file)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_primitives": 3, "n_stages": 2, "max_em_iters": 5}))
    capsys.readouterr()
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "m.json")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert len(summary["em_curves"]) == 2
    assert {"theta_nonzero", "theta_sparsity"} <= set(summary["actions"][0])
    model = load_model((tmp_path / "m.json").read_bytes())
    assert model.actions[0].n_primitives == 3


def test_train_errors(tmp_path, model_file, capsys):
    data = _simulate(tmp_path, model_file, count=2, frames=40)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_primitives": 2, "n_stages": 3}))
    out = str(tmp_path / "m.json")
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", out]) == EXIT_USAGE
    cfg.write_text(json.dumps({"n_primitive": 2}))
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", out]) == EXIT_USAGE
    cfg.write_text("{not json")
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", out]) == EXIT_USAGE
    # drop the label column from one file
    victim = data / "seq_0001.csv"
    rows = _rows(victim)
    victim.write_text("\n".join(",".join(r[:2]) for r in rows) + "\n")
    capsys.readouterr()
    assert main(["train", "--data", str(data), "--out", out]) == EXIT_DATA
    assert "seq_0001.csv" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", out]) == EXIT_DATA
    # too few frames for the requested primitives: the model cannot be built
    one = tmp_path / "one"
    one.mkdir()
    (one / "s.csv").write_text("f0,label\n0.0,0\n1.0,0\n")
    cfg.write_text(json.dumps({"n_primitives": 3, "n_stages": 1}))
    assert main(["train", "--data", str(one), "--config", str(cfg), "--out", out]) == EXIT_MODEL


def test_segment_simulated_sequence(tmp_path, model_file):
    data = _simulate(tmp_path, model_file, count=1, frames=240, seed=3)
    out = tmp_path / "seg.csv"
    args = ["segment", "--model", str(model_file), "--input", str(data / "seq_0000.csv"), "--particles", "200",
            "--seed", "1"]
    assert main(args + ["--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["s", "z", "d", "p_s0", "p_s1"] and len(rows) == 241
    pred = read_labels(out)
    truth = read_labels(data / "seq_0000.csv")
    assert per_frame_accuracy(pred, truth) >= 0.9
    for r in rows[1:]:
        assert float(r[3]) + float(r[4]) == pytest.approx(1.0, abs=1e-5)
    # same seed, same bytes
    assert main(args + ["--out", str(tmp_path / "again.csv")]) == 0
    assert out.read_bytes() == (tmp_path / "again.csv").read_bytes()
    # without refinement labels differ only near boundaries
    raw = tmp_path / "raw.csv"
    assert main(args + ["--no-refine", "--window", "40", "--out", str(raw)]) == 0
    a, b = read_labels(raw), read_labels(out)
    cuts = np.r_[np.flatnonzero(np.diff(a)) + 1, np.flatnonzero(np.diff(b)) + 1]
    for t in np.flatnonzero(a != b):
        assert np.min(np.abs(cuts - t)) <= 20


def test_segment_edge_cases(tmp_path, model_file):
    data = _simulate(tmp_path, model_file, count=1, frames=60)
    inp = str(data / "seq_0000.csv")
    out = str(tmp_path / "o.csv")
    assert main(["segment", "--model", str(model_file), "--input", inp, "--particles", "1", "--out", out]) == 0
    assert len(_rows(out)) == 61
    assert main(["segment", "--model", str(model_file), "--input", inp, "--particles", "0", "--out", out]) == EXIT_USAGE
    one_dim = tmp_path / "one.csv"
    one_dim.write_text("f0\n0.5\n0.7\n")
    assert main(["segment", "--model", str(model_file), "--input", str(one_dim), "--out", out]) == EXIT_DATA
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    assert main(["segment", "--model", str(broken), "--input", inp, "--out", out]) == EXIT_MODEL


def _labels_file(path, labels):
    path.write_text("label\n" + "\n".join(str(v) for v in labels) + "\n")
    return str(path)


def test_eval_matches_library(tmp_path, capsys):
    truth = [0] * 10 + [1] * 10
    pred = [0] * 13 + [1] * 7
    t = _labels_file(tmp_path / "t.csv", truth)
    assert main(["eval", "--pred", t, "--truth", t]) == 0
    assert json.loads(capsys.readouterr().out)["accuracy"] == 1.0
    swapped = _labels_file(tmp_path / "s.csv", [1 - v for v in truth])
    assert main(["eval", "--pred", swapped, "--truth", t]) == 0
    assert json.loads(capsys.readouterr().out)["accuracy"] == 0.0
    p = _labels_file(tmp_path / "p.csv", pred)
    assert main(["eval", "--pred", p, "--truth", t]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["accuracy"] == per_frame_accuracy(pred, truth)
    assert doc["boundary_offset"] == boundary_offset(pred, truth)
    assert doc["confusion"] == confusion_matrix(pred, truth, 2).tolist()
    short = _labels_file(tmp_path / "short.csv", truth[:5])
    assert main(["eval", "--pred", short, "--truth", t]) == EXIT_DATA


def test_inspect_renders_block_structure(tmp_path, capsys):
    p = tmp_path / "m.json"
    p.write_bytes(save_model(discrete_model()))
    assert main(["inspect", "--model", str(p), "--action", "1"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("action 1: 2 primitives, 2 stages")
    lines = text.splitlines()
    theta = lines[lines.index(" theta (zeros shown as '.'):") + 1:lines.index(" phi:")]
    # the stage bar splits the rows; the lower-left block is zero
    assert theta[0].split() == ["0.700", "|", "0.300"]
    assert set(theta[1]) <= {" ", "-"}
    assert theta[2].split() == [".", "|", "1.000"]
    assert "duration mode=8" in text and "|omega| per primitive: 0 0" in text
    assert main(["inspect", "--model", str(p), "--action", "2"]) == EXIT_USAGE


def test_inspect_single_stage_has_no_bars():
    from _models import scalar_model

    text = render_model(scalar_model())
    assert "|" not in text.split(" nu=")[0].replace("|omega|", "")
    assert "-" * 5 not in text


def test_trained_separable_preset_has_sequential_stage_path():
    sc = load_scenario("separable-2x3")
    truth = sc.build_model(0)
    seqs = []
    for k in range(12):
        path, y = sample_sequence(truth, 240, 100 + k)
        seqs.append((y, path.s))
    model = train(LabeledDataset(tuple(seqs)), TrainingConfig(n_primitives=3, n_stages=3, fit_dbm=False))
    for act in model.actions:
        phi = stage_marginal(act.theta, act.stages)
        off = phi - np.diag(np.diag(phi))
        # each non-terminal stage hands over mostly to the next one
        assert np.argmax(off[0]) == 1 and np.argmax(off[1]) == 2
        assert phi[2, 2] == pytest.approx(1.0)
    assert "phi:" in render_model(model)
