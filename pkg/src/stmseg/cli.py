"""Command-line interface.

Exit codes: 0 success, 2 data error, 3 model or validation error, 64 usage error.

Sequence files are CSV with a header ``f0,f1,...`` and an optional ``label``
column. ``simulate`` also writes ``<name>.hidden.csv`` sidecars with the
columns ``s,d,z``; ``segment`` writes ``s,z,d,p_s0,p_s1,...``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .bench import (
    VARIANTS,
    BenchmarkConfig,
    available_scenarios,
    boundary_offset,
    confusion_matrix,
    load_scenario,
    per_frame_accuracy,
    run_seeds,
    segment_sequence,
)
from .duration import duration_pmf
from .errors import BlockConsistencyError, ModelFormatError, TrainingError
from .model import FullModel, sample_sequence
from .modelio import load_model, save_model
from .stm import stage_marginal
from .training import LabeledDataset, TrainingConfig, fit

EXIT_OK, EXIT_DATA, EXIT_MODEL, EXIT_USAGE = 0, 2, 3, 64

log = logging.getLogger("stmseg")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ModelError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- file formats ------------------------------------------------------------------

def read_sequence(path: Path, require_label: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Observations ``(T, P)`` and the label column if present."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    feat = [k for k, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
    if not feat:
        raise DataError(f"{path}: header has no feature columns f0,f1,...")
    if [header[k] for k in feat] != [f"f{i}" for i in range(len(feat))]:
        raise DataError(f"{path}: feature columns must be f0..f{len(feat) - 1} in order")
    lab = header.index("label") if "label" in header else None
    if require_label and lab is None:
        raise DataError(f"{path}: missing label column")
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no frames")
    try:
        y = np.array([[float(r[k]) for k in feat] for r in body])
        labels = np.array([int(r[lab]) for r in body]) if lab is not None else None
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed record ({exc})") from None
    if not np.all(np.isfinite(y)):
        raise DataError(f"{path}: non-finite values")
    if labels is not None and labels.size and labels.min() < 0:
        raise DataError(f"{path}: negative labels")
    return y, labels


def write_sequence(path: Path, y: np.ndarray, labels=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(y.shape[1])] + (["label"] if labels is not None else []))
        for t in range(y.shape[0]):
            w.writerow([repr(float(v)) for v in y[t]] + ([int(labels[t])] if labels is not None else []))


def read_labels(path: Path) -> np.ndarray:
    """Label column of a sequence file, or the ``s`` column of a segmentation."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            col = "label" if reader.fieldnames and "label" in reader.fieldnames else "s"
            if not reader.fieldnames or col not in reader.fieldnames:
                raise DataError(f"{path}: needs a 'label' or 's' column")
            return np.array([int(r[col]) for r in reader])
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: malformed label ({exc})") from None


def _load_model(path: Path, error=ModelError) -> FullModel:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        return load_model(payload)
    except ModelFormatError as exc:
        raise error(f"{path}: {exc}") from None


# -- commands ------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.model:
        model = _load_model(args.model, error=DataError)
    else:
        try:
            model = load_scenario(args.scenario).build_model(args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.save_model:
        Path(args.save_model).write_bytes(save_model(model))
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count)
    for k in range(args.count):
        path, y = sample_sequence(model, args.frames, int(seeds[k]))
        write_sequence(out / f"seq_{k:04d}.csv", y, path.s)
        with open(out / f"seq_{k:04d}.hidden.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["s", "d", "z"])
            w.writerows(zip(path.s.tolist(), path.d.tolist(), path.z.tolist()))
    print(json.dumps({"written": args.count, "frames": args.frames, "out": str(out)}))
    return EXIT_OK


def _training_config(path, seed) -> TrainingConfig:
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"{path}: cannot read ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(TrainingConfig)}
    unknown = set(doc) - known
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}; known: {sorted(known)}")
    if seed is not None:
        doc["seed"] = seed
    try:
        return TrainingConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def cmd_train(args) -> int:
    config = _training_config(args.config, args.seed)
    data = Path(args.data)
    files = sorted(p for p in data.glob("*.csv") if not p.name.endswith(".hidden.csv")) if data.is_dir() else []
    if not files:
        raise DataError(f"{data}: no sequence files (*.csv)")
    seqs = [read_sequence(p, require_label=True) for p in files]
    dims = {y.shape[1] for y, _ in seqs}
    if len(dims) != 1:
        raise DataError(f"{data}: sequences disagree on dimensionality {sorted(dims)}")
    try:
        result = fit(LabeledDataset(tuple(seqs)), config)
    except TrainingError as exc:
        raise ModelError(str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    Path(args.out).write_bytes(save_model(result.model))
    print(json.dumps(result.summary(), indent=1, default=float))
    return EXIT_OK


def cmd_segment(args) -> int:
    if args.particles < 1:
        raise UsageError("--particles must be >= 1")
    if args.window < 0:
        raise UsageError("--window must be >= 0")
    model = _load_model(args.model)
    y, _ = read_sequence(Path(args.input))
    if y.shape[1] != model.obs_dim:
        raise DataError(f"{args.input}: {y.shape[1]} features, model expects {model.obs_dim}")
    labels, state = segment_sequence(model, y, args.particles, args.seed, args.refine, args.window)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "z", "d"] + [f"p_s{i}" for i in range(model.n_actions)])
        for t, h in enumerate(state.history):
            w.writerow([int(labels.s[t]), int(labels.z[t]), int(labels.d[t])] + [f"{p:.6g}" for p in h.s])
    for msg in state.diagnostics:
        print(msg, file=sys.stderr)
    return EXIT_OK


def evaluate(pred, truth) -> dict:
    n = int(max(pred.max(initial=0), truth.max(initial=0))) + 1
    return {
        "accuracy": per_frame_accuracy(pred, truth),
        "boundary_offset": boundary_offset(pred, truth),
        "confusion": confusion_matrix(pred, truth, n).tolist(),
        "frames": int(truth.size),
    }


def cmd_eval(args) -> int:
    pred, truth = read_labels(Path(args.pred)), read_labels(Path(args.truth))
    if pred.size != truth.size:
        raise DataError(f"length mismatch: {pred.size} predicted vs {truth.size} true frames")
    print(json.dumps(evaluate(pred, truth), indent=1))
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    variants = tuple(v.strip() for v in args.variants.split(","))
    try:
        cfg = BenchmarkConfig(scenario=args.scenario, n_train=args.n_train, n_test=args.n_test, t_max=args.t_max,
                              variants=variants, n_particles=args.particles, refine=args.refine).resolved()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        report = run_seeds(cfg, seeds)
    except TrainingError as exc:
        raise ModelError(str(exc)) from None
    text = report.to_json(deterministic=not args.timing)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    if args.tsv:
        Path(args.tsv).write_text(report.to_tsv(), encoding="utf-8")
    return EXIT_OK


def _grid(mat: np.ndarray, g) -> list[str]:
    """Rows of ``mat`` with bars between stage blocks."""
    lines = []
    cuts = [k for k in range(1, len(g)) if g[k] != g[k - 1]]
    for i, row in enumerate(mat):
        if i in cuts:
            lines.append("  " + "-" * (len(row) * 7 + 2 * len(cuts)))
        cells = []
        for j, v in enumerate(row):
            if j in cuts:
                cells.append("|")
            cells.append("   .  " if v == 0 else f"{v:6.3f}")
        lines.append("  " + " ".join(cells))
    return lines


def render_model(model: FullModel, actions=None) -> str:
    out = []
    for i in actions if actions is not None else range(model.n_actions):
        act = model.actions[i]
        nu, beta = model.duration.nu[i], model.duration.beta[i]
        pmf = duration_pmf(nu, beta, max(10, int(np.ceil(50 * beta))))
        out.append(f"action {i}: {act.n_primitives} primitives, {act.stages.n_stages} stages, g={list(act.stages.g)}")
        out.append(" theta (zeros shown as '.'):")
        out.extend(_grid(act.theta, act.stages.g))
        try:
            phi = stage_marginal(act.theta, act.stages)
            out.append(" phi:")
            out.extend(_grid(phi, list(range(act.stages.n_stages))))
        except BlockConsistencyError as exc:
            out.append(f" phi: not block consistent ({exc})")
        out.append(f" nu={nu:.4g} beta={beta:.4g} duration mode={int(np.argmax(pmf)) + 1}")
        norms = np.linalg.norm(model.duration.omega[i], axis=1)
        out.append(" |omega| per primitive: " + " ".join(f"{v:.4g}" for v in norms))
    return "\n".join(out)


def cmd_inspect(args) -> int:
    model = _load_model(args.model)
    if args.action is not None and not 0 <= args.action < model.n_actions:
        raise UsageError(f"--action must be in [0, {model.n_actions}), got {args.action}")
    print(render_model(model, None if args.action is None else [args.action]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stmseg", description="Action segmentation with substructured switching linear dynamics.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("simulate", help="sample labelled sequences from a model or scenario")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", type=Path)
    src.add_argument("--scenario", help=f"bundled preset or preset file ({', '.join(available_scenarios())})")
    sp.add_argument("--frames", type=int, required=True)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--save-model", type=Path, help="also write the sampled scenario model")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train a model from labelled sequences")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--config", type=Path)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("segment", help="label a sequence with the particle filter")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--input", type=Path, required=True)
    sp.add_argument("--particles", type=int, default=200)
    sp.add_argument("--refine", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--window", type=int, default=40)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("eval", help="compare predicted and true labels")
    sp.add_argument("--pred", type=Path, required=True)
    sp.add_argument("--truth", type=Path, required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="run the synthetic ablation benchmark")
    sp.add_argument("--scenario", default="separable-2x3")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--variants", default=",".join(VARIANTS))
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--t-max", type=int)
    sp.add_argument("--particles", type=int, default=200)
    sp.add_argument("--refine", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--timing", action="store_true", help="include wall-clock fields in the JSON")
    sp.add_argument("--out", type=Path)
    sp.add_argument("--tsv", type=Path)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("inspect", help="print a model's transition structure")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--action", type=int)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stmseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"stmseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ModelError as exc:
        print(f"stmseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
