"""Synthetic benchmark: scenario presets, metrics and the ablation driver.

A scenario preset is a JSON file describing a ground-truth model family
(see ``scenarios/``). Rotation primitives are parameterized by their angle;
each run jitters the angles with the run's seed before sampling data.

The four variants differ only in training options:

========  ==================  =====================
variant   primitives/stages   boundary weights
========  ==================  =====================
SLDS      1 / 1               none
STM       from the preset     none
DBM       1 / 1               fitted
STM+DBM   from the preset     fitted
========  ==================  =====================
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from statistics import median
from typing import Sequence

import numpy as np

from .duration import DurationParams
from .errors import TrainingError
from .gaussian import GaussianBelief, LdsParams
from .model import ActionModel, FullModel, sample_sequence, validate
from .rbpf import REFINE_WINDOW, extract_labels, refine_boundaries, run_filter
from .stm import StageMap
from .training import LabeledDataset, TrainingConfig, train

VARIANTS = ("SLDS", "STM", "DBM", "STM+DBM")
BOUNDARY_WINDOW = 40


# -- metrics ---------------------------------------------------------------------

def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=int).reshape(-1)
    t = np.asarray(truth, dtype=int).reshape(-1)
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predicted vs {t.size} true labels")
    return p, t


def per_frame_accuracy(pred, truth) -> float:
    p, t = _pair(pred, truth)
    if p.size == 0:
        raise ValueError("empty label sequences")
    return float(np.mean(p == t))


def label_boundaries(labels) -> np.ndarray:
    """Frames whose label differs from the previous frame."""
    s = np.asarray(labels).reshape(-1)
    return np.flatnonzero(s[1:] != s[:-1]) + 1


def boundary_errors(pred, truth, window: int = BOUNDARY_WINDOW) -> list[float]:
    """Per-boundary absolute offsets after greedy one-to-one matching.

    Pairs closer than ``window`` are matched in order of distance; every
    unmatched boundary on either side costs ``window``.
    """
    p, t = _pair(pred, truth)
    bp, bt = label_boundaries(p), label_boundaries(t)
    pairs = sorted(
        (abs(int(a) - int(b)), int(b), int(a))
        for a in bp for b in bt if abs(int(a) - int(b)) <= window
    )
    used_p, used_t, errs = set(), set(), []
    for dist, b, a in pairs:
        if a in used_p or b in used_t:
            continue
        used_p.add(a)
        used_t.add(b)
        errs.append(float(dist))
    errs.extend([float(window)] * (len(bp) - len(used_p) + len(bt) - len(used_t)))
    return errs


def boundary_offset(pred, truth, window: int = BOUNDARY_WINDOW) -> float:
    """Mean absolute boundary offset in frames; 0 when neither side has boundaries."""
    errs = boundary_errors(pred, truth, window)
    return float(np.mean(errs)) if errs else 0.0


def confusion_matrix(pred, truth, n_classes: int | None = None) -> np.ndarray:
    """Counts with true classes on rows and predictions on columns."""
    p, t = _pair(pred, truth)
    k = n_classes if n_classes is not None else int(max(p.max(initial=0), t.max(initial=0))) + 1
    out = np.zeros((k, k), dtype=int)
    np.add.at(out, (t, p), 1)
    return out


# -- scenarios -------------------------------------------------------------------

def _rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Scenario:
    name: str
    doc: dict = field(repr=False)

    @property
    def defaults(self) -> dict:
        return dict(self.doc.get("benchmark", {}))

    def build_model(self, seed: int) -> FullModel:
        """Ground-truth model of this scenario, angles jittered by ``seed``."""
        doc = self.doc
        M = int(doc["state_dim"])
        if M != 2:
            raise ValueError("rotation scenarios need state_dim 2")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE4]))
        jitter = float(doc.get("angle_jitter", 0.0))
        q = float(doc["process_noise"]) ** 2 * np.eye(M)
        r = float(doc["obs_noise"]) ** 2 * np.eye(M)
        actions, nu, beta, omega = [], [], [], []
        for act in doc["actions"]:
            angles = np.asarray(act["angles"], dtype=float)
            angles = angles + rng.uniform(-jitter, jitter, size=angles.size)
            lds = tuple(LdsParams(_rotation(a), np.eye(M), q, r) for a in angles)
            stages = StageMap(act["stage_map"], max(act["stage_map"]) + 1)
            actions.append(ActionModel(np.asarray(act["theta"]), stages, np.asarray(act["init_primitive"]), lds))
            nu.append(act["nu"])
            beta.append(act["beta"])
            omega.append(np.asarray(act["omega"], dtype=float))
        init = doc["init_state"]
        model = FullModel(
            tuple(actions),
            DurationParams(np.array(nu), np.array(beta), tuple(omega)),
            np.asarray(doc["transition"], dtype=float),
            np.asarray(doc["init_action"], dtype=float),
            GaussianBelief(np.asarray(init["mean"]), np.asarray(init["cov"])),
        )
        problems = validate(model)
        if problems:
            raise ValueError(f"scenario {self.name} builds an invalid model: {problems}")
        return model


def available_scenarios() -> list[str]:
    root = resources.files("stmseg") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scenario(name_or_path: str) -> Scenario:
    """A bundled preset by name, or any preset file by path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        res = resources.files("stmseg") / "scenarios" / f"{name_or_path}.json"
        if not res.is_file():
            raise ValueError(f"unknown scenario {name_or_path!r}; available: {available_scenarios()}")
        text = res.read_text(encoding="utf-8")
    doc = json.loads(text)
    return Scenario(doc.get("name", path.stem), doc)


# -- driver ----------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkConfig:
    scenario: str = "separable-2x3"
    n_train: int | None = None  # None: the scenario's default
    n_test: int | None = None
    t_max: int | None = None
    variants: tuple[str, ...] = VARIANTS
    n_particles: int = 200
    seed: int = 0
    refine: bool = True
    window: int = REFINE_WINDOW
    n_primitives: int | None = None
    n_stages: int | None = None

    def resolved(self) -> "BenchmarkConfig":
        """Fill unset sizes from the scenario defaults and validate."""
        d = load_scenario(self.scenario).defaults
        vals = asdict(self)
        for key, fallback in (("n_train", 10), ("n_test", 5), ("t_max", 200), ("n_primitives", 3), ("n_stages", 3)):
            if vals[key] is None:
                vals[key] = int(d.get(key, fallback))
        vals["variants"] = tuple(vals["variants"])
        cfg = BenchmarkConfig(**vals)
        for key in ("n_train", "n_test", "t_max", "n_particles", "n_primitives", "n_stages"):
            if getattr(cfg, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        unknown = set(cfg.variants) - set(VARIANTS)
        if unknown or not cfg.variants:
            raise ValueError(f"variants must be a non-empty subset of {VARIANTS}, got {cfg.variants}")
        return cfg


@dataclass
class VariantResult:
    accuracy: float
    boundary_offset: float
    confusion: list[list[int]]
    n_boundary_terms: int = 0  # matched pairs plus unmatched boundaries behind boundary_offset
    seconds_per_frame: float = 0.0


@dataclass
class BenchmarkReport:
    config: dict
    seed: int
    results: dict[str, VariantResult]

    def to_dict(self, deterministic: bool = False) -> dict:
        out = {"config": self.config, "seed": self.seed, "variants": {}}
        for name, res in self.results.items():
            row = asdict(res)
            if deterministic:
                row.pop("seconds_per_frame")
            out["variants"][name] = row
        return out

    def to_json(self, deterministic: bool = False) -> str:
        return json.dumps(self.to_dict(deterministic), indent=1, sort_keys=True)

    def to_tsv(self) -> str:
        lines = ["variant\taccuracy\tboundary_offset\tseconds_per_frame"]
        for name, r in self.results.items():
            lines.append(f"{name}\t{r.accuracy:.6f}\t{r.boundary_offset:.6f}\t{r.seconds_per_frame:.6g}")
        return "\n".join(lines) + "\n"


def _derived_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1)[0])


def variant_config(variant: str, cfg: BenchmarkConfig) -> TrainingConfig:
    structured = variant in ("STM", "STM+DBM")
    return TrainingConfig(
        n_primitives=cfg.n_primitives if structured else 1,
        n_stages=cfg.n_stages if structured else 1,
        fit_dbm=variant in ("DBM", "STM+DBM"),
        seed=cfg.seed,
    )


def segment_sequence(model: FullModel, y, n_particles: int, seed: int, refine: bool = True,
                     window: int = REFINE_WINDOW):
    """Filter, extract labels and optionally refine boundaries."""
    state = run_filter(model, y, n_particles, seed)
    labels = extract_labels(state)
    if refine:
        labels = refine_boundaries(model, y, labels, window)
    return labels, state


def run_benchmark(config: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkReport:
    cfg = config.resolved()
    truth = load_scenario(cfg.scenario).build_model(cfg.seed)
    train_set = [sample_sequence(truth, cfg.t_max, _derived_seed(cfg.seed, 1, k)) for k in range(cfg.n_train)]
    test_set = [sample_sequence(truth, cfg.t_max, _derived_seed(cfg.seed, 2, k)) for k in range(cfg.n_test)]
    dataset = LabeledDataset(tuple((y, path.s) for path, y in train_set))
    results = {}
    for variant in cfg.variants:
        try:
            model = train(dataset, variant_config(variant, cfg))
        except (TrainingError, ValueError) as exc:
            raise TrainingError(f"[{variant}] {exc}") from exc
        correct, frames, errs = 0, 0, []
        confusion = np.zeros((truth.n_actions, truth.n_actions), dtype=int)
        started = time.perf_counter()
        for k, (path, y) in enumerate(test_set):
            labels, _ = segment_sequence(model, y, cfg.n_particles, _derived_seed(cfg.seed, 3, k),
                                         cfg.refine, cfg.window)
            correct += int(np.sum(labels.s == path.s))
            frames += path.s.size
            errs.extend(boundary_errors(labels.s, path.s))
            confusion += confusion_matrix(labels.s, path.s, truth.n_actions)
        elapsed = time.perf_counter() - started
        results[variant] = VariantResult(
            accuracy=correct / frames,
            boundary_offset=float(np.mean(errs)) if errs else 0.0,
            confusion=confusion.tolist(),
            n_boundary_terms=len(errs),
            seconds_per_frame=elapsed / frames,
        )
    return BenchmarkReport(asdict(cfg), cfg.seed, results)


@dataclass
class MultiSeedReport:
    reports: list[BenchmarkReport]

    def median(self, variant: str, metric: str) -> float:
        return float(median(getattr(r.results[variant], metric) for r in self.reports))

    def pooled_boundary_offset(self, variant: str) -> float:
        """Mean boundary offset over every boundary term of every seed."""
        res = [r.results[variant] for r in self.reports]
        n = sum(x.n_boundary_terms for x in res)
        return float(sum(x.boundary_offset * x.n_boundary_terms for x in res) / n) if n else 0.0

    def to_dict(self, deterministic: bool = False) -> dict:
        variants = list(self.reports[0].results)
        return {
            "seeds": [r.seed for r in self.reports],
            "median": {v: {m: self.median(v, m) for m in ("accuracy", "boundary_offset")} for v in variants},
            "pooled_boundary_offset": {v: self.pooled_boundary_offset(v) for v in variants},
            "runs": [r.to_dict(deterministic) for r in self.reports],
        }

    def to_json(self, deterministic: bool = False) -> str:
        return json.dumps(self.to_dict(deterministic), indent=1, sort_keys=True)

    def to_tsv(self) -> str:
        lines = ["variant\tmedian_accuracy\tmedian_boundary_offset\tpooled_boundary_offset"]
        for v in self.reports[0].results:
            lines.append(f"{v}\t{self.median(v, 'accuracy'):.6f}\t{self.median(v, 'boundary_offset'):.6f}"
                         f"\t{self.pooled_boundary_offset(v):.6f}")
        return "\n".join(lines) + "\n"


def run_seeds(config: BenchmarkConfig, seeds: Sequence[int]) -> MultiSeedReport:
    base = asdict(config)
    out = []
    for s in seeds:
        base["seed"] = int(s)
        out.append(run_benchmark(BenchmarkConfig(**base)))
    return MultiSeedReport(out)
