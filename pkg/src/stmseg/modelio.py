"""Versioned JSON serialization of :class:`~stmseg.model.FullModel`.

Layout (all matrices row-major nested lists, probabilities linear)::

    {
      "version": 1,
      "n_actions": S,
      "actions": [
        {"n_primitives": K, "n_stages": Q, "stage_map": [K ints],
         "theta": [[K x K]], "init_primitive": [K],
         "lds": [{"A": [[M x M]], "B": [[P x M]], "Q": [[M x M]], "R": [[P x P]]}, ...]}
      ],
      "duration": {"nu": [S], "beta": [S], "omega": [[[K_i x M]] per action]},
      "transition": {"a": [[S x S]]},
      "init": {"action": [S], "state_mean": [M], "state_cov": [[M x M]]}
    }
"""
from __future__ import annotations

import json
from typing import Any

import numpy as np

from .duration import DurationParams
from .errors import ModelFormatError
from .gaussian import GaussianBelief, LdsParams
from .model import ActionModel, FullModel, validate
from .stm import StageMap

FORMAT_VERSION = 1


def _mat(a: np.ndarray) -> list:
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(model: FullModel) -> dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "n_actions": model.n_actions,
        "state_dim": model.state_dim,
        "obs_dim": model.obs_dim,
        "actions": [
            {
                "n_primitives": act.n_primitives,
                "n_stages": act.stages.n_stages,
                "stage_map": list(act.stages.g),
                "theta": _mat(act.theta),
                "init_primitive": _mat(act.init_primitive),
                "lds": [{"A": _mat(l.A), "B": _mat(l.B), "Q": _mat(l.Q), "R": _mat(l.R)} for l in act.lds],
            }
            for act in model.actions
        ],
        "duration": {
            "nu": _mat(model.duration.nu),
            "beta": _mat(model.duration.beta),
            "omega": [_mat(w) for w in model.duration.omega],
        },
        "transition": {"a": _mat(model.transition)},
        "init": {
            "action": _mat(model.init_action),
            "state_mean": _mat(model.init_state.mean),
            "state_cov": _mat(model.init_state.cov),
        },
    }


def _array(node, shape: tuple[int, ...], where: str) -> np.ndarray:
    try:
        arr = np.asarray(node, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{where}: not a numeric array ({exc})") from None
    if arr.size == 0 and 0 in shape:
        return arr.reshape(shape)
    if arr.shape != shape:
        raise ModelFormatError(f"{where}: expected shape {shape}, got {arr.shape}")
    return arr


def model_from_dict(doc: dict[str, Any], check: bool = True) -> FullModel:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    missing = {"version", "n_actions", "actions", "duration", "transition", "init"} - doc.keys()
    if missing:
        raise ModelFormatError(f"missing top-level keys: {sorted(missing)}")
    if doc["version"] != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {doc['version']!r} (expected {FORMAT_VERSION})")
    try:
        S = int(doc["n_actions"])
        init = doc["init"]
        mean = np.asarray(init["state_mean"], dtype=float).reshape(-1)
        M = mean.size
        acts_doc = doc["actions"]
        if len(acts_doc) != S:
            raise ModelFormatError(f"n_actions={S} but {len(acts_doc)} action entries")
        P = int(doc.get("obs_dim") or np.asarray(acts_doc[0]["lds"][0]["R"]).shape[0])
        actions = []
        for i, a in enumerate(acts_doc):
            K = int(a["n_primitives"])
            where = f"actions[{i}]"
            try:
                stages = StageMap(a["stage_map"], a["n_stages"])
            except ValueError as exc:
                raise ModelFormatError(f"{where}.stage_map: {exc}") from None
            if stages.n_primitives != K:
                raise ModelFormatError(f"{where}: stage_map has {stages.n_primitives} entries, expected {K}")
            if len(a["lds"]) != K:
                raise ModelFormatError(f"{where}.lds: expected {K} regimes, got {len(a['lds'])}")
            lds = tuple(
                LdsParams(
                    _array(l["A"], (M, M), f"{where}.lds[{j}].A"),
                    _array(l["B"], (P, M), f"{where}.lds[{j}].B"),
                    _array(l["Q"], (M, M), f"{where}.lds[{j}].Q"),
                    _array(l["R"], (P, P), f"{where}.lds[{j}].R"),
                )
                for j, l in enumerate(a["lds"])
            )
            actions.append(ActionModel(
                _array(a["theta"], (K, K), f"{where}.theta"),
                stages,
                _array(a["init_primitive"], (K,), f"{where}.init_primitive"),
                lds,
            ))
        dur = doc["duration"]
        omega = tuple(
            _array(w, (actions[i].n_primitives, M), f"duration.omega[{i}]") for i, w in enumerate(dur["omega"])
        )
        if len(omega) != S:
            raise ModelFormatError(f"duration.omega: expected {S} entries, got {len(omega)}")
        model = FullModel(
            tuple(actions),
            DurationParams(_array(dur["nu"], (S,), "duration.nu"), _array(dur["beta"], (S,), "duration.beta"), omega),
            _array(doc["transition"]["a"], (S, S), "transition.a"),
            _array(init["action"], (S,), "init.action"),
            GaussianBelief(mean, _array(init["state_cov"], (M, M), "init.state_cov")),
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise ModelFormatError(f"schema violation: {exc!r}") from None
    if check:
        problems = validate(model)
        if problems:
            raise ModelFormatError("invalid model:\n  " + "\n  ".join(problems))
    return model


def save_model(model: FullModel) -> bytes:
    return json.dumps(model_to_dict(model), indent=1).encode("utf-8")


def load_model(payload: bytes | str, check: bool = True) -> FullModel:
    try:
        doc = json.loads(payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"not a JSON document: {exc}") from None
    return model_from_dict(doc, check=check)
