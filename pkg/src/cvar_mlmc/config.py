"""Experiment configuration: JSON schema validation and model construction.

Validation is strict: unknown keys are rejected and every violation reports
the offending field path so the CLI can exit with a useful message.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import ControllerConfig, ToleranceSplit
from .estimator import Hierarchy
from .models import FhnModel, FhnParams, LinearGaussianModel, Model, PollutantModel, PollutantParams


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


def _require(block: dict, path: str, allowed: dict):
    """Check key set and types; `allowed` maps key -> (type(s), required)."""
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}", "unknown key")
    for key, (types, required) in allowed.items():
        if key not in block:
            if required:
                raise ConfigError(f"{path}.{key}", "missing required key")
            continue
        if not isinstance(block[key], types):
            raise ConfigError(f"{path}.{key}",
                              f"expected {types}, got {type(block[key]).__name__}")


_NUM = (int, float)


@dataclass
class ExperimentConfig:
    model: Model
    model_name: str
    tau: float
    kappa: float
    z_ref: np.ndarray
    z0: np.ndarray
    alpha: float
    eta: float
    eps: float
    max_iters: int
    screen_hierarchy: Hierarchy
    n_init: int
    controller: ControllerConfig
    seed: int
    kind: str
    tolerances: list[float]
    repeats: int
    out_dir: Path
    reference_path: Path | None = None
    big_n: int = 20000
    big_level: int = 4
    raw: dict = field(default_factory=dict)


_MODEL_DIMS = {"linear_gaussian": 1, "fhn": 4, "pollutant": 9}


def _build_model(name: str, cfg: dict, path: str) -> Model:
    if name == "linear_gaussian":
        _require(cfg, path, {"sigma_b": (_NUM, False)})
        return LinearGaussianModel(sigma_b=float(cfg.get("sigma_b", 0.1)))
    if name == "fhn":
        _require(cfg, path, {"sigma": (_NUM, False), "T": (_NUM, False),
                             "N_T0": (int, False), "v0": (_NUM, False),
                             "w0": (_NUM, False), "max_level": (int, False)})
        params = FhnParams(sigma=float(cfg.get("sigma", 0.01)),
                           T=float(cfg.get("T", 10.0)),
                           N_T0=int(cfg.get("N_T0", 20)),
                           v0=float(cfg.get("v0", 0.0)),
                           w0=float(cfg.get("w0", 0.0)))
        return FhnModel(params, max_level=int(cfg.get("max_level", 10)))
    if name == "pollutant":
        _require(cfg, path, {"eps_visc": (_NUM, False), "kappa_s": (_NUM, False),
                             "max_level": (int, False), "a_range": (list, False),
                             "b_range": (list, False), "base_elements": (int, False)})
        params = PollutantParams(
            eps_visc=float(cfg.get("eps_visc", 0.1)),
            kappa_s=float(cfg.get("kappa_s", 1e4)),
            a_range=tuple(cfg.get("a_range", (4.95, 5.05))),
            b_range=tuple(cfg.get("b_range", (3.95, 4.05))),
            base_elements=int(cfg.get("base_elements", 32)),
        )
        return PollutantModel(params, max_level=int(cfg.get("max_level", 6)))
    raise ConfigError(f"{path}", f"unknown model {name!r}")


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        raw = json.load(fh)
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    _require(raw, "$", {
        "seed": (int, False),
        "model": (str, True),
        "linear_gaussian": (dict, False),
        "fhn": (dict, False),
        "pollutant": (dict, False),
        "statistic": (dict, True),
        "optimizer": (dict, False),
        "mlmc": (dict, False),
        "experiment": (dict, True),
    })
    name = raw["model"]
    if name not in _MODEL_DIMS:
        raise ConfigError("$.model", f"must be one of {sorted(_MODEL_DIMS)}")
    model = _build_model(name, raw.get(name, {}), f"$.{name}")
    d = _MODEL_DIMS[name]

    stat = raw["statistic"]
    _require(stat, "$.statistic", {"tau": (_NUM, True), "kappa": (_NUM, False),
                                   "z_ref": (list, False)})
    tau = float(stat["tau"])
    if not 0.0 < tau < 1.0:
        raise ConfigError("$.statistic.tau", "must lie in (0, 1)")
    z_ref = np.asarray(stat.get("z_ref", [0.0] * d), dtype=float)
    if z_ref.shape != (d,):
        raise ConfigError("$.statistic.z_ref", f"must have length {d}")

    opt = raw.get("optimizer", {})
    _require(opt, "$.optimizer", {"z0": (list, False), "alpha": (_NUM, False),
                                  "eta": (_NUM, False), "eps": (_NUM, False),
                                  "max_iters": (int, False)})
    z0 = np.asarray(opt.get("z0", list(z_ref)), dtype=float)
    if z0.shape != (d,):
        raise ConfigError("$.optimizer.z0", f"must have length {d}")

    mlmc = raw.get("mlmc", {})
    _require(mlmc, "$.mlmc", {"screen_samples": (list, False), "n_init": (int, False),
                              "bootstrap": (int, False), "split": (list, False),
                              "max_rounds": (int, False), "safety": (_NUM, False),
                              "n_max": (int, False)})
    screen_samples = tuple(int(x) for x in mlmc.get("screen_samples", (64, 32, 16)))
    n_init = int(mlmc.get("n_init", 17))
    split = mlmc.get("split", (0.1, 0.3, 0.6))
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError("$.mlmc.split", "must be three fractions summing to 1")
    controller = ControllerConfig(
        split=ToleranceSplit(*[float(x) for x in split]),
        safety=float(mlmc.get("safety", 1.1)),
        max_rounds=int(mlmc.get("max_rounds", 12)),
        n_max=int(mlmc.get("n_max", 1025)),
        bootstrap_replicas=int(mlmc.get("bootstrap", 50)),
    )
    screen = Hierarchy(len(screen_samples) - 1, screen_samples, n_init)

    exp = raw["experiment"]
    _require(exp, "$.experiment", {"kind": (str, True), "tolerances": (list, False),
                                   "repeats": (int, False), "out_dir": (str, False),
                                   "reference": (str, False), "big_N": (int, False),
                                   "big_level": (int, False)})
    kind = exp["kind"]
    if kind not in ("estimate", "reliability", "complexity", "optimize", "reference"):
        raise ConfigError("$.experiment.kind", f"unknown experiment kind {kind!r}")

    return ExperimentConfig(
        model=model,
        model_name=name,
        tau=tau,
        kappa=float(stat.get("kappa", 1.0)),
        z_ref=z_ref,
        z0=z0,
        alpha=float(opt.get("alpha", 0.1)),
        eta=float(opt.get("eta", 0.2)),
        eps=float(opt.get("eps", 0.01)),
        max_iters=int(opt.get("max_iters", 200)),
        screen_hierarchy=screen,
        n_init=n_init,
        controller=controller,
        seed=int(raw.get("seed", 0)),
        kind=kind,
        tolerances=[float(t) for t in exp.get("tolerances", [])],
        repeats=int(exp.get("repeats", 1)),
        out_dir=Path(exp.get("out_dir", "out")),
        reference_path=Path(exp["reference"]) if "reference" in exp else None,
        big_n=int(exp.get("big_N", 20000)),
        big_level=int(exp.get("big_level", 4)),
        raw=raw,
    )
