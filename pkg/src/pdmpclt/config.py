"""Experiment configuration: a YAML file with strictly checked sections.

Every section is a mapping; unknown or misspelled keys are errors. Keys
that carry a time carry the unit in their name (``horizon_time``).
Example::

    model:
      builtin: two-regime-ou
      params: {kappa: 0.5}
    observable:
      kind: clamp-linear
      radius: 2.0
    run:
      seed: 7
      replicas: 2000
      horizon_time: 200
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .model import (
    BUILTIN_MODELS, HybridState, HypothesisWarning, ModelError, Observable, PdmpModel, affine_model,
    builtin_model, clamp_linear, constant, cosine, tabulated,
)

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ModelSection:
    builtin: str | None = None
    params: dict = field(default_factory=dict)
    custom: dict | None = None


@dataclass
class ObservableSection:
    kind: str = "clamp-linear"
    radius: float | None = None
    freq: float = 1.0
    coord: int = 0
    value: float = 1.0
    grid: list | None = None
    values: list | None = None


@dataclass
class RunSection:
    seed: int | None = None
    replicas: int = 2000
    horizon_time: float = 200.0
    burn_in_time: float = 20.0
    init_y: list | float | None = None
    init_regime: int = 0
    stationary_start: bool = True
    mean_run_time: float = 20000.0
    mean_batches: int = 32
    mu_star_points: int = 5000
    mu_star_spacing_time: float = 5.0
    quad_step_time: float = 0.01


@dataclass
class SimulateSection:
    replicas: int = 1
    layout: str = "per-replica"


@dataclass
class CheckSection:
    flow_times: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0])
    pair_samples: int = 1000
    jump_points: list = field(default_factory=lambda: [0.0, 1.0, 3.0, 5.0, 10.0])
    jump_samples: int = 100000
    drift_points: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 4.0])
    drift_max_time: float = 6.0
    drift_grid_size: int = 25
    drift_replicas: int = 10000
    genlap_points: list = field(default_factory=lambda: [0.0, 1.0, 3.0])
    genlap_times: list = field(default_factory=lambda: [1.0, 5.0, 10.0])
    genlap_replicas: int = 10000
    ergodicity_start_a: float = 5.0
    ergodicity_start_b: float = 0.0
    ergodicity_max_time: float = 4.0
    ergodicity_grid_size: int = 17
    ergodicity_ensemble: int = 1000
    fm_subsample: int = 200


@dataclass
class Sigma2Section:
    chi: str = "auto"
    trunc_time: float | None = None
    chi_step_time: float = 0.02
    chi_replicas: int = 400
    mc_points: int = 200
    qv_replicas: int = 400
    qv_horizon_time: float = 512.0


@dataclass
class CltSection:
    alpha: float = 0.01
    eps_dirac: float = 0.1
    acceptance: bool = True
    lindeberg_eps: list = field(default_factory=lambda: [0.25, 0.5, 1.0])
    lindeberg_n: list = field(default_factory=lambda: [32, 128, 512])


@dataclass
class OutputSection:
    directory: str = "out"
    formats: list = field(default_factory=lambda: ["json", "csv"])


_SECTIONS = {
    "model": ModelSection,
    "observable": ObservableSection,
    "run": RunSection,
    "simulate": SimulateSection,
    "check": CheckSection,
    "sigma2": Sigma2Section,
    "clt": CltSection,
    "output": OutputSection,
}

_CUSTOM_KEYS = {"rates", "centers", "routing", "jump", "lambda", "anchor", "c", "dim", "name"}


def _coerce(value, default, name):
    if default is None or value is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, (list, dict, str)) and not isinstance(value, type(default)):
            raise TypeError
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}") from None
    return value


def _section(cls, raw, name):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {', '.join(map(str, unknown))}")
    obj = cls()
    for key, val in raw.items():
        setattr(obj, key, _coerce(val, getattr(obj, key), f"{name}.{key}"))
    return obj


@dataclass
class ExperimentConfig:
    model: ModelSection
    observable: ObservableSection
    run: RunSection
    simulate: SimulateSection
    check: CheckSection
    sigma2: Sigma2Section
    clt: CltSection
    output: OutputSection

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def build_model(self) -> PdmpModel:
        sec = self.model
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", HypothesisWarning)
            if sec.builtin is not None:
                return builtin_model(sec.builtin, dict(sec.params))
            spec = dict(sec.custom)
            return affine_model(
                spec["rates"], spec["centers"], spec["routing"], dict(spec["jump"]),
                lam=float(spec.get("lambda", 1.0)), anchor=spec.get("anchor", 0.0),
                c=float(spec.get("c", 1.0)), name=str(spec.get("name", "custom-affine")),
                dim=int(spec.get("dim", 1)),
            )

    def init_state(self, model: PdmpModel) -> HybridState:
        y = self.run.init_y
        y = model.anchor if y is None else np.broadcast_to(np.asarray(y, float), (model.dim,))
        return model.state(tuple(y), self.run.init_regime)

    def build_observable(self, radius_default=None) -> Observable:
        o = self.observable
        if o.kind == "clamp-linear":
            r = o.radius if o.radius is not None else radius_default
            if r is None:
                raise ConfigError("observable.radius is required here")
            return clamp_linear(float(r), o.coord)
        if o.kind == "cosine":
            return cosine(o.freq, o.coord)
        if o.kind == "constant":
            return constant(o.value)
        if o.kind == "tabulated":
            if o.grid is None or o.values is None:
                raise ConfigError("observable: tabulated needs grid and values")
            return tabulated(o.grid, o.values, coord=o.coord)
        raise ConfigError(f"observable.kind: unknown {o.kind!r}")


def _validate(cfg: ExperimentConfig) -> None:
    m = cfg.model
    if (m.builtin is None) == (m.custom is None):
        raise ConfigError("model: give exactly one of builtin or custom")
    if m.builtin is not None and m.builtin not in BUILTIN_MODELS:
        raise ConfigError(f"model.builtin: unknown model {m.builtin!r}")
    if m.custom is not None:
        if not isinstance(m.custom, dict):
            raise ConfigError("model.custom: expected a mapping")
        unknown = sorted(set(m.custom) - _CUSTOM_KEYS)
        if unknown:
            raise ConfigError(f"model.custom: unknown key(s) {', '.join(unknown)}")
        missing = sorted({"rates", "centers", "routing", "jump"} - set(m.custom))
        if missing:
            raise ConfigError(f"model.custom: missing {', '.join(missing)}")
    if cfg.run.seed is None:
        raise ConfigError("run.seed is required")
    if not 0 <= cfg.run.seed < 2**64:
        raise ConfigError("run.seed must be in [0, 2^64)")
    if cfg.run.replicas < 1 or cfg.simulate.replicas < 1:
        raise ConfigError("replica counts must be positive")
    if not cfg.run.horizon_time > 0:
        raise ConfigError("run.horizon_time must be positive")
    for sec_name, sec in (("check", cfg.check), ("clt", cfg.clt)):
        for f in dataclasses.fields(sec):
            val = getattr(sec, f.name)
            if isinstance(val, list) and not val:
                raise ConfigError(f"{sec_name}.{f.name}: grid is empty")
    if cfg.sigma2.chi not in ("auto", "analytic", "monte-carlo"):
        raise ConfigError("sigma2.chi must be auto, analytic or monte-carlo")
    if cfg.simulate.layout not in ("per-replica", "long"):
        raise ConfigError("simulate.layout must be per-replica or long")
    try:
        model = cfg.build_model()
        cfg.init_state(model)
    except (ModelError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def parse_config(raw: dict, seed: int | None = None) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(map(str, unknown))}")
    cfg = ExperimentConfig(**{name: _section(cls, raw.get(name), name) for name, cls in _SECTIONS.items()})
    if seed is not None:
        cfg.run.seed = seed
    _validate(cfg)
    return cfg


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw, seed)
