"""Experiment configuration: a YAML document validated against a pydantic schema.

Unknown keys are rejected. ``ExperimentConfig.echo()`` returns the fully
defaulted configuration as canonical JSON for report headers, and
``config_schema()`` returns the published JSON schema.
"""
from __future__ import annotations

import json
import os
from typing import List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..errors import ConfigurationError
from ..identification import SampleSizeParams
from ..riccati import CostMatrices, solve_dare
from ..system import NoiseModel, SystemParams, random_stabilizable

Matrix = List[List[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSpec(_Strict):
    A: Optional[Matrix] = None
    B: Optional[Matrix] = None
    generator: Optional[Literal["random-stabilizable"]] = None
    p: Optional[int] = Field(None, ge=1)
    r: Optional[int] = Field(None, ge=1)
    generator_seed: int = 0
    radius: float = Field(0.9, gt=0)

    @model_validator(mode="after")
    def _one_source(self):
        explicit = self.A is not None or self.B is not None
        if explicit == (self.generator is not None):
            raise ValueError("give either explicit A and B or a generator")
        if explicit and (self.A is None or self.B is None):
            raise ValueError("explicit systems need both A and B")
        if self.generator is not None and (self.p is None or self.r is None):
            raise ValueError("the generator needs p and r")
        if explicit:
            SystemParams(self.A, self.B)
        return self

    def build(self):
        if self.generator is not None:
            return random_stabilizable(self.p, self.r, self.generator_seed, self.radius)[0]
        return SystemParams(self.A, self.B)


class NoiseSpec(_Strict):
    kind: Literal["gaussian", "symmetric-weibull", "uniform-bounded", "none"] = "gaussian"
    C: Optional[Matrix] = None
    alpha: Optional[float] = None
    b1: Optional[float] = None
    b2: Optional[float] = None


class CostSpec(_Strict):
    Q: Optional[Matrix] = None
    R: Optional[Matrix] = None


class SizingSpec(_Strict):
    rho: float = Field(1.0, gt=0)
    c_psi: float = Field(1.0, gt=0)
    alpha: Optional[float] = Field(None, gt=0)


class AlgorithmSpec(_Strict):
    epsilon0: float = Field(0.5, gt=0)
    delta: float = 0.05
    episode_length: Optional[int] = Field(2000, ge=1)
    sizing: SizingSpec = SizingSpec()
    eps_floor: float = Field(0.0, ge=0)
    max_redraws: int = Field(100, ge=0)
    x0: Optional[List[float]] = None
    rank_tol: float = Field(1e-8, gt=0)

    @field_validator("delta")
    @classmethod
    def _delta(cls, v):
        if not 0 < v < 1:
            raise ValueError("delta must lie in (0, 1)")
        return v


class RiccatiSpec(_Strict):
    tol: float = Field(1e-12, gt=0)
    max_iter: int = Field(100000, ge=1)
    radius_samples: int = Field(200, ge=1)


class SimulateSpec(_Strict):
    n: int = Field(1000, ge=1)
    feedback: Union[Literal["optimal", "zero"], Matrix] = "optimal"
    x0: Optional[List[float]] = None
    precision: Literal["float", "exact"] = "float"


class SpectralSpec(_Strict):
    matrix: Optional[Matrix] = None
    unit_tol: float = Field(1e-6, gt=0)


class PsiSpec(_Strict):
    matrix: Optional[Matrix] = None
    delta: float = 0.05
    n_steps: int = Field(50, ge=1)
    n_mc: int = Field(200, ge=100)

    @field_validator("delta")
    @classmethod
    def _delta(cls, v):
        if not 0 < v < 1:
            raise ValueError("delta must lie in (0, 1)")
        return v


class MonteCarloSpec(_Strict):
    replicates: int = Field(200, ge=0)
    confidence: float = 0.99

    @field_validator("confidence")
    @classmethod
    def _conf(cls, v):
        if not 0 < v < 1:
            raise ValueError("confidence must lie in (0, 1)")
        return v


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0)
    system: SystemSpec
    noise: NoiseSpec = NoiseSpec()
    cost: CostSpec = CostSpec()
    algorithm: AlgorithmSpec = AlgorithmSpec()
    riccati: RiccatiSpec = RiccatiSpec()
    simulate: SimulateSpec = SimulateSpec()
    spectral: SpectralSpec = SpectralSpec()
    psi: PsiSpec = PsiSpec()
    montecarlo: MonteCarloSpec = MonteCarloSpec()

    @model_validator(mode="after")
    def _consistent(self):
        theta = self.system.build()
        try:
            self.noise_model(theta)
        except ConfigurationError as exc:
            raise ValueError(f"noise: {exc}") from None
        try:
            self.cost_matrices(theta)
        except ConfigurationError as exc:
            raise ValueError(f"cost: {exc}") from None
        for name, vec in (("algorithm.x0", self.algorithm.x0), ("simulate.x0", self.simulate.x0)):
            if vec is not None and len(vec) != theta.p:
                raise ValueError(f"{name} must have length {theta.p}")
        fb = self.simulate.feedback
        if isinstance(fb, list) and np.shape(fb) != (theta.r, theta.p):
            raise ValueError(f"simulate.feedback must be {theta.r}x{theta.p}")
        return self

    def system_params(self):
        return self.system.build()

    def noise_model(self, theta=None):
        theta = theta or self.system_params()
        spec = self.noise
        if spec.kind == "none":
            return None
        C = np.eye(theta.p) if spec.C is None else spec.C
        return NoiseModel(spec.kind, C, alpha=spec.alpha, b1=spec.b1, b2=spec.b2)

    def cost_matrices(self, theta=None):
        theta = theta or self.system_params()
        Q = np.eye(theta.p) if self.cost.Q is None else self.cost.Q
        R = np.eye(theta.r) if self.cost.R is None else self.cost.R
        cost = CostMatrices(Q, R)
        cost.check(theta)
        return cost

    def sizing_params(self, noise=None):
        alpha = self.algorithm.sizing.alpha
        if alpha is None:
            alpha = 2.0 if noise is None else noise.alpha
        return SampleSizeParams(rho=self.algorithm.sizing.rho, alpha=alpha,
                                c_psi=self.algorithm.sizing.c_psi)

    def feedback(self, theta=None):
        theta = theta or self.system_params()
        fb = self.simulate.feedback
        if fb == "zero":
            return np.zeros((theta.r, theta.p))
        if fb == "optimal":
            return solve_dare(theta, self.cost_matrices(theta), self.riccati.tol,
                              self.riccati.max_iter).L
        return np.array(fb, dtype=float)

    def echo(self):
        """Canonical one-line JSON of the fully defaulted configuration."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"),
                          allow_nan=True)


def config_schema():
    return ExperimentConfig.model_json_schema()


def _set_path(data, dotted, value):
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        nxt = node.get(key)
        if nxt is None:
            nxt = node[key] = {}
        if not isinstance(nxt, dict):
            raise ConfigurationError(f"override {dotted}: {key} is not a section")
        node = nxt
    node[keys[-1]] = value


def apply_overrides(data, overrides):
    """Apply ``key.path=value`` strings (values parsed as YAML) to a raw config dict."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        if not key.strip():
            raise ConfigurationError(f"override {item!r} has an empty key")
        _set_path(data, key.strip(), yaml.safe_load(raw))
    return data


def _format_errors(exc):
    lines = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(source, overrides=None):
    """Validate a config given as a path, YAML text, or mapping."""
    if isinstance(source, dict):
        data = json.loads(json.dumps(source))
    else:
        text = source
        if isinstance(source, os.PathLike) or (
                isinstance(source, str) and "\n" not in source and os.path.isfile(source)):
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config is not valid YAML: {exc}") from None
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a mapping at the top level")
    apply_overrides(data, overrides)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(_format_errors(exc)) from None

