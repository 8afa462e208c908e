"""Configuration schema, loading and hashing.

Configs are YAML (or JSON) documents validated by pydantic with unknown keys
rejected.  Any leaf can be overridden from the environment with
``STOCHNS_<SECTION>__<KEY>=value``; the value is parsed as YAML, so numbers
and lists work as expected.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, field_validator, model_validator

ENV_PREFIX = "STOCHNS_"
# reserved for CLI flags, never treated as config overrides
ENV_FLAGS = {"CONFIG", "OUT", "SEED", "THREADS", "VERBOSE"}

ExperimentKind = Literal[
    "check", "simulate", "energy", "invariant", "tails", "action", "quasipotential", "ldp", "oracle"
]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TruncationConfig(_Strict):
    n_max: PositiveInt = 4
    grid_size: int = Field(0, ge=0, description="0 selects the smallest fast alias-free size")

    @model_validator(mode="after")
    def _grid(self):
        if self.grid_size and self.grid_size < 3 * self.n_max + 1:
            raise ValueError(f"grid_size must be 0 or at least 3*n_max+1 = {3 * self.n_max + 1}")
        return self


class DeltaLaw(_Strict):
    kind: Literal["power"] = "power"
    theta: PositiveFloat = 1.0
    c: PositiveFloat = 1.0


class NoiseConfig(_Strict):
    beta: PositiveFloat = 3.0
    delta_law: DeltaLaw = DeltaLaw()


class SolverSection(_Strict):
    dt: PositiveFloat = 1e-3
    t_final: PositiveFloat = 1.0
    scheme: Literal["exp-euler", "etd-rk2"] = "exp-euler"
    record_stride: PositiveInt = 1


class ModeAmplitude(_Strict):
    k: tuple[int, int]
    re: float = 0.0
    im: float = 0.0

    @field_validator("k")
    @classmethod
    def _nonzero(cls, v):
        if v == (0, 0):
            raise ValueError("k = (0, 0) is not a retained mode")
        return v


class TargetConfig(_Strict):
    """A state given by mode amplitudes, optionally rescaled to ``||x||_V^2 = v_energy``."""

    modes: list[ModeAmplitude] = Field(min_length=1)
    v_energy: PositiveFloat | None = None


class ExperimentConfig(_Strict):
    kind: ExperimentKind = "check"
    epsilon_list: list[PositiveFloat] = [0.1]
    trajectories: PositiveInt = 1000
    burn_in: float | None = Field(None, ge=0, description="None selects the decay-time default")
    radii: list[PositiveFloat] = []
    targets: list[TargetConfig] = []
    tolerance: PositiveFloat = 1e-10
    nonlinear: bool = True
    chunk_size: PositiveInt = 1000
    sample_every: PositiveInt = 1
    ball_radius: PositiveFloat = 0.5
    horizon: PositiveFloat = 5.0

    @field_validator("epsilon_list")
    @classmethod
    def _decreasing(cls, v):
        if not v:
            raise ValueError("epsilon_list must not be empty")
        if any(v[i] <= v[i + 1] for i in range(len(v) - 1)):
            raise ValueError("epsilon_list must be strictly decreasing")
        return v


class ConfigDocument(_Strict):
    truncation: TruncationConfig = TruncationConfig()
    noise: NoiseConfig = NoiseConfig()
    solver: SolverSection = SolverSection()
    experiment: ExperimentConfig = ExperimentConfig()
    seed: int = Field(0, ge=0, lt=2**64)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_overrides(self, **updates) -> "ConfigDocument":
        data = self.model_dump(mode="json")
        data.update(updates)
        return ConfigDocument.model_validate(data)


def _set_path(data: dict, path: list[str], value) -> None:
    node = data
    for key in path[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot override below non-section key {key!r}")
    node[path[-1]] = value


def env_overrides(environ=None) -> dict:
    """Nested override dict from ``STOCHNS_SECTION__KEY`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :]
        if rest in ENV_FLAGS:
            continue
        _set_path(out, [p.lower() for p in rest.split("__")], yaml.safe_load(raw))
    return out


def _merge(base: dict, over: dict) -> dict:
    merged = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = _merge(merged[k], v)
        else:
            merged[k] = v
    return merged


def load_config(path: str | Path | None = None, environ=None) -> ConfigDocument:
    """Read, merge environment overrides and validate.

    ``path=None`` starts from the defaults.  Raises ``pydantic.ValidationError``
    on schema violations and ``ValueError`` on unreadable documents.
    """
    data: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ValueError(f"{path}: not valid YAML/JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    return ConfigDocument.model_validate(_merge(data, env_overrides(environ)))
