"""Flat ``key = value`` experiment configuration with strict parsing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .cem import CEMConfig
from .dcmm import DCMMConfig
from .synthworld import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # world
    n_users: int = 1000
    n_source_items: int = 2000
    n_target_items: int = 2000
    latent_dim: int = 16
    causal_fraction: float = 0.5
    noise: float = 0.3
    interactions_per_user: int = 20
    content_dim: int = 16
    n_categories: int = 20
    hidden_cause_fraction: float = 0.1
    seed: int = 7
    # labeling
    tau: float = 0.9
    L_max: int = 50
    calib_M: int = 10_000
    behavior_dim: int = 16
    behavior_epochs: int = 10
    behavior_rounds: int = 2
    # causal / propensity models
    d_id: int = 16
    d_ct: int = 16
    n_blocks: int = 2
    heads: int = 1
    keep: float = 0.8
    dcmm_epochs: int = 6
    warmup: int = 2
    dcmm_batch: int = 256
    k: int = 4
    lr_f: float = 1e-3
    lr_e: float = 1e-3
    # recommender
    d_c: int = 5
    rec_hidden: int = 64
    rec_epochs: int = 8
    rec_batch: int = 256
    rec_lr: float = 3e-3
    # evaluation
    K: int = 10
    sampled_candidates: int = 0
    seeds: str = "0,1,2,3,4"
    tau_grid: str = "0,0.5,0.65,0.8,0.9,0.95"
    # model selection and ablation flags
    base_model: bool = False
    no_clm: bool = False
    no_cas: bool = False
    no_att: bool = False
    no_gate: bool = False
    with_cache: bool = False
    # serving simulation
    day_events: int = 1000
    daily_epochs: int = 1
    refresh: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau={self.tau} outside [0, 1)")
        if self.heads != 1:
            raise ConfigError("only single-head attention is implemented (heads = 1)")
        if self.d_c != 5:
            raise ConfigError("consistency features have fixed dimension d_c = 5")
        if self.K <= 0:
            raise ConfigError("K must be positive")
        self.seed_list()
        self.tau_list()

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"seeds must be comma-separated integers, got {self.seeds!r}") from None

    def tau_list(self) -> list[float]:
        try:
            taus = [float(s) for s in self.tau_grid.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"tau_grid must be comma-separated reals, got {self.tau_grid!r}") from None
        if any(not 0.0 <= t < 1.0 for t in taus):
            raise ConfigError("tau_grid values must lie in [0, 1)")
        return taus

    def world(self, seed: int | None = None) -> WorldConfig:
        return WorldConfig(
            n_users=self.n_users, n_source_items=self.n_source_items, n_target_items=self.n_target_items,
            latent_dim=self.latent_dim, causal_fraction=self.causal_fraction, noise=self.noise,
            interactions_per_user=self.interactions_per_user, seed=self.seed if seed is None else seed,
            content_dim=self.content_dim, n_categories=self.n_categories,
            hidden_cause_fraction=self.hidden_cause_fraction)

    def dcmm(self, seed: int, mode: str = "plcl") -> DCMMConfig:
        return DCMMConfig(d_id=self.d_id, d_ct=self.d_ct, n_blocks=self.n_blocks, keep=self.keep,
                          L_max=self.L_max, epochs=self.dcmm_epochs, warmup=self.warmup,
                          batch_size=self.dcmm_batch, k=self.k, lr_f=self.lr_f, lr_e=self.lr_e,
                          seed=seed, mode=mode)

    def cem(self, seed: int, enhanced: bool = True, no_att: bool = False, no_gate: bool = False) -> CEMConfig:
        return CEMConfig(d=self.d_id + self.d_ct, hidden=self.rec_hidden, epochs=self.rec_epochs,
                         batch_size=self.rec_batch, k=self.k, lr=self.rec_lr, seed=seed,
                         enhanced=enhanced, no_att=no_att, no_gate=no_gate)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.as_dict().items())

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_KIND = {"int": "integer", "float": "real number", "bool": "boolean (true/false)", "str": "string"}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: expected {_KIND[kind]}, got {raw!r}") from None


def _parse_line(line: str, where: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
    key, value = line.split("=", 1)
    key = key.strip()
    if key not in _TYPES:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    return key, value


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    out: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _parse_line(line, f"{origin}:{n}")
        if key in out:
            raise ConfigError(f"{origin}:{n}: duplicate key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides in order."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for item in overrides:
        key, value = _parse_line(item, "--set")
        values[key] = _coerce(key, value)
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg
