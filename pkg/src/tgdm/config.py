"""``key = value`` run configuration with typed fields and strict key checking."""
from __future__ import annotations

import types
import typing
from dataclasses import MISSING, dataclass, fields, replace
from pathlib import Path

from .data import DomainShiftSpec, SplitConfig
from .model import LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int
    variant: str = "tgdm"
    fixed_lambda: float | None = None
    output_dir: str = "runs"
    # training
    iterations: int = 2000
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    lr_theta: float = 0.001
    lr_omega: float = 0.0001
    weight_decay_omega: float = 1e-5
    inner_step_size: float | None = None
    alpha0: float = 0.25
    alpha1: float = 0.25
    alpha2: float = 0.5
    log_every: int = 100
    checkpoint_every: int = 0
    log_timing: bool = True
    extractor_widths: tuple[int, ...] = (64, 32)
    rounds: int = 2
    edge_hidden: int = 16
    node_width: int = 32
    drgn_hidden: tuple[int, ...] = (16, 16)
    # data: directories, or synthetic generation when both are empty
    source_dir: str = ""
    target_dir: str = ""
    synth_seed: int = 0
    synth_dim: int = 16
    synth_source_classes: int = 64
    synth_target_classes: int = 30
    synth_per_class: int = 40
    synth_rotation: float = 90.0
    synth_translation: float = 1.0
    synth_spread: float = 2.0
    # split
    n_source: int | None = None
    n_aux: int = 10
    n_novel: int | None = None
    aux_per_class: int | None = 10
    split_seed: int = 0
    # evaluation
    eval_episodes: int = 600
    eval_n_query: int = 15
    eval_seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, n_way=self.n_way, k_shot=self.k_shot,
            n_query=self.n_query, lr_theta=self.lr_theta, lr_omega=self.lr_omega,
            weight_decay_omega=self.weight_decay_omega, inner_step_size=self.inner_step_size,
            weights=LossWeights(self.alpha0, self.alpha1, self.alpha2), seed=self.seed,
            log_every=self.log_every, checkpoint_every=self.checkpoint_every,
            log_timing=self.log_timing, extractor_widths=tuple(self.extractor_widths),
            rounds=self.rounds, edge_hidden=self.edge_hidden, node_width=self.node_width,
            drgn_hidden=tuple(self.drgn_hidden))

    def split_config(self) -> SplitConfig:
        return SplitConfig(self.n_source, self.n_aux, self.n_novel, self.aux_per_class,
                           self.split_seed)

    def shift(self) -> DomainShiftSpec:
        return DomainShiftSpec(self.synth_rotation, self.synth_translation, self.synth_spread)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


_HINTS = typing.get_type_hints(RunConfig)
KEYS = tuple(f.name for f in fields(RunConfig))


def _base_type(hint):
    args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        non_none = [a for a in args if a is not type(None)]
        return _base_type(non_none[0])[0], True
    return hint, False


def _parse_value(key: str, raw: str):
    hint, optional = _base_type(_HINTS[key])
    text = raw.strip()
    if optional and text.lower() in ("", "none"):
        return None
    if typing.get_origin(hint) is tuple:
        try:
            return tuple(int(x) for x in text.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None
    if hint is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return hint(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {hint.__name__}, got {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    missing = [f.name for f in fields(RunConfig)
               if f.default is MISSING and f.name not in values]
    if missing:
        raise ConfigError(f"{source}: missing required key(s) {', '.join(missing)}")
    try:
        cfg = RunConfig(**values)
        cfg.train_config()  # range checks live on the training config
        return cfg
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format(getattr(cfg, k))}\n" for k in KEYS)
