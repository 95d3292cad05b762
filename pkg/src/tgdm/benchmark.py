"""Synthetic cross-domain benchmark: rotated, translated Gaussian class clusters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .data import (DomainDataset, DomainShiftSpec, SplitConfig, generate_synthetic_domain,
                   make_splits)
from .evaluation import BaselineSpec, SuiteResult, run_baseline_suite
from .trainer import TrainConfig


def synthetic_pair(seed: int, n_source: int, n_target: int, per_class: int, dim: int,
                   shift: DomainShiftSpec) -> tuple[DomainDataset, DomainDataset]:
    """Source clusters (no shift, same spread) and target clusters under ``shift``."""
    source = generate_synthetic_domain([seed, 1], n_source, per_class, dim,
                                       DomainShiftSpec(0.0, 0.0, shift.spread), "source")
    target = generate_synthetic_domain([seed, 2], n_target, per_class, dim, shift, "target")
    return source, target


@dataclass(frozen=True)
class BenchmarkSpec:
    dim: int = 16
    n_source: int = 64
    n_target: int = 30
    per_class: int = 40
    rotation: float = 90.0
    translation: float = 1.0
    spread: float = 2.0
    n_aux: int = 10
    aux_per_class: int | None = 10
    train_n_query: int = 5
    iterations: int = 2000
    eval_episodes: int = 600

    def shift(self) -> DomainShiftSpec:
        return DomainShiftSpec(self.rotation, self.translation, self.spread)

    def datasets(self, seed: int):
        return synthetic_pair(seed, self.n_source, self.n_target, self.per_class, self.dim,
                              self.shift())

    def split(self, source: DomainDataset, target: DomainDataset, seed: int):
        return make_splits(source, target, SplitConfig(n_aux=self.n_aux,
                                                       aux_per_class=self.aux_per_class,
                                                       seed=seed))

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        kw = dict(iterations=self.iterations, n_query=self.train_n_query, seed=seed,
                  log_every=0, log_timing=False)
        kw.update(overrides)
        return TrainConfig(**kw)


def run_benchmark(spec: BenchmarkSpec, seed: int,
                  variants: Sequence[str] = ("m-base", "base-m3t", "tgdm")) -> SuiteResult:
    """Train and evaluate ``variants`` on one seeded draw of the benchmark."""
    source, target = spec.datasets(seed)
    split = spec.split(source, target, seed)
    return run_baseline_suite(source, target, split, spec.train_config(seed),
                              [BaselineSpec(v) for v in variants], spec.eval_episodes,
                              eval_n_query=15)
