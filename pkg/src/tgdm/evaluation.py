"""Episodic test protocol, the baseline ladder, and mix-ratio trajectory statistics."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ParamSet
from .data import DomainDataset, SplitSpec, sample_episode, split_datasets
from .model import predict_episode
from .trainer import IterationLog, TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    method: str
    n_episodes: int
    accuracies: np.ndarray = field(repr=False)
    mean_acc: float
    ci95: float
    seed: int
    config_digest: str = ""
    error: str | None = None

    def to_json(self) -> str:
        payload = {"method": self.method, "n_episodes": self.n_episodes,
                   "mean_acc": self.mean_acc, "ci95": self.ci95, "seed": self.seed,
                   "config_digest": self.config_digest}
        if self.error:
            payload["error"] = self.error
        return json.dumps(payload)


def config_digest(obj) -> str:
    text = json.dumps(asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj,
                      sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def summarize(accs: Sequence[float]) -> tuple[float, float]:
    accs = np.asarray(accs, dtype=np.float64)
    return float(np.mean(accs)), float(1.96 * np.std(accs) / np.sqrt(len(accs)))


def evaluate_accuracy(theta: ParamSet, novel_ds: DomainDataset, n_way: int = 5,
                      k_shot: int = 1, n_query: int = 15, n_episodes: int = 600,
                      seed: int = 0, method: str = "", classes: Sequence[str] | None = None,
                      digest: str = "") -> EvalReport:
    classes = novel_ds.class_names if classes is None else list(classes)
    if len(classes) < n_way:
        raise ValueError(f"evaluation needs {n_way} novel classes, got {len(classes)}")
    rng = np.random.default_rng([seed, 7])
    accs = np.empty(n_episodes)
    for i in range(n_episodes):
        ep = sample_episode(novel_ds, classes, n_way, k_shot, n_query, rng)
        accs[i] = np.mean(predict_episode(theta, ep) == ep.query_labels)
    mean, ci = summarize(accs)
    return EvalReport(method, n_episodes, accs, mean, ci, seed, digest)


@dataclass(frozen=True)
class BaselineSpec:
    tag: str
    fixed_lambda: float | None = None

    def __post_init__(self):
        tags = ("m-base", "base-m3t", "m3t-fixed", "tgdm")
        if self.tag not in tags:
            raise ValueError(f"unknown baseline {self.tag!r}; choose from {tags}")
        if self.tag == "m3t-fixed" and self.fixed_lambda is not None \
                and not 0.0 < self.fixed_lambda < 1.0:
            raise ValueError("m3t-fixed lambda must lie in (0, 1)")


DEFAULT_SUITE = (BaselineSpec("m-base"), BaselineSpec("base-m3t"), BaselineSpec("tgdm"),
                 BaselineSpec("m3t-fixed"))


@dataclass(frozen=True)
class LambdaStats:
    mean: float
    std: float
    window: int
    window_means: tuple[float, ...]


def lambda_trajectory_stats(rows: Sequence[IterationLog], column: str = "lam") -> LambdaStats:
    """Mean, population std and T/20-wide window means of a logged ratio column."""
    if not rows:
        raise ValueError("lambda_trajectory_stats: empty log")
    vals = np.array([getattr(r, column) for r in rows], dtype=np.float64)
    window = max(1, len(vals) // 20)
    means = tuple(float(vals[i:i + window].mean()) for i in range(0, len(vals), window))
    return LambdaStats(float(vals.mean()), float(vals.std()), window, means)


def m3t_fixed_from_log(rows: Sequence[IterationLog]) -> BaselineSpec:
    """Constant-ratio baseline at the average ratio of a finished target-guided run."""
    return BaselineSpec("m3t-fixed", lambda_trajectory_stats(rows).mean)


@dataclass
class SuiteResult:
    reports: list[EvalReport]
    logs: dict[str, list[IterationLog]]


def run_baseline_suite(source_ds: DomainDataset, target_ds: DomainDataset, split: SplitSpec,
                       cfg: TrainConfig, variants: Sequence[BaselineSpec] = DEFAULT_SUITE,
                       n_episodes: int = 600, eval_n_query: int = 15,
                       eval_seed: int | None = None) -> SuiteResult:
    """Train and evaluate each variant with identical seeds and episode streams.

    An ``m3t-fixed`` entry without a ratio takes the mean ratio of the ``tgdm``
    run of the same suite, which is therefore trained first.
    """
    if not variants:
        raise ValueError("run_baseline_suite: no variants given")
    order = sorted(range(len(variants)),
                   key=lambda i: variants[i].tag == "m3t-fixed" and variants[i].fixed_lambda is None)
    _, _, d_tn = split_datasets(source_ds, target_ds, split)
    eval_seed = cfg.seed if eval_seed is None else eval_seed
    digest = config_digest(cfg)
    reports: dict[int, EvalReport] = {}
    logs: dict[str, list[IterationLog]] = {}
    for i in order:
        spec = variants[i]
        name = spec.tag
        try:
            lam = spec.fixed_lambda
            if spec.tag == "m3t-fixed" and lam is None:
                if "tgdm" not in logs:
                    raise ValueError("m3t-fixed without a ratio needs a tgdm run in the suite")
                lam = m3t_fixed_from_log(logs["tgdm"]).fixed_lambda
            if lam is not None:
                name = f"{spec.tag}({lam:.4f})"
            res = train(source_ds, target_ds, split, cfg, spec.tag, lam)
            logs[spec.tag] = res.log
            reports[i] = evaluate_accuracy(res.theta, d_tn, cfg.n_way, cfg.k_shot,
                                           eval_n_query, n_episodes, eval_seed, name, None,
                                           digest)
            log.info("%s: %.4f +- %.4f", name, reports[i].mean_acc, reports[i].ci95)
        except Exception as exc:  # record and keep going
            log.error("variant %s failed: %s", name, exc)
            reports[i] = EvalReport(name, 0, np.array([]), float("nan"), float("nan"),
                                    eval_seed, digest, error=str(exc))
    return SuiteResult([reports[i] for i in range(len(variants))], logs)
