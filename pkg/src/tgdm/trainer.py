"""Bi-level training loop for Mixup-3T with a learned mix ratio, plus the baselines.

One iteration of the target-guided loop:

1. ratio from the previous validation loss, mixed episode, tri-task loss;
2. plain gradient step on a tracked copy of the classifier parameters;
3. validation loss of the copy on a fresh auxiliary episode, differentiated
   back through step 2 into the ratio network, Adam step on the ratio network;
4. ratio regenerated with the updated network, same episodes, Adam step on
   the classifier;
5. validation loss of the updated classifier, fed to the next iteration.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .data import (DomainDataset, Episode, SplitSpec, mix_episodes, sample_episode,
                   split_datasets)
from .model import (LossWeights, ModelConfig, drgn_forward, episode_loss, fsl_loss,
                    init_drgn, init_mixup3t)

log = logging.getLogger(__name__)

VARIANTS = ("tgdm", "m-base", "base-m3t", "m3t-fixed")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    lr_theta: float = 0.001
    lr_omega: float = 0.0001
    weight_decay_omega: float = 1e-5
    inner_step_size: float | None = None  # None: same as lr_theta
    weights: LossWeights = LossWeights()
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    log_timing: bool = True
    extractor_widths: tuple[int, ...] = (64, 32)
    rounds: int = 2
    edge_hidden: int = 16
    node_width: int = 32
    drgn_hidden: tuple[int, int] = (16, 16)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("lr_theta", "lr_omega"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay_omega < 0:
            raise ValueError("weight_decay_omega must be nonnegative")
        if self.inner_step_size is not None and self.inner_step_size < 0:
            raise ValueError("inner_step_size must be nonnegative")

    @property
    def inner_step(self) -> float:
        return self.lr_theta if self.inner_step_size is None else self.inner_step_size

    def model_config(self, in_dim: int) -> ModelConfig:
        return ModelConfig(in_dim, self.n_way, tuple(self.extractor_widths), self.rounds,
                           self.edge_hidden, self.node_width, tuple(self.drgn_hidden))


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> ParamSet:
    """Bias-corrected Adam with decoupled weight decay; returns new tensors."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out: ParamSet = {}
    for name, p in params.items():
        g = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"adam: gradient shape {g.shape} != parameter {name!r} {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = Tensor(p.data - lr * update - lr * weight_decay * p.data)
    return out


# --------------------------------------------------------------------------
# single-iteration pieces

def _mix_rng(mix_seed):
    return None if mix_seed is None else np.random.default_rng(mix_seed)


@dataclass
class PseudoStep:
    theta_hat: ParamSet
    lambda_hat: float
    # tape handles needed to differentiate through the step
    theta_leaf: ParamSet
    omega_leaf: ParamSet
    lambda_tensor: Tensor
    loss: float
    components: tuple[float, float, float]


def pseudo_step(theta: ParamSet, omega: ParamSet, e_s: Episode, e_t: Episode,
                l_t_val_prev: float, cfg: TrainConfig, mix_seed=None) -> PseudoStep:
    """Plain gradient step on a tracked copy of theta, ratio from omega.

    The returned parameters stay on the tape, connected to a tracked copy of
    omega; the inputs themselves are never modified.
    """
    th = ad.tracked_copy(theta)
    om = ad.tracked_copy(omega)
    lam = drgn_forward(om, float(l_t_val_prev))
    e_mix = mix_episodes(e_s, e_t, lam, _mix_rng(mix_seed))
    loss, comps = fsl_loss(th, e_s, e_t, e_mix, cfg.weights)
    names = list(th)
    gs = ad.grad(loss, [th[n] for n in names], create_graph=True)
    eta = cfg.inner_step
    theta_hat = {n: ad.sub(th[n], ad.scale(g, eta)) for n, g in zip(names, gs)}
    return PseudoStep(theta_hat, lam.item(), th, om, lam, loss.item(), comps)


@dataclass
class DrgnUpdate:
    omega: ParamSet
    hypergrad: ParamSet
    lambda_hat: float
    val_loss_hat: float
    dval_dlambda: float


def drgn_update(omega: ParamSet, adam_omega: AdamState, theta: ParamSet, e_s: Episode,
                e_t: Episode, e_t_val: Episode, l_t_val_prev: float, cfg: TrainConfig,
                mix_seed=None) -> DrgnUpdate:
    """Hypergradient of the post-step validation loss, then one Adam step on omega."""
    ps = pseudo_step(theta, omega, e_s, e_t, l_t_val_prev, cfg, mix_seed)
    val = episode_loss(ps.theta_hat, e_t_val)
    names = list(ps.omega_leaf)
    gs = ad.grad(val, [ps.omega_leaf[n] for n in names] + [ps.lambda_tensor])
    hg = {n: g.data for n, g in zip(names, gs)}
    new_omega = adam_step(omega, hg, adam_omega, cfg.lr_omega, cfg.weight_decay_omega)
    return DrgnUpdate(new_omega, hg, ps.lambda_hat, val.item(), gs[-1].item())


def _theta_step(theta: ParamSet, adam_theta: AdamState, e_s, e_t, e_mix, cfg: TrainConfig,
                weights: LossWeights):
    th = ad.tracked_copy(theta)
    loss, comps = fsl_loss(th, e_s, e_t, e_mix, weights)
    names = list(th)
    grads = dict(zip(names, ad.grad(loss, [th[n] for n in names])))
    return adam_step(theta, grads, adam_theta, cfg.lr_theta), loss.item(), comps


def theta_update(theta: ParamSet, adam_theta: AdamState, omega: ParamSet, e_s: Episode,
                 e_t: Episode, l_t_val_prev: float, cfg: TrainConfig, mix_seed=None):
    """Regenerate the ratio with the current omega and take the real Adam step on theta.

    Returns ``(theta, lambda, loss_fsl, (L_S, L_T, L_Mix))``.
    """
    with ad.no_grad():
        lam = drgn_forward(omega, float(l_t_val_prev)).item()
    e_mix = mix_episodes(e_s, e_t, lam, _mix_rng(mix_seed))
    new_theta, loss, comps = _theta_step(theta, adam_theta, e_s, e_t, e_mix, cfg, cfg.weights)
    return new_theta, lam, loss, comps


def validation_loss(theta: ParamSet, e_t_val: Episode) -> float:
    with ad.no_grad():
        return episode_loss(theta, e_t_val).item()


# --------------------------------------------------------------------------
# full loop

@dataclass(frozen=True)
class IterationLog:
    t: int
    lambda_hat: float
    lam: float
    loss_s: float
    loss_t: float
    loss_mix: float
    loss_fsl: float
    loss_tval: float
    ms: float

    CSV_HEADER = "iter,lambda_hat,lambda,loss_s,loss_t,loss_mix,loss_fsl,loss_tval,ms"

    def csv_row(self) -> str:
        vals = [self.lambda_hat, self.lam, self.loss_s, self.loss_t, self.loss_mix,
                self.loss_fsl, self.loss_tval]
        return ",".join([str(self.t), *(repr(float(v)) for v in vals), f"{self.ms:.3f}"])


def log_to_csv(rows) -> str:
    return "\n".join([IterationLog.CSV_HEADER, *(r.csv_row() for r in rows)]) + "\n"


@dataclass
class TrainResult:
    theta: ParamSet
    omega: ParamSet | None
    log: list[IterationLog]
    variant: str


@dataclass(frozen=True)
class IterationEpisodes:
    e_s: Episode
    e_t: Episode
    e_t_val: Episode
    mix_seed: int


def iteration_episodes(d_sb: DomainDataset, d_aux: DomainDataset, cfg: TrainConfig,
                       t: int) -> IterationEpisodes:
    """Episodes of iteration ``t``; the stream depends only on (seed, t)."""
    rng = np.random.default_rng([cfg.seed, t, 0])
    n, k, q = cfg.n_way, cfg.k_shot, cfg.n_query
    e_s = sample_episode(d_sb, d_sb.class_names, n, k, q, rng)
    e_t = sample_episode(d_aux, d_aux.class_names, n, k, q, rng)
    e_v = sample_episode(d_aux, d_aux.class_names, n, k, q, rng)
    return IterationEpisodes(e_s, e_t, e_v, int(rng.integers(2**63 - 1)))


def initial_params(cfg: TrainConfig, in_dim: int):
    mcfg = cfg.model_config(in_dim)
    theta = init_mixup3t(mcfg, np.random.default_rng([cfg.seed, 100]))
    omega = init_drgn(mcfg, np.random.default_rng([cfg.seed, 101]))
    return theta, omega


def beta_lambda(cfg: TrainConfig, t: int, a: float = 1.0, b: float = 1.0) -> float:
    return float(np.random.default_rng([cfg.seed, t, 1]).beta(a, b))


Callback = Callable[[IterationLog, ParamSet, "ParamSet | None"], None]


def train(source_ds: DomainDataset, target_ds: DomainDataset, split: SplitSpec,
          cfg: TrainConfig, variant: str = "tgdm", fixed_lambda: float | None = None,
          callback: Callback | None = None) -> TrainResult:
    """Run ``cfg.iterations`` iterations of the chosen variant.

    Variants share initial parameters and episode streams for a given seed.
    ``m-base`` trains on source and target episodes only (no mixed episode),
    ``base-m3t`` draws the ratio from Beta(1, 1) each iteration, ``m3t-fixed``
    uses ``fixed_lambda`` throughout, ``tgdm`` is the bi-level loop.
    """
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if variant == "m3t-fixed" and (fixed_lambda is None or not 0.0 < fixed_lambda < 1.0):
        raise ValueError("m3t-fixed needs fixed_lambda in (0, 1)")
    d_sb, d_aux, _ = split_datasets(source_ds, target_ds, split)
    theta, omega = initial_params(cfg, d_sb.feature_dim)
    adam_t, adam_o = AdamState(), AdamState()
    weights = cfg.weights
    if variant == "m-base":
        weights = LossWeights(0.5, 0.5, 0.0)

    try:
        val_ep = sample_episode(d_aux, d_aux.class_names, cfg.n_way, cfg.k_shot, cfg.n_query,
                                np.random.default_rng([cfg.seed, 102]))
        l_val = validation_loss(theta, val_ep)
    except Exception as exc:
        raise TrainingError(f"setup ({variant}): {exc}") from exc
    rows: list[IterationLog] = []
    for t in range(cfg.iterations):
        t0 = time.perf_counter()
        try:
            eps = iteration_episodes(d_sb, d_aux, cfg, t)
            lam_hat = float("nan")
            if variant == "tgdm":
                upd = drgn_update(omega, adam_o, theta, eps.e_s, eps.e_t, eps.e_t_val, l_val,
                                  cfg, eps.mix_seed)
                omega, lam_hat = upd.omega, upd.lambda_hat
                theta, lam, loss, comps = theta_update(theta, adam_t, omega, eps.e_s, eps.e_t,
                                                       l_val, cfg, eps.mix_seed)
            else:
                if variant == "m-base":
                    lam, e_mix = float("nan"), None
                else:
                    lam = beta_lambda(cfg, t) if variant == "base-m3t" else float(fixed_lambda)
                    e_mix = mix_episodes(eps.e_s, eps.e_t, lam, _mix_rng(eps.mix_seed))
                lam_hat = lam
                theta, loss, comps = _theta_step(theta, adam_t, eps.e_s, eps.e_t, e_mix,
                                                 cfg, weights)
            l_val = validation_loss(theta, eps.e_t_val)
        except Exception as exc:
            raise TrainingError(f"iteration {t} ({variant}): {exc}") from exc
        ms = (time.perf_counter() - t0) * 1000.0 if cfg.log_timing else 0.0
        row = IterationLog(t, lam_hat, lam, *comps, loss, l_val, ms)
        rows.append(row)
        if cfg.log_every and (t % cfg.log_every == 0 or t == cfg.iterations - 1):
            log.info("[%s] iter %d lambda_hat=%.4f lambda=%.4f L_fsl=%.4f L_val=%.4f",
                     variant, t, lam_hat, lam, loss, l_val)
        if callback is not None:
            callback(row, theta, omega if variant == "tgdm" else None)
    return TrainResult(theta, omega if variant == "tgdm" else None, rows, variant)


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
