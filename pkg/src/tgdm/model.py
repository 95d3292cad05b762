"""Mixup-3T classifier (MLP extractor + graph few-shot classifier) and the ratio network.

Parameters are flat name -> Tensor maps. Extractor entries are prefixed
``extractor.``, graph classifier entries ``classifier.``, ratio network
entries ``drgn.``. Layer structure is recovered from names and shapes, so a
checkpoint alone is enough to rebuild a model.
"""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

CKPT_MAGIC = b"TGDM"
LAMBDA_MARGIN = 1e-12


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    n_way: int = 5
    extractor_widths: tuple[int, ...] = (64, 32)
    rounds: int = 2
    edge_hidden: int = 16
    node_width: int = 32
    drgn_hidden: tuple[int, int] = (16, 16)


@dataclass(frozen=True)
class LossWeights:
    alpha0: float = 0.25
    alpha1: float = 0.25
    alpha2: float = 0.5

    def __post_init__(self):
        if min(self.alpha0, self.alpha1, self.alpha2) < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return Tensor(w), Tensor(b)


def init_mixup3t(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    params: ParamSet = {}
    width = cfg.in_dim
    for i, out in enumerate(cfg.extractor_widths):
        params[f"extractor.{i}.weight"], params[f"extractor.{i}.bias"] = \
            _uniform_layer(rng, width, out)
        width = out
    node = width + cfg.n_way
    for r in range(cfg.rounds):
        p = f"classifier.round{r}"
        w0, b0 = _uniform_layer(rng, node, cfg.edge_hidden)
        w1, b1 = _uniform_layer(rng, cfg.edge_hidden, 1)
        # sign-constrained so the initial edge score decreases with |x_i - x_j|;
        # with a symmetric init the adjacency starts near uniform and never leaves it
        params[f"{p}.edge0.weight"], params[f"{p}.edge0.bias"] = Tensor(np.abs(w0.data)), b0
        params[f"{p}.edge1.weight"], params[f"{p}.edge1.bias"] = Tensor(-np.abs(w1.data)), b1
        params[f"{p}.node.weight"], params[f"{p}.node.bias"] = \
            _uniform_layer(rng, 2 * node, cfg.node_width)
        node = cfg.node_width
    params["classifier.readout.weight"], params["classifier.readout.bias"] = \
        _uniform_layer(rng, node, cfg.n_way)
    return params


def init_drgn(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    params: ParamSet = {}
    widths = (1, *cfg.drgn_hidden, 1)
    for i in range(3):
        params[f"drgn.{i}.weight"], params[f"drgn.{i}.bias"] = \
            _uniform_layer(rng, widths[i], widths[i + 1])
    return params


def _layer_indices(params: ParamSet, prefix: str) -> list[int]:
    pat = re.compile(rf"^{re.escape(prefix)}\.(\d+)\.weight$")
    return sorted(int(m.group(1)) for k in params if (m := pat.match(k)))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def extract_features(params: ParamSet, samples) -> Tensor:
    x = ad.as_tensor(samples)
    layers = _layer_indices(params, "extractor")
    in_dim = params[f"extractor.{layers[0]}.weight"].shape[0]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ad.ShapeError(f"extract_features: expected [m, {in_dim}] samples, got {x.shape}")
    for j, i in enumerate(layers):
        x = _affine(x, params[f"extractor.{i}.weight"], params[f"extractor.{i}.bias"])
        if j < len(layers) - 1:
            x = ad.relu(x)
    return x


def _rounds(params: ParamSet) -> int:
    return len([k for k in params if k.startswith("classifier.round") and k.endswith(".node.weight")])


def n_way_of(params: ParamSet) -> int:
    return params["classifier.readout.weight"].shape[1]


def _self_mask(n: int) -> np.ndarray:
    return np.diag(np.full(n, -1e30))


def _adjacency(params: ParamSet, r: int, x: Tensor) -> Tensor:
    n, w = x.shape
    diff = ad.tabs(ad.sub(ad.reshape(x, (n, 1, w)), ad.reshape(x, (1, n, w))))
    p = f"classifier.round{r}"
    h = ad.relu(_affine(ad.reshape(diff, (n * n, w)),
                        params[f"{p}.edge0.weight"], params[f"{p}.edge0.bias"]))
    e = _affine(h, params[f"{p}.edge1.weight"], params[f"{p}.edge1.bias"])
    # no self-edges: a node's own state enters the update through the concat
    return ad.softmax(ad.add(ad.reshape(e, (n, n)), Tensor(_self_mask(n))))


def gnn_classify(params: ParamSet, query_f, support_f, support_labels,
                 return_adjacency: bool = False):
    """Query logits from one fully connected graph over support and query nodes."""
    query_f, support_f = ad.as_tensor(query_f), ad.as_tensor(support_f)
    labels = np.asarray(support_labels, dtype=int)
    n_way = n_way_of(params)
    missing = sorted(set(range(n_way)) - set(labels.tolist()))
    if missing:
        raise ValueError(f"gnn_classify: support has no samples of classes {missing}")
    if labels.min() < 0 or labels.max() >= n_way:
        raise ValueError(f"gnn_classify: support labels must lie in [0, {n_way})")
    n_s, n_q = support_f.shape[0], query_f.shape[0]
    enc = np.zeros((n_s + n_q, n_way))
    enc[np.arange(n_s), labels] = 1.0
    enc[n_s:] = 1.0 / n_way
    feats = ad.row_normalize(ad.concat([support_f, query_f], axis=0))
    x = ad.concat([feats, Tensor(enc)], axis=1)
    adjs = []
    for r in range(_rounds(params)):
        a = _adjacency(params, r, x)
        adjs.append(a)
        msg = ad.matmul(a, x)
        p = f"classifier.round{r}"
        x = ad.relu(_affine(ad.concat([x, msg], axis=1),
                            params[f"{p}.node.weight"], params[f"{p}.node.bias"]))
    pick = np.zeros((n_q, n_s + n_q))
    pick[np.arange(n_q), n_s + np.arange(n_q)] = 1.0
    logits = _affine(ad.matmul(Tensor(pick), x),
                     params["classifier.readout.weight"], params["classifier.readout.bias"])
    return (logits, adjs) if return_adjacency else logits


def episode_logits(params: ParamSet, episode) -> Tensor:
    fq = extract_features(params, episode.query)
    fs = extract_features(params, episode.support)
    return gnn_classify(params, fq, fs, episode.support_labels)


def episode_ce_loss(params: ParamSet, query, support, support_labels, query_labels) -> Tensor:
    fq = extract_features(params, query)
    fs = extract_features(params, support)
    return ad.cross_entropy(gnn_classify(params, fq, fs, support_labels), query_labels)


def episode_loss(params: ParamSet, episode) -> Tensor:
    return episode_ce_loss(params, episode.query, episode.support,
                           episode.support_labels, episode.query_labels)


def fsl_loss(params: ParamSet, e_s, e_t, e_mix, weights: LossWeights = LossWeights()):
    """Weighted tri-task loss; returns ``(total, (L_S, L_T, L_Mix))``.

    ``e_mix`` may be None (no intermediate episode); its component is then NaN
    and contributes nothing.
    """
    l_s = episode_loss(params, e_s)
    l_t = episode_loss(params, e_t)
    total = ad.add(ad.scale(l_s, weights.alpha0), ad.scale(l_t, weights.alpha1))
    l_mix = None
    if e_mix is not None:
        l_mix = episode_loss(params, e_mix)
        total = ad.add(total, ad.scale(l_mix, weights.alpha2))
    comps = (l_s.item(), l_t.item(), l_mix.item() if l_mix is not None else float("nan"))
    return total, comps


def drgn_forward(omega: ParamSet, l_t_val) -> Tensor:
    """Mix ratio in (0, 1) from the scalar target validation loss."""
    z = ad.as_tensor(l_t_val)
    if z.size != 1 or not np.all(np.isfinite(z.data)):
        raise ValueError(f"drgn_forward: input must be a finite scalar, got {z.data}")
    h = ad.reshape(z, (1, 1))
    layers = _layer_indices(omega, "drgn")
    if len(layers) != 3:
        raise ValueError(f"drgn_forward: expected 3 affine layers, found {len(layers)}")
    for j, i in enumerate(layers):
        h = _affine(h, omega[f"drgn.{i}.weight"], omega[f"drgn.{i}.bias"])
        if j < 2:
            h = ad.relu(h)
    # float64 sigmoid rounds to exactly 0 or 1 past |h| ~ 37; keep it open
    lam = ad.add(ad.scale(ad.sigmoid(h), 1.0 - 2 * LAMBDA_MARGIN), LAMBDA_MARGIN)
    return ad.reshape(lam, ())


def predict_logits(logits) -> np.ndarray:
    """Row argmax; ties resolve to the smallest class index."""
    return np.argmax(np.asarray(logits.data if isinstance(logits, Tensor) else logits), axis=1)


def predict_episode(params: ParamSet, episode) -> np.ndarray:
    with ad.no_grad():
        return predict_logits(episode_logits(params, episode))


# --------------------------------------------------------------------------
# checkpoint container

def save_params(path, params: ParamSet) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        data = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ParamSet:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (count,) = struct.unpack_from("<I", raw, 4)
        off = 8
        params: ParamSet = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if off + 8 * n > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            params[name] = Tensor(arr.astype(np.float64))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return params


def select(params: ParamSet, prefixes: Sequence[str]) -> ParamSet:
    return {k: v for k, v in params.items() if k.split(".", 1)[0] in prefixes}
