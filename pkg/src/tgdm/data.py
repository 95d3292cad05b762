"""Domains, class splits, N-way k-shot episodes and pairwise episode mixup."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, add, mul, sub

FMAT_MAGIC = b"FMAT"


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainDataset:
    domain_id: str
    classes: dict[str, np.ndarray]

    def __post_init__(self):
        if not self.classes:
            raise ValueError(f"domain {self.domain_id!r}: no classes")
        dims = {name: m.shape[1] for name, m in self.classes.items()}
        if len(set(dims.values())) != 1:
            raise ValueError(f"domain {self.domain_id!r}: inconsistent feature dims {dims}")

    @property
    def feature_dim(self) -> int:
        return next(iter(self.classes.values())).shape[1]

    @property
    def class_names(self) -> list[str]:
        return list(self.classes)

    def n_samples(self, names: Sequence[str] | None = None) -> int:
        names = self.class_names if names is None else names
        return sum(self.classes[n].shape[0] for n in names)

    def subset(self, names: Sequence[str], max_per_class: int | None = None) -> "DomainDataset":
        picked = {n: self.classes[n][:max_per_class] for n in names}
        return DomainDataset(self.domain_id, picked)


@dataclass(frozen=True)
class DomainShiftSpec:
    """Target-domain transform of the class-mean distribution.

    Class means are rotated by ``rotation_deg`` in every coordinate plane
    (0,1), (2,3), ... and then translated by ``translation`` along a fixed
    unit direction. ``spread`` is the within-class standard deviation.
    """

    rotation_deg: float = 0.0
    translation: float = 0.0
    spread: float = 1.0


def rotation_matrix(d: int, angle_deg: float) -> np.ndarray:
    """Block-diagonal rotation acting on consecutive coordinate pairs."""
    r = np.eye(d)
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    for i in range(0, d - 1, 2):
        r[i, i], r[i, i + 1] = c, -s
        r[i + 1, i], r[i + 1, i + 1] = s, c
    return r


def generate_synthetic_domain(
    seed: int,
    n_classes: int,
    samples_per_class: int,
    d: int,
    shift: DomainShiftSpec = DomainShiftSpec(),
    domain_id: str = "synthetic",
    mean_scale: float = 3.0,
) -> DomainDataset:
    """Gaussian class clusters whose means concentrate on the even coordinates.

    The anisotropy is what makes a rotation an actual domain gap: at 90 degrees
    the discriminative directions move onto the odd coordinates.
    """
    if n_classes <= 0 or samples_per_class <= 0:
        raise ValueError("n_classes and samples_per_class must be positive")
    if d < 2:
        raise ValueError(f"feature dim must be >= 2, got {d}")
    rng = np.random.default_rng(seed)
    axis_scale = np.where(np.arange(d) % 2 == 0, 1.0, 0.1) * mean_scale
    means = rng.standard_normal((n_classes, d)) * axis_scale
    means = means @ rotation_matrix(d, shift.rotation_deg).T
    direction = np.ones(d) / math.sqrt(d)
    means = means + shift.translation * direction
    classes = {}
    for c in range(n_classes):
        noise = rng.standard_normal((samples_per_class, d)) * shift.spread
        classes[f"{domain_id}_c{c:03d}"] = means[c] + noise
    return DomainDataset(domain_id, classes)


@dataclass(frozen=True)
class SplitSpec:
    source_base: tuple[str, ...]
    aux_target: tuple[str, ...]
    target_novel: tuple[str, ...]
    aux_per_class: int | None = None

    def __post_init__(self):
        groups = {"source_base": self.source_base, "aux_target": self.aux_target,
                  "target_novel": self.target_novel}
        for name, g in groups.items():
            if len(set(g)) != len(g):
                raise ValueError(f"split: duplicate classes in {name}")
        a, b, c = (set(g) for g in groups.values())
        overlap = (a & b) | (a & c) | (b & c)
        if overlap:
            raise ValueError(f"split: class sets overlap on {sorted(overlap)}")


@dataclass(frozen=True)
class SplitConfig:
    n_source: int | None = None  # None: all source classes
    n_aux: int = 5
    n_novel: int | None = None  # None: every remaining target class
    aux_per_class: int | None = 20
    seed: int = 0


def make_splits(source: DomainDataset, target: DomainDataset,
                cfg: SplitConfig = SplitConfig()) -> SplitSpec:
    """Partition target classes into disjoint auxiliary / novel sets."""
    rng = np.random.default_rng(cfg.seed)
    src = list(source.class_names)
    n_source = len(src) if cfg.n_source is None else cfg.n_source
    if n_source > len(src):
        raise ValueError(f"split: need {n_source} source classes, only {len(src)} available")
    src = [src[i] for i in sorted(rng.permutation(len(src))[:n_source])]
    tgt = list(target.class_names)
    n_novel = len(tgt) - cfg.n_aux if cfg.n_novel is None else cfg.n_novel
    need = cfg.n_aux + n_novel
    if cfg.n_aux < 1 or n_novel < 1 or need > len(tgt):
        raise ValueError(
            f"split: need {cfg.n_aux} aux + {n_novel} novel target classes, "
            f"only {len(tgt)} available (short by {max(need - len(tgt), 0)})")
    order = rng.permutation(len(tgt))
    aux = tuple(tgt[i] for i in order[:cfg.n_aux])
    novel = tuple(tgt[i] for i in order[cfg.n_aux:need])
    spec = SplitSpec(tuple(src), aux, novel, cfg.aux_per_class)
    m_src = source.n_samples(spec.source_base)
    m_aux = sum(min(target.classes[n].shape[0], cfg.aux_per_class or 10**12) for n in aux)
    if not m_src > m_aux:
        raise ValueError(f"split: source budget {m_src} must exceed auxiliary budget {m_aux}")
    return spec


def split_datasets(source: DomainDataset, target: DomainDataset, split: SplitSpec):
    """Materialise (D_Sb, D_aux, D_Tn) from a split."""
    return (source.subset(split.source_base),
            target.subset(split.aux_target, split.aux_per_class),
            target.subset(split.target_novel))


@dataclass(frozen=True)
class Episode:
    n_way: int
    k_shot: int
    n_query: int
    support: np.ndarray
    query: np.ndarray
    support_labels: np.ndarray
    query_labels: np.ndarray
    class_origin: tuple[str, ...]
    domain_id: str = ""
    support_index: np.ndarray = field(default=None, repr=False)
    query_index: np.ndarray = field(default=None, repr=False)

    @property
    def config(self) -> tuple[int, int, int, int]:
        return self.n_way, self.k_shot, self.n_query, self.support.shape[1]


def sample_episode(dataset: DomainDataset, classes: Sequence[str], n_way: int, k_shot: int,
                   n_query: int, rng: np.random.Generator) -> Episode:
    """Draw an N-way k-shot episode; labels follow the class draw order.

    Rows are grouped by label: support row ``i*k + j`` is shot ``j`` of label ``i``.
    """
    classes = list(classes)
    if n_way < 1 or k_shot < 1 or n_query < 1:
        raise ValueError("n_way, k_shot and n_query must be positive")
    if len(classes) < n_way:
        raise ValueError(f"episode: need {n_way} classes, only {len(classes)} given")
    chosen = [classes[i] for i in rng.choice(len(classes), size=n_way, replace=False)]
    sup, qry, sidx, qidx = [], [], [], []
    for name in chosen:
        mat = dataset.classes[name]
        if mat.shape[0] < k_shot + n_query:
            raise ValueError(
                f"episode: class {name!r} has {mat.shape[0]} samples, needs {k_shot + n_query}")
        pick = rng.choice(mat.shape[0], size=k_shot + n_query, replace=False)
        sup.append(mat[pick[:k_shot]])
        qry.append(mat[pick[k_shot:]])
        sidx.append(pick[:k_shot])
        qidx.append(pick[k_shot:])
    labels = np.arange(n_way)
    return Episode(
        n_way, k_shot, n_query,
        support=np.concatenate(sup), query=np.concatenate(qry),
        support_labels=np.repeat(labels, k_shot), query_labels=np.repeat(labels, n_query),
        class_origin=tuple(chosen), domain_id=dataset.domain_id,
        support_index=np.concatenate(sidx), query_index=np.concatenate(qidx),
    )


@dataclass(frozen=True)
class MixedEpisode:
    n_way: int
    k_shot: int
    n_query: int
    q_mix: Tensor
    s_mix: Tensor
    support_labels: np.ndarray
    query_labels: np.ndarray
    lambda_used: float
    pairing: tuple[tuple[str, str], ...]

    @property
    def support(self):
        return self.s_mix

    @property
    def query(self):
        return self.q_mix


def _within_class_perm(n_way: int, per_class: int, rng: np.random.Generator | None) -> np.ndarray:
    if rng is None:
        return np.arange(n_way * per_class)
    return np.concatenate([i * per_class + rng.permutation(per_class) for i in range(n_way)])


def align_pair(e_s: Episode, e_t: Episode, rng: np.random.Generator | None = None):
    """Row-align two episodes for mixing: label i with label i, shots shuffled per role."""
    if e_s.config != e_t.config:
        raise ValueError(f"mix: episode configs differ {e_s.config} vs {e_t.config}")
    n, k, q = e_s.n_way, e_s.k_shot, e_s.n_query
    ps, pt = _within_class_perm(n, k, rng), _within_class_perm(n, k, rng)
    qs, qt = _within_class_perm(n, q, rng), _within_class_perm(n, q, rng)
    return e_s.support[ps], e_t.support[pt], e_s.query[qs], e_t.query[qt]


def mix_episodes(e_s: Episode, e_t: Episode, lam, rng: np.random.Generator | None = None
                 ) -> MixedEpisode:
    """Convex combination ``lam * source + (1 - lam) * target`` of paired classes.

    ``lam`` may be a float or a scalar Tensor; in the latter case the mixed
    tensors stay on the tape so losses can be differentiated through the ratio.
    """
    ss, st, qs, qt = align_pair(e_s, e_t, rng)
    if isinstance(lam, Tensor):
        lam_val = lam.item()
        s_mix = add(mul(lam, Tensor(ss)), mul(sub(1.0, lam), Tensor(st)))
        q_mix = add(mul(lam, Tensor(qs)), mul(sub(1.0, lam), Tensor(qt)))
    else:
        lam_val = float(lam)
        if not 0.0 <= lam_val <= 1.0:
            raise ValueError(f"mix: lambda must lie in [0, 1], got {lam_val}")
        s_mix = Tensor(lam_val * ss + (1.0 - lam_val) * st)
        q_mix = Tensor(lam_val * qs + (1.0 - lam_val) * qt)
    return MixedEpisode(
        e_s.n_way, e_s.k_shot, e_s.n_query, q_mix=q_mix, s_mix=s_mix,
        support_labels=e_s.support_labels.copy(), query_labels=e_s.query_labels.copy(),
        lambda_used=lam_val, pairing=tuple(zip(e_s.class_origin, e_t.class_origin)),
    )


# --------------------------------------------------------------------------
# .fmat directory format

def write_fmat(path: Path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("fmat payload must be a matrix")
    with open(path, "wb") as fh:
        fh.write(FMAT_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(m.tobytes(order="C"))


def read_fmat(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FMAT_MAGIC:
        raise DatasetFormatError(f"{path}: bad header (expected magic 'FMAT')")
    rows, dim = struct.unpack("<II", raw[4:12])
    need = 12 + rows * dim * 4
    if len(raw) < need:
        raise DatasetFormatError(f"{path}: truncated payload ({len(raw)} of {need} bytes)")
    if len(raw) > need:
        raise DatasetFormatError(f"{path}: {len(raw) - need} trailing bytes")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(rows, dim).astype(np.float64)


def save_dataset(ds: DomainDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, mat in ds.classes.items():
        write_fmat(directory / f"{name}.fmat", mat)


def load_dataset(path, domain_id: str | None = None) -> DomainDataset:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    files = sorted(path.glob("*.fmat"))
    if not files:
        raise DatasetFormatError(f"{path}: no classes found")
    classes = {}
    dim = None
    for f in files:
        mat = read_fmat(f)
        if dim is None:
            dim = mat.shape[1]
        elif mat.shape[1] != dim:
            raise DatasetFormatError(f"{f}: feature dim {mat.shape[1]} differs from {dim}")
        classes[f.stem] = mat
    return DomainDataset(domain_id or path.name, classes)
