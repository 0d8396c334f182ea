"""Per-modality memory banks of normal patch features and nearest-neighbour scoring.

A sample's object score is the largest, over its patches, of the distance from
the patch to its nearest bank vector. Per-patch scores are those distances.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .core import DataError, Modality, PatchFeatureMap
from .features_image import resize_bilinear
from .neighbors import nn_search

DEFAULT_CORESET_RATIO = 0.1
DEFAULT_SIGMA = 4.0


@dataclass(frozen=True)
class RobustScaler:
    median: float
    iqr: float

    @property
    def degenerate(self) -> bool:
        return not self.iqr > 0

    @classmethod
    def fit(cls, scores) -> "RobustScaler":
        s = np.asarray(scores, dtype=np.float64)
        q1, med, q3 = np.percentile(s, [25, 50, 75])
        return cls(float(med), float(q3 - q1))

    def transform(self, raw):
        # degenerate spread: centre only
        div = self.iqr if self.iqr > 0 else 1.0
        return (np.asarray(raw, dtype=np.float64) - self.median) / div


@dataclass(frozen=True, eq=False)
class MemoryBank:
    modality: Modality
    vectors: np.ndarray
    ratio: float = 1.0
    seed: int = 0
    source_count: int = 0
    scaler: RobustScaler = field(default_factory=lambda: RobustScaler(0.0, 1.0))

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.vectors) < 1:
            raise ValueError("memory bank needs at least one vector")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("memory bank contains non-finite values")

    @property
    def size(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass
class ScoreResult:
    patch_scores: np.ndarray
    nearest: np.ndarray
    object_score: float
    normalized_score: float
    argmax_patch: int


def coreset_select(features: np.ndarray, ratio: float, seed: int = 0) -> np.ndarray:
    """Greedy k-center selection of ``ceil(ratio * n)`` row indices.

    The first index is drawn from ``seed``; every further pick is the row whose
    distance to the selected set is largest (ties: lower index).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("features must be a nonempty 2-D array")
    if not (ratio > 0) or ratio > 1:
        raise ValueError(f"coreset ratio must be in (0, 1], got {ratio}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain NaN or infinite values")
    n = len(x)
    k = min(n, math.ceil(ratio * n - 1e-9))
    if k >= n:
        return np.arange(n)
    first = int(np.random.default_rng(seed).integers(n))
    selected = np.empty(k, dtype=np.intp)
    selected[0] = first
    min_d = cdist(x, x[first : first + 1], "sqeuclidean")[:, 0]
    for i in range(1, k):
        j = int(np.argmax(min_d))
        selected[i] = j
        np.minimum(min_d, cdist(x, x[j : j + 1], "sqeuclidean")[:, 0], out=min_d)
    return selected


def coverage_radius(features: np.ndarray, centers) -> float:
    x = np.asarray(features, dtype=np.float64)
    c = x[np.asarray(centers)]
    d = np.sqrt(((x[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    return float(d.min(axis=1).max())


def _stack(maps: Sequence[PatchFeatureMap]) -> tuple[np.ndarray, np.ndarray]:
    if not maps:
        raise ValueError("need at least one training sample")
    dims = {m.dim for m in maps}
    if len(dims) != 1:
        raise ValueError(f"feature dimension mismatch across training samples: {sorted(dims)}")
    x = np.concatenate([np.asarray(m.features, dtype=np.float64) for m in maps])
    prov = np.concatenate([np.full(m.count, i, dtype=np.intp) for i, m in enumerate(maps)])
    return x, prov


def nearest_neighbor(bank: MemoryBank | np.ndarray, vector) -> tuple[int, float]:
    vecs = bank.vectors if isinstance(bank, MemoryBank) else np.asarray(bank)
    if len(vecs) == 0:
        raise ValueError("empty bank")
    i, d = nn_search(vecs, np.asarray(vector, dtype=np.float64).reshape(1, -1))
    return int(i[0]), float(d[0])


def score_sample(bank: MemoryBank, fmap: PatchFeatureMap | np.ndarray) -> ScoreResult:
    feats = fmap.features if isinstance(fmap, PatchFeatureMap) else np.asarray(fmap)
    if feats.shape[1] != bank.dim:
        raise ValueError(f"feature dimension {feats.shape[1]} does not match bank dimension {bank.dim}")
    idx, dist = nn_search(bank.vectors, feats)
    j = int(np.argmax(dist))
    raw = float(dist[j])
    return ScoreResult(dist, idx, raw, float(bank.scaler.transform(raw)), j)


def compute_training_scores(vectors: np.ndarray, provenance: np.ndarray, maps: Sequence[PatchFeatureMap]) -> np.ndarray:
    """Object score of each training sample against the bank minus the vectors
    that sample contributed (``provenance[i]`` is the source sample of row ``i``)."""
    if len(maps) < 2:
        raise ValueError("self-excluded training scores need at least two training samples")
    provenance = np.asarray(provenance)
    order = np.argsort(provenance, kind="stable")
    if np.any(order != np.arange(len(order))):
        vectors, provenance = vectors[order], provenance[order]
    scores = np.empty(len(maps))
    for i, m in enumerate(maps):
        lo, hi = np.searchsorted(provenance, [i, i + 1])
        _, d = nn_search(vectors, m.features, exclude=(int(lo), int(hi)))
        scores[i] = d.max()
    return scores


@dataclass
class BankBuild:
    bank: MemoryBank
    training_scores: np.ndarray
    provenance: np.ndarray


def build_bank(
    maps: Sequence[PatchFeatureMap],
    ratio: float = DEFAULT_CORESET_RATIO,
    seed: int = 0,
    modality: Modality | None = None,
) -> BankBuild:
    """Concatenate training features, coreset-subsample, then fit the robust
    scaler on self-excluded training scores (skipped for a single sample)."""
    x, prov = _stack(maps)
    sel = np.sort(coreset_select(x, ratio, seed))
    vectors, vprov = x[sel], prov[sel]
    if len(maps) >= 2:
        train_scores = compute_training_scores(vectors, vprov, maps)
        scaler = RobustScaler.fit(train_scores)
    else:
        train_scores = np.zeros(0)
        scaler = RobustScaler(0.0, 0.0)
    bank = MemoryBank(
        modality or maps[0].modality, vectors, ratio=ratio, seed=seed, source_count=len(maps), scaler=scaler
    )
    return BankBuild(bank, train_scores, vprov)


def render_score_map(patch_scores, grid: tuple[int, int], output: tuple[int, int], sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Dense ``(H, W)`` score image: bilinear upsampling then Gaussian smoothing."""
    rows, cols = grid
    if (rows, cols) == (0, 0):
        raise ValueError("score maps need a patch grid; use per-point scores for clouds")
    s = np.asarray(patch_scores, dtype=np.float64).reshape(rows, cols)
    dense = resize_bilinear(s, output)
    if sigma > 0:
        dense = ndimage.gaussian_filter(dense, sigma=sigma, mode="nearest", truncate=4.0)
    return dense


# ----------------------------------------------------------------------------
# MSBK serialization: header then row-major little-endian float32 vectors.

MSBK_MAGIC = b"MSBK"
MSBK_VERSION = 1
_MSBK_HEADER = struct.Struct("<4sHBBIIdQIddB")


def write_bank(bank: MemoryBank, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    v = np.ascontiguousarray(bank.vectors, dtype="<f4")
    header = _MSBK_HEADER.pack(
        MSBK_MAGIC, MSBK_VERSION, bank.modality.code, 0, bank.size, bank.dim,
        float(bank.ratio), int(bank.seed), int(bank.source_count),
        bank.scaler.median, bank.scaler.iqr, int(bank.scaler.degenerate),
    )
    path.write_bytes(header + v.tobytes())


def read_bank(path) -> MemoryBank:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"bank not found: {path}")
    data = path.read_bytes()
    if len(data) < _MSBK_HEADER.size or data[:4] != MSBK_MAGIC:
        raise DataError(f"{path}: not a MSBK file")
    _, version, mcode, _, m, d, ratio, seed, count, med, iqr, _ = _MSBK_HEADER.unpack_from(data)
    if version != MSBK_VERSION:
        raise DataError(f"{path}: unsupported MSBK version {version}")
    if len(data) != _MSBK_HEADER.size + 4 * m * d:
        raise DataError(f"{path}: truncated bank payload")
    v = np.frombuffer(data, dtype="<f4", offset=_MSBK_HEADER.size).reshape(m, d).astype(np.float32)
    return MemoryBank(Modality.from_code(mcode), v, ratio, seed, count, RobustScaler(med, iqr))
