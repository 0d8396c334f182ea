"""Decision-level fusion of per-modality scores.

The gating model is a one-class SVM fitted on normal samples' score vectors.
Its dual, with coefficients normalised to sum to one, is::

    minimise   1/2 * sum_ij a_i a_j k(x_i, x_j)
    subject to 0 <= a_i <= 1 / (nu * n),  sum_i a_i = 1

solved here with SMO (maximal-violating-pair selection with second-order gain).
The fused score is ``S(v) = rho - sum_i a_i k(x_i, v)``; larger is more anomalous.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import MODALITY_ORDER, DataError, Modality

log = logging.getLogger(__name__)

DEFAULT_NU = 0.5
KKT_TOL = 1e-7  # a decade under the required 1e-6 so recomputed residuals keep margin
FUSION_RULES = ("max", "mean", "single")


def kernel_matrix(x: np.ndarray, y: np.ndarray, kernel: str, gamma: float) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if kernel == "linear":
        return x @ y.T
    if kernel == "rbf":
        d2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
        return np.exp(-gamma * d2)
    raise ValueError(f"unknown kernel {kernel!r}")


def default_gamma(x: np.ndarray) -> float:
    """``1 / (d * var(x))`` over all entries; ``1 / d`` for constant data."""
    x = np.asarray(x, dtype=np.float64)
    var = float(x.var())
    d = x.shape[1]
    return 1.0 / (d * var) if var > 0 else 1.0 / d


@dataclass
class GatingModel:
    kernel: str
    gamma: float
    nu: float
    rho: float
    support_vectors: np.ndarray
    alphas: np.ndarray
    subset: tuple[Modality, ...]
    kkt_gap: float = 0.0
    n_train: int = 0
    scalers: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]

    def to_json(self) -> dict:
        return {
            "kernel": self.kernel,
            "gamma": self.gamma,
            "nu": self.nu,
            "rho": self.rho,
            "support_vectors": self.support_vectors.tolist(),
            "alphas": self.alphas.tolist(),
            "subset": [m.value for m in self.subset],
            "kkt_gap": self.kkt_gap,
            "n_train": self.n_train,
            "scalers": self.scalers,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "GatingModel":
        sv = np.asarray(doc["support_vectors"], dtype=np.float64)
        return cls(
            kernel=doc["kernel"],
            gamma=float(doc["gamma"]),
            nu=float(doc["nu"]),
            rho=float(doc["rho"]),
            support_vectors=sv.reshape(len(sv), -1),
            alphas=np.asarray(doc["alphas"], dtype=np.float64),
            subset=tuple(Modality(m) for m in doc["subset"]),
            kkt_gap=float(doc.get("kkt_gap", 0.0)),
            n_train=int(doc.get("n_train", 0)),
            scalers=dict(doc.get("scalers", {})),
        )


def save_gating(model: GatingModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_json(), indent=2, sort_keys=True))


def load_gating(path) -> GatingModel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"gating model not found: {path}")
    return GatingModel.from_json(json.loads(path.read_text()))


def _solve_dual(q: np.ndarray, c: float, tol: float, max_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    n = len(q)
    alpha = np.zeros(n)
    full = min(n, int(math.floor(1.0 / c + 1e-12)))
    alpha[:full] = c
    if full < n:
        alpha[full] = 1.0 - full * c
    grad = q @ alpha
    diag = np.diag(q)
    gap = np.inf
    for _ in range(max_iter):
        # tiny slack keeps a coefficient that sits at a bound up to rounding
        up = alpha < c * (1 - 1e-12)
        low = alpha > c * 1e-12
        neg = -grad
        i = int(np.argmax(np.where(up, neg, -np.inf)))
        m_up = neg[i]
        m_low = np.min(np.where(low, neg, np.inf))
        gap = m_up - m_low
        if gap <= tol:
            break
        b = m_up - neg  # G_j - G_i
        a = diag[i] + diag - 2.0 * q[i]
        a = np.where(a > 1e-12, a, 1e-12)
        cand = low & (b > 0)
        j = int(np.argmax(np.where(cand, b * b / a, -np.inf)))
        delta = min(b[j] / a[j], c - alpha[i], alpha[j])
        alpha[i] += delta
        alpha[j] -= delta
        grad += delta * (q[:, i] - q[:, j])
    else:
        log.warning("OCSVM solver hit max_iter=%d with KKT gap %.3g", max_iter, gap)
    return alpha, grad, float(gap)


def _rho(alpha: np.ndarray, grad: np.ndarray, c: float) -> float:
    at_upper = alpha >= c * (1 - 1e-12)
    at_lower = alpha <= c * 1e-12
    free = ~(at_upper | at_lower)
    if np.any(free):
        return float(grad[free].mean())
    lb = grad[at_upper].max() if np.any(at_upper) else -np.inf
    ub = grad[at_lower].min() if np.any(at_lower) else np.inf
    if not np.isfinite(lb):
        return float(ub)
    if not np.isfinite(ub):
        return float(lb)
    return float((lb + ub) / 2)


def fit_gating(
    vectors,
    nu: float = DEFAULT_NU,
    gamma: float | None = None,
    kernel: str = "rbf",
    subset: Sequence[Modality] | None = None,
    tol: float = KKT_TOL,
    max_iter: int = 100_000,
) -> GatingModel:
    """Fit the one-class SVM gating unit on normal score vectors ``(n, d)``."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < 2:
        raise ValueError("need at least two training vectors")
    if d > 3:
        raise ValueError("score vectors have at most three entries")
    if not (0 < nu <= 1):
        raise ValueError(f"nu must be in (0, 1], got {nu}")
    if not np.all(np.isfinite(x)):
        raise ValueError("training score vectors must be finite")
    if subset is None:
        subset = MODALITY_ORDER[:d]
    if len(subset) != d:
        raise ValueError("modality subset does not match vector dimension")
    if gamma is None:
        gamma = default_gamma(x)
    c = 1.0 / (nu * n)
    q = kernel_matrix(x, x, kernel, gamma)
    alpha, grad, gap = _solve_dual(q, c, tol, max_iter)
    rho = _rho(alpha, grad, c)
    sv = alpha > 0
    return GatingModel(kernel, float(gamma), float(nu), rho, x[sv], alpha[sv], tuple(subset), gap, n)


def kkt_residual(model: GatingModel, vectors) -> float:
    """Maximal KKT violation of the fitted dual on its training vectors."""
    x = np.asarray(vectors, dtype=np.float64).reshape(len(vectors), -1)
    n = len(x)
    c = 1.0 / (model.nu * n)
    # recover the full coefficient vector by matching support vectors to rows
    alpha = np.zeros(n)
    used = np.zeros(n, dtype=bool)
    for sv, a in zip(model.support_vectors, model.alphas):
        hits = np.nonzero(np.all(x == sv, axis=1) & ~used)[0]
        alpha[hits[0]] = a
        used[hits[0]] = True
    grad = kernel_matrix(x, x, model.kernel, model.gamma) @ alpha
    up = alpha < c * (1 - 1e-12)
    low = alpha > c * 1e-12
    return float(max(0.0, (-grad[up]).max() - (-grad[low]).min()))


def gate_score(model: GatingModel, v) -> np.ndarray | float:
    """Fused score(s) ``rho - sum_i a_i k(x_i, v)`` for one vector or a batch."""
    arr = np.asarray(v, dtype=np.float64)
    single = arr.ndim <= 1 and arr.size == model.dim
    if arr.ndim <= 1:
        x = arr.reshape(1, -1) if single else arr.reshape(-1, 1)
    else:
        x = arr
    if x.shape[1] != model.dim:
        raise ValueError(f"score vector has {x.shape[1]} entries, model expects {model.dim}")
    s = model.rho - kernel_matrix(x, model.support_vectors, model.kernel, model.gamma) @ model.alphas
    return float(s[0]) if single else s


def rule_fuse(v, rule: str) -> float:
    vals = np.asarray(v, dtype=np.float64).reshape(-1)
    if len(vals) == 0:
        raise ValueError("empty score vector")
    if rule == "max":
        return float(vals.max())
    if rule == "mean":
        return float(vals.mean())
    if rule == "single":
        if len(vals) != 1:
            raise ValueError("rule 'single' needs exactly one score")
        return float(vals[0])
    raise ValueError(f"unknown fusion rule {rule!r}")


def assemble_score_vectors(
    tables: Mapping[Modality, Mapping[str, float]],
    subset: Sequence[Modality],
) -> tuple[list[str], np.ndarray]:
    """Align per-modality ``{sample_id: score}`` tables into ``(ids, (n, d))``.

    Modalities are ordered rgb, infrared, pointcloud. Samples missing from any
    table are dropped with a warning.
    """
    ordered = [m for m in MODALITY_ORDER if m in subset]
    missing = [m for m in ordered if m not in tables]
    if missing:
        raise ValueError(f"no score table for {[m.value for m in missing]}")
    id_sets = [set(tables[m]) for m in ordered]
    common = set.intersection(*id_sets)
    union = set.union(*id_sets)
    if not common:
        raise ValueError("score tables share no sample ids")
    dropped = sorted(union - common)
    if dropped:
        log.warning("dropping %d sample(s) missing a modality score: %s", len(dropped), ", ".join(dropped[:5]))
    ids = sorted(common)
    mat = np.array([[tables[m][i] for m in ordered] for i in ids], dtype=np.float64)
    return ids, mat
