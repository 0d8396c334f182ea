"""Rigid alignment of dual-scan point clouds: Procrustes, point-to-point ICP, merging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DataError
from .neighbors import PointIndex

log = logging.getLogger(__name__)

DEFAULT_DEDUP_RADIUS = 0.05  # mm, scanner resolution


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self o other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def angle(self) -> float:
        """Rotation angle in radians."""
        c = (np.trace(self.rotation) - 1) / 2
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def to_list(self) -> list[float]:
        return [float(x) for x in self.rotation.reshape(-1)] + [float(x) for x in self.translation]

    @classmethod
    def from_list(cls, values) -> "RigidTransform":
        values = [float(v) for v in values]
        if len(values) != 12:
            raise ValueError(f"transform needs 12 numbers, got {len(values)}")
        r = _nearest_rotation(np.array(values[:9]).reshape(3, 3))
        return cls(r, np.array(values[9:]))


def _nearest_rotation(m: np.ndarray) -> np.ndarray:
    # re-orthonormalise values that went through a text round trip
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def save_transform(t: RigidTransform, path) -> None:
    Path(path).write_text(" ".join(repr(v) for v in t.to_list()) + "\n")


def load_transform(path) -> RigidTransform:
    try:
        return RigidTransform.from_list(Path(path).read_text().split())
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def best_rigid_transform(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid map of ``src`` onto ``dst`` (Kabsch with reflection fix)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must be matching (N, 3) arrays")
    if len(src) < 3:
        raise ValueError("need at least 3 point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0 or s[1] <= 1e-12 * s[0]:
        raise ValueError("degenerate configuration: points are collinear or coincident")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, mu_d - r @ mu_s)


@dataclass
class IcpResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    converged: bool
    rmse_trace: list[float]


def icp_align(
    src: np.ndarray,
    dst: np.ndarray,
    init: RigidTransform | None = None,
    max_iter: int = 100,
    tol: float = 1e-12,
) -> IcpResult:
    """Point-to-point ICP aligning ``src`` onto ``dst``.

    Each iteration matches every transformed source point to its exact nearest
    target point and refits the rigid transform on those pairs. Stops when the
    RMSE improvement drops below ``tol`` (converged) or after ``max_iter``
    iterations. A step that would raise the RMSE is rejected, so the trace is
    non-increasing.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("both clouds must be nonempty")
    current = init or RigidTransform.identity()
    index = PointIndex(dst)

    def residual(t):
        moved = t.apply(src)
        j, d = index.nearest(moved)
        return float(np.sqrt(np.mean(d**2))), j

    rmse, match = residual(current)
    trace = [rmse]
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        if rmse == 0.0:
            converged = True
            break
        try:
            step = best_rigid_transform(src, dst[match])
        except ValueError:
            log.debug("degenerate correspondences at iteration %d", it)
            break
        new_rmse, new_match = residual(step)
        if new_rmse > rmse:
            converged = True
            break
        improvement = rmse - new_rmse
        current, rmse, match = step, new_rmse, new_match
        trace.append(rmse)
        if improvement < tol:
            converged = True
            break
    return IcpResult(current, rmse, it, converged, trace)


def merge_scans(a: np.ndarray, b: np.ndarray, transform: RigidTransform, dedup_radius: float = DEFAULT_DEDUP_RADIUS) -> np.ndarray:
    """Concatenate ``a`` with ``transform(b)``, dropping moved points of ``b``
    lying within ``dedup_radius`` of a point of ``a``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(b) == 0:
        return a.copy()
    moved = transform.apply(b)
    if len(a) == 0:
        return moved
    _, d = PointIndex(a).nearest(moved)
    return np.concatenate([a, moved[d > dedup_radius]])
