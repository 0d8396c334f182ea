"""Point-cloud features: k-NN graph, PCA normals and 33-bin FPFH descriptors."""

from __future__ import annotations

import numpy as np

from .core import Modality, PatchFeatureMap
from .neighbors import PointIndex

N_BINS = 11
FPFH_DIM = 3 * N_BINS
DEFAULT_K_NORMALS = 16
DEFAULT_K_FPFH = 16

# value ranges of (alpha, phi, theta)
_RANGES = ((-1.0, 1.0), (-1.0, 1.0), (-np.pi, np.pi))


def cloud_diameter(points: np.ndarray) -> float:
    """Bounding-box diagonal length."""
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def knn_graph(points: np.ndarray, k: int) -> np.ndarray:
    """``(N, k)`` indices of each point's exact k nearest neighbours.

    Self is excluded; ties go to the lower index.
    """
    n = len(points)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points ({n})")
    idx, _ = PointIndex(points).knn(k)
    return idx


def estimate_normals(points: np.ndarray, k: int = DEFAULT_K_NORMALS, viewpoint=None, neighbors=None) -> np.ndarray:
    """Unit normals from the smallest-eigenvalue eigenvector of each k-neighbourhood.

    The neighbourhood includes the point itself. Normals are flipped to face
    ``viewpoint``, which defaults to the centroid raised by ten diameters along +z.
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 3:
        raise ValueError("k must be >= 3 for normal estimation")
    if neighbors is None:
        neighbors = knn_graph(points, k)
    hood = np.concatenate([points[:, None, :], points[neighbors]], axis=1)
    centred = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / hood.shape[1]
    w, v = np.linalg.eigh(cov)
    scale = np.maximum(w[:, 2], 0.0)
    if np.any(scale <= 1e-24 * max(1.0, float(np.abs(points).max()) ** 2)):
        raise ValueError("degenerate neighbourhood: coincident points")
    normals = v[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if viewpoint is None:
        viewpoint = points.mean(axis=0) + np.array([0.0, 0.0, 10.0 * cloud_diameter(points)])
    flip = np.einsum("ij,ij->i", normals, np.asarray(viewpoint) - points) < 0
    normals[flip] *= -1
    return normals


def _pair_angles(points, normals, src, tgt):
    """Darboux angles (alpha, phi, theta) for index pairs; arrays of equal length."""
    d = points[tgt] - points[src]
    dist = np.linalg.norm(d, axis=1)
    if np.any(dist == 0):
        raise ValueError("zero-length connecting vector (duplicate points)")
    d /= dist[:, None]
    n_a, n_b = normals[src], normals[tgt]
    ang_a = np.abs(np.einsum("ij,ij->i", n_a, d))
    ang_b = np.abs(np.einsum("ij,ij->i", n_b, d))
    # source: endpoint whose normal makes the smaller angle with the line
    # (larger |cos|); ties go to the lower index
    swap = (ang_b > ang_a) | ((ang_b == ang_a) & (tgt < src))
    u = np.where(swap[:, None], n_b, n_a)
    n_t = np.where(swap[:, None], n_a, n_b)
    d = np.where(swap[:, None], -d, d)
    v = np.cross(d, u)
    vn = np.linalg.norm(v, axis=1)
    ok = vn > 1e-12
    v[ok] /= vn[ok, None]
    v[~ok] = 0.0
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, n_t)
    phi = np.einsum("ij,ij->i", u, d)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n_t), np.einsum("ij,ij->i", u, n_t))
    theta[~ok] = 0.0
    return alpha, phi, theta


def _bin(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    idx = np.floor((values - lo) / (hi - lo) * N_BINS).astype(np.intp)
    return np.clip(idx, 0, N_BINS - 1)


def _spfh_all(points, normals, neighbors) -> np.ndarray:
    n, k = neighbors.shape
    src = np.repeat(np.arange(n), k)
    tgt = neighbors.reshape(-1)
    angles = _pair_angles(points, normals, src, tgt)
    hist = np.zeros((n, FPFH_DIM))
    for block, (vals, (lo, hi)) in enumerate(zip(angles, _RANGES)):
        col = block * N_BINS + _bin(vals, lo, hi)
        np.add.at(hist, (src, col), 1.0)
    return hist * (100.0 / k)


def compute_spfh(point_index: int, points: np.ndarray, normals: np.ndarray, neighbors) -> np.ndarray:
    """33-bin simplified point feature histogram of one point, each block in percent."""
    nb = np.asarray(neighbors, dtype=np.intp).reshape(1, -1)
    if nb.shape[1] < 1:
        raise ValueError("SPFH needs at least one neighbour")
    pts = np.asarray(points, dtype=np.float64)
    # evaluate pairs (point_index, neighbour) through the batched path
    src = np.full(nb.shape[1], point_index)
    angles = _pair_angles(pts, np.asarray(normals, dtype=np.float64), src, nb[0])
    hist = np.zeros(FPFH_DIM)
    for block, (vals, (lo, hi)) in enumerate(zip(angles, _RANGES)):
        np.add.at(hist, block * N_BINS + _bin(vals, lo, hi), 1.0)
    return hist * (100.0 / nb.shape[1])


def compute_fpfh(
    points: np.ndarray,
    k_normals: int = DEFAULT_K_NORMALS,
    k_fpfh: int = DEFAULT_K_FPFH,
    viewpoint=None,
    normals: np.ndarray | None = None,
) -> PatchFeatureMap:
    """Per-point FPFH descriptors as an ungridded ``(N, 33)`` feature map.

    ``FPFH(p) = SPFH(p) + 1/k * sum_i SPFH(p_i) / ||p - p_i||``, after which each
    11-bin block is rescaled to sum to 100.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise ValueError("FPFH needs at least two points")
    index = PointIndex(points)
    k_fpfh = min(k_fpfh, len(points) - 1)
    if normals is None:
        k_n = min(k_normals, len(points) - 1)
        nb_n, _ = index.knn(k_n)
        normals = estimate_normals(points, k_n, viewpoint=viewpoint, neighbors=nb_n)
    nb, dist = index.knn(k_fpfh)
    spfh = _spfh_all(points, normals, nb)
    weights = 1.0 / dist
    fpfh = spfh + np.einsum("nk,nkd->nd", weights, spfh[nb]) / k_fpfh
    blocks = fpfh.reshape(len(points), 3, N_BINS)
    blocks *= 100.0 / blocks.sum(axis=2, keepdims=True)
    return PatchFeatureMap(Modality.POINTCLOUD, blocks.reshape(len(points), FPFH_DIM))


def raw_point_features(points: np.ndarray) -> PatchFeatureMap:
    """xyz relative to the cloud centroid; the 'raw' alternative to FPFH."""
    points = np.asarray(points, dtype=np.float64)
    return PatchFeatureMap(Modality.POINTCLOUD, points - points.mean(axis=0))
