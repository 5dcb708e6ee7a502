"""Distributional distances between point clouds and Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SampleSet:
    points: np.ndarray
    label: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or len(pts) < 1:
            raise ValueError("a sample set needs an (N, d) array with N >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"sample set {self.label!r} contains non-finite values")
        self.points = pts


def _points(s) -> np.ndarray:
    return s.points if isinstance(s, SampleSet) else SampleSet(s).points


def sliced_w2(a, b, n_proj: int = 64, seed: int = 0) -> float:
    """Mean over random unit directions of the exact 1-D W2 between projections.

    The larger set is subsampled (seeded) to the size of the smaller one.
    """
    pa, pb = _points(a), _points(b)
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    rng = np.random.default_rng(seed)
    n = min(len(pa), len(pb))
    # subsample choice depends on which set is larger, not on argument order
    if len(pa) > n:
        pa = pa[np.sort(rng.choice(len(pa), n, replace=False))]
    elif len(pb) > n:
        pb = pb[np.sort(rng.choice(len(pb), n, replace=False))]
    dirs = rng.standard_normal((n_proj, pa.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    proj_a = np.sort(pa @ dirs.T, axis=0)
    proj_b = np.sort(pb @ dirs.T, axis=0)
    per_dir = np.sqrt(np.mean((proj_a - proj_b) ** 2, axis=0))
    return float(per_dir.mean())


def gaussian_moments(s) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance."""
    pts = _points(s)
    if len(pts) < 2:
        raise ValueError("need at least two points for a covariance")
    return pts.mean(axis=0), np.atleast_2d(np.cov(pts, rowvar=False, ddof=1))


def _psd_sqrt(c: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(c)
    tol = 1e-10 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def w2_gaussian(mean_a, cov_a, mean_b, cov_b) -> float:
    """Squared 2-Wasserstein distance between two Gaussians (Bures formula)."""
    ma, mb = np.atleast_1d(mean_a).astype(np.float64), np.atleast_1d(mean_b).astype(np.float64)
    ca, cb = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    for c, what in ((ca, "cov_a"), (cb, "cov_b")):
        if not np.allclose(c, c.T, atol=1e-12):
            raise ValueError(f"{what} is not symmetric")
    sa = _psd_sqrt(ca, "cov_a")
    _psd_sqrt(cb, "cov_b")
    cross = sa @ cb @ sa
    cross_sqrt = _psd_sqrt((cross + cross.T) / 2, "cross term")
    val = float(np.sum((ma - mb) ** 2) + np.trace(ca + cb - 2.0 * cross_sqrt))
    return max(val, 0.0)
