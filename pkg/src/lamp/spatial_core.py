"""Geometry, kernel weights, bandwidth schedules and kernel-center placement.

Shared by every other module; all operations are pure given their inputs
(the random source is always an explicit argument).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KERNEL_KINDS = ("gaussian", "exponential")


def as_sites(sites) -> np.ndarray:
    """Validate and return sites as an (n, dim) float array, dim in {1, 2}."""
    arr = np.asarray(sites, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] not in (1, 2):
        raise ValueError(f"sites must be (n, 1) or (n, 2), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("site coordinates must all be finite")
    return arr


@dataclass(frozen=True)
class KernelSpec:
    """Kernel kind ('gaussian' or 'exponential') and bandwidth h > 0."""

    kind: str
    h: float

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}, expected one of {KERNEL_KINDS}")
        if not (self.h > 0 and np.isfinite(self.h)):
            raise ValueError(f"bandwidth must be positive and finite, got {self.h}")

    def weight(self, d):
        return kernel_weight(self, d)


@dataclass(frozen=True)
class BandwidthSchedule:
    """Geometric bandwidth decay h_r = h1 * delta**(r-1), 0 < delta < 1."""

    h1: float
    delta: float

    def __post_init__(self):
        if not (self.h1 > 0):
            raise ValueError("h1 must be positive")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class CenterSet:
    """Kernel centers snapped to sample sites at one resolution."""

    center_sites: np.ndarray
    resolution: int = 0
    count: int = field(default=-1)

    def __post_init__(self):
        object.__setattr__(self, "center_sites", as_sites(self.center_sites))
        if self.count < 0:
            object.__setattr__(self, "count", len(self.center_sites))
        if self.count != len(self.center_sites):
            raise ValueError("count must equal the number of center sites")


def distance(a, b) -> float:
    """Euclidean distance between two sites of equal dimension."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, (na, nb).

    Built from per-coordinate elementwise ops only, so results are
    bit-reproducible regardless of BLAS threading.
    """
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    out = (a[:, 0, None] - b[None, :, 0]) ** 2
    for k in range(1, a.shape[1]):
        out += (a[:, k, None] - b[None, :, k]) ** 2
    return out


def kernel_weight(k: KernelSpec, d):
    """Kernel weight in (0, 1]: exp(-d^2/h^2) (gaussian) or exp(-d/h) (exponential)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    if k.kind == "gaussian":
        w = np.exp(-(d * d) / (k.h * k.h))
    else:
        w = np.exp(-d / k.h)
    return float(w) if w.ndim == 0 else w


def bounding_diagonal(sites) -> float:
    """Bounding-square diagonal (2-D) or coordinate range (1-D) of the sites.

    2-D: side = max of the per-axis ranges, D = side * sqrt(2).
    """
    arr = as_sites(sites)
    if len(arr) < 2:
        raise ValueError("need at least 2 sites")
    ranges = arr.max(axis=0) - arr.min(axis=0)
    side = float(ranges.max())
    if side <= 0:
        raise ValueError("need at least 2 distinct sites")
    if arr.shape[1] == 1:
        return side
    return side * float(np.sqrt(2.0))


def center_count(D: float, h: float, dim: int, factor: float = 1.5) -> int:
    """Number of kernel centers: round(factor*D/h) in 1-D, round(factor*D^2/h^2) in 2-D.

    Rounded half-up, floored at 1; the cap at the available site count is
    applied by the caller (see fit_scale / place_centers preconditions).
    """
    if D <= 0 or h <= 0:
        raise ValueError("D and h must be positive")
    if dim == 1:
        raw = factor * D / h
    elif dim == 2:
        raw = factor * D * D / (h * h)
    else:
        raise ValueError("dim must be 1 or 2")
    return max(1, int(np.floor(raw + 0.5)))


def bandwidth_at(s: BandwidthSchedule, r: int) -> float:
    """Bandwidth at resolution r >= 1: h1 * delta**(r-1)."""
    if r < 1:
        raise ValueError("resolution must be >= 1")
    return s.h1 * s.delta ** (r - 1)


def _kmeans_pp_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first center uniform, next ones ~ squared distance."""
    n = len(pts)
    centers = np.empty((k, pts.shape[1]))
    i = int(rng.integers(n))
    centers[0] = pts[i]
    d2 = ((pts - pts[i]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            centers[j:] = pts[i]
            break
        cum = np.cumsum(d2)
        i = int(np.searchsorted(cum, rng.random() * total, side="right"))
        i = min(i, n - 1)
        centers[j] = pts[i]
        d2 = np.minimum(d2, ((pts - pts[i]) ** 2).sum(axis=1))
    return centers


def kmeans_lloyd(pts: np.ndarray, k: int, rng: np.random.Generator,
                 max_iter: int = 50, tol: float = 1e-6) -> np.ndarray:
    """Lloyd k-means with k-means++ seeding; returns (k, dim) centroids.

    Stops after max_iter iterations or when the largest centroid shift falls
    below tol relative to the data diameter. Empty clusters keep their
    previous centroid. Deterministic given the rng state.
    """
    pts = np.asarray(pts, dtype=float)
    n = len(pts)
    if k >= n:
        return pts.copy()
    C = _kmeans_pp_init(pts, k, rng)
    diam = float(np.sqrt(((pts.max(axis=0) - pts.min(axis=0)) ** 2).sum()))
    pts_sq = (pts * pts).sum(axis=1)
    for _ in range(max_iter):
        # d2 = |x|^2 + |c|^2 - 2 x.c ; the matmul reduces over dim<=2 only,
        # which keeps it bit-deterministic under threaded BLAS
        d2 = pts_sq[:, None] + (C * C).sum(axis=1)[None, :] - 2.0 * (pts @ C.T)
        labels = d2.argmin(axis=1)
        newC = C.copy()
        counts = np.bincount(labels, minlength=k)
        nz = counts > 0
        for dim in range(pts.shape[1]):
            sums = np.bincount(labels, weights=pts[:, dim], minlength=k)
            newC[nz, dim] = sums[nz] / counts[nz]
        shift = float(np.sqrt(((newC - C) ** 2).sum(axis=1).max()))
        C = newC
        if shift <= tol * diam:
            break
    return C


def place_centers(sites, C: int, rng: np.random.Generator, resolution: int = 0) -> CenterSet:
    """k-means the sites, snap each centroid to its nearest sample site, dedupe.

    The returned count can be below C when two centroids snap to the same
    site. Deterministic given the rng state.
    """
    arr = as_sites(sites)
    uniq = np.unique(arr, axis=0)
    if C > len(uniq):
        raise ValueError(f"requested {C} centers but only {len(uniq)} distinct sites")
    if C == len(uniq):
        return CenterSet(uniq, resolution=resolution)
    centroids = kmeans_lloyd(arr, C, rng)
    d2 = sq_dists(centroids, uniq)
    snapped = d2.argmin(axis=1)
    order = np.unique(snapped)
    return CenterSet(uniq[order], resolution=resolution)
