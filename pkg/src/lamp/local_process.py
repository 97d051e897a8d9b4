"""Kernel-weighted local intercept models and their product-of-experts aggregate.

A local model explains a target only near its kernel center; a ScaleProcess
blends many of them into one single-scale spatial surface via generalized
product-of-experts, with precision weights that favour experts that are both
nearby and confident.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .spatial_core import (
    CenterSet,
    KernelSpec,
    as_sites,
    bounding_diagonal,
    center_count,
    distance,
    kernel_weight,
    place_centers,
    sq_dists,
)

log = logging.getLogger(__name__)

# total precision below this counts as "no information" at the site
EPS_PRECISION = 1e-12
VAR_CAP = 1e12


@dataclass(frozen=True)
class LocalModel:
    """One fitted kernel-weighted intercept model.

    denom caches sum(w^2) + sigma2_hat/tau2 from the fit, the denominator of
    both the mean estimate and the estimation-variance term of the
    predictive variance.
    """

    center: np.ndarray
    mu_hat: float
    sigma2_hat: float
    tau2: float
    kernel: KernelSpec
    n_local: int
    denom: float

    @property
    def estimation_variance(self) -> float:
        """Variance of the estimated local mean: sigma2_hat / denom."""
        return self.sigma2_hat / self.denom


@dataclass
class ScaleProcess:
    """gPoE aggregate of the local models at one resolution."""

    resolution: int
    kernel: KernelSpec
    centers: CenterSet
    locals: list[LocalModel]
    alpha: float = 1.0
    tau2: float = field(default=np.nan)

    # cached arrays for vectorised aggregation
    _mu: np.ndarray = field(default=None, repr=False)
    _sigma2: np.ndarray = field(default=None, repr=False)
    _denom: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.locals) != self.centers.count:
            raise ValueError("one local model per center required")
        self._mu = np.array([m.mu_hat for m in self.locals])
        self._sigma2 = np.array([m.sigma2_hat for m in self.locals])
        self._denom = np.array([m.denom for m in self.locals])
        if np.isnan(self.tau2) and self.locals:
            self.tau2 = self.locals[0].tau2

    @property
    def h(self) -> float:
        return self.kernel.h

    @property
    def mu_values(self) -> np.ndarray:
        return self._mu


def fit_local(values, sites, center, kernel: KernelSpec, tau2: float,
              w_threshold: float = 0.05, sigma2_floor: float = None) -> LocalModel:
    """Fit one penalized local intercept model on the samples inside the kernel window.

    Two-pass estimation: the unpenalized weighted mean first, then the local
    variance around it, then the penalized mean with the sigma^2/tau^2 ridge.
    """
    values = np.asarray(values, dtype=float)
    arr = as_sites(sites)
    if tau2 <= 0:
        raise ValueError("tau2 must be positive")
    c = np.asarray(center, dtype=float).reshape(1, -1)
    d = np.sqrt(sq_dists(c, arr))[0]
    w = kernel_weight(kernel, d)
    mask = w > w_threshold
    n_local = int(mask.sum())
    if n_local == 0:
        raise ValueError("empty kernel window: no sample above the weight threshold")
    if sigma2_floor is None:
        v = float(values.var())
        sigma2_floor = 1e-8 * (v if v > 0 else 1.0)
    w2 = np.where(mask, w * w, 0.0)
    s2 = float(w2.sum())
    s2y = float(w2 @ values)
    mu_tilde = s2y / s2
    if n_local > 1:
        q = float(w2 @ (values - mu_tilde) ** 2)
        sigma2 = q / (n_local - 1)
    else:
        sigma2 = sigma2_floor
    sigma2 = max(sigma2, sigma2_floor)
    denom = s2 + sigma2 / tau2
    mu_hat = s2y / denom
    return LocalModel(center=c[0], mu_hat=mu_hat, sigma2_hat=sigma2, tau2=tau2,
                      kernel=kernel, n_local=n_local, denom=denom)


def local_predictive_variance(m: LocalModel, d: float):
    """Predictive variance at distance d: estimation term + sigma2/w(d)^2."""
    w = kernel_weight(m.kernel, d)
    return m.estimation_variance + m.sigma2_hat / (w * w)


def gpoe_moments(sp: ScaleProcess, sites) -> tuple[np.ndarray, np.ndarray]:
    """gPoE mean and variance of a scale at each site, vectorised.

    Precision of expert c at s is w(d)/sigma2_c with first-power kernel
    weights. Sites whose total precision falls below EPS_PRECISION get the
    no-information result (mean 0, capped variance).
    """
    arr = as_sites(sites)
    means = np.empty(len(arr))
    variances = np.empty(len(arr))
    cs = sp.centers.center_sites
    fallback_var = min(float(sp._sigma2.max()) / EPS_PRECISION, VAR_CAP)
    for i0 in range(0, len(arr), 2048):
        i1 = min(i0 + 2048, len(arr))
        w = kernel_weight(sp.kernel, np.sqrt(sq_dists(arr[i0:i1], cs)))
        prec = w / sp._sigma2[None, :]
        total = prec.sum(axis=1)
        ok = total >= EPS_PRECISION
        safe = np.maximum(total, EPS_PRECISION)
        means[i0:i1] = np.where(ok, (prec @ sp._mu) / safe, 0.0)
        variances[i0:i1] = np.where(ok, 1.0 / safe, fallback_var)
    return means, variances


def gpoe_estimation_variance(sp: ScaleProcess, sites) -> np.ndarray:
    """Aggregated estimation variance of the scale's fitted mean at each site.

    Same precision-weighted form as gpoe_moments but with each expert
    contributing the variance of its estimated mean (sigma2/denom) instead of
    its data-level variance; this is what the resampling draws consume.
    """
    arr = as_sites(sites)
    out = np.empty(len(arr))
    cs = sp.centers.center_sites
    est = sp._sigma2 / sp._denom
    fallback = min(float(est.max()) / EPS_PRECISION, VAR_CAP)
    for i0 in range(0, len(arr), 2048):
        i1 = min(i0 + 2048, len(arr))
        w = kernel_weight(sp.kernel, np.sqrt(sq_dists(arr[i0:i1], cs)))
        total = (w / est[None, :]).sum(axis=1)
        ok = total >= EPS_PRECISION
        out[i0:i1] = np.where(ok, 1.0 / np.maximum(total, EPS_PRECISION), fallback)
    return out


def aggregate_gpoe(sp: ScaleProcess, site) -> tuple[float, float]:
    """gPoE mean and variance of the scale at a single site."""
    m, v = gpoe_moments(sp, np.atleast_2d(np.asarray(site, dtype=float)))
    return float(m[0]), float(v[0])


def fit_scale(residuals, sites, r: int, kernel: KernelSpec, tau2: float,
              config=None, rng: np.random.Generator = None,
              w_threshold: float = None, c_factor: float = None) -> ScaleProcess:
    """Place centers and fit every local model of one resolution.

    Center count comes from the coverage rule, capped at the number of
    distinct sites; centers whose window is empty are dropped with a warning.
    The per-center fits are computed in vectorised blocks but match
    fit_local called standalone, value for value.
    """
    values = np.asarray(residuals, dtype=float)
    arr = as_sites(sites)
    if len(values) != len(arr):
        raise ValueError("residuals and sites must be aligned")
    if rng is None:
        rng = np.random.default_rng(0)
    if w_threshold is None:
        w_threshold = getattr(config, "w_threshold", 0.05)
    if c_factor is None:
        c_factor = getattr(config, "c_factor", 1.5)

    D = bounding_diagonal(arr)
    n_distinct = len(np.unique(arr, axis=0))
    C = min(center_count(D, kernel.h, arr.shape[1], factor=c_factor), n_distinct)
    centers = place_centers(arr, C, rng, resolution=r)
    cs = centers.center_sites

    v = float(values.var())
    sigma2_floor = 1e-8 * (v if v > 0 else 1.0)

    n_c = len(cs)
    s2 = np.empty(n_c)
    s2y = np.empty(n_c)
    qsum = np.empty(n_c)
    n_local = np.empty(n_c, dtype=int)
    for j0 in range(0, n_c, 512):
        j1 = min(j0 + 512, n_c)
        w = kernel_weight(kernel, np.sqrt(sq_dists(arr, cs[j0:j1])))
        w2 = np.where(w > w_threshold, w * w, 0.0)
        n_local[j0:j1] = (w2 > 0.0).sum(axis=0)
        s2[j0:j1] = w2.sum(axis=0)
        s2y[j0:j1] = values @ w2
        mu_tilde = s2y[j0:j1] / np.maximum(s2[j0:j1], 1e-300)
        qsum[j0:j1] = ((values[:, None] - mu_tilde[None, :]) ** 2 * w2).sum(axis=0)

    keep = n_local >= 1
    if not np.any(keep):
        raise ValueError("bandwidth too small for data density: every kernel window is empty")
    if not np.all(keep):
        log.warning("dropping %d of %d centers with empty kernel windows at h=%g",
                    int((~keep).sum()), n_c, kernel.h)
        cs = cs[keep]
        s2, s2y, qsum, n_local = s2[keep], s2y[keep], qsum[keep], n_local[keep]
        centers = CenterSet(cs, resolution=r)

    sigma2 = np.where(n_local > 1, qsum / np.maximum(n_local - 1, 1), sigma2_floor)
    sigma2 = np.maximum(sigma2, sigma2_floor)
    denom = s2 + sigma2 / tau2
    mu = s2y / denom

    locals_ = [
        LocalModel(center=cs[j], mu_hat=float(mu[j]), sigma2_hat=float(sigma2[j]),
                   tau2=tau2, kernel=kernel, n_local=int(n_local[j]), denom=float(denom[j]))
        for j in range(len(cs))
    ]
    return ScaleProcess(resolution=r, kernel=kernel, centers=centers,
                        locals=locals_, alpha=1.0, tau2=tau2)
