"""Two-sample Kolmogorov-Smirnov test and univariate Gaussian mixtures fitted by EM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WEIGHT_FLOOR = 1e-4
MAX_ITER = 500
TOL = 1e-6

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KSResult:
    d_value: float
    p_value: float
    n1: int
    n2: int


def kolmogorov_sf(lam: float) -> float:
    """Asymptotic Kolmogorov survival function Q_KS(lam), clamped to [0, 1]."""
    if lam < 1e-3:
        # 1 - Q(1e-3) is far below double precision; the alternating series
        # would need millions of terms to settle here.
        return 1.0
    total = 0.0
    j = 1
    sign = 1.0
    while True:
        term = math.exp(-2.0 * j * j * lam * lam)
        total += sign * term
        if term < 1e-12:
            break
        sign = -sign
        j += 1
    return min(1.0, max(0.0, 2.0 * total))


def ks_two_sample(sample_a, sample_b) -> KSResult:
    """Two-sided two-sample KS test.

    The statistic is the exact supremum distance between the two empirical
    CDFs, evaluated at every pooled value. The p-value uses the asymptotic
    Kolmogorov distribution with the small-sample correction
    ``lam = (sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D``.
    """
    a = np.sort(np.asarray(sample_a, dtype=float).ravel())
    b = np.sort(np.asarray(sample_b, dtype=float).ravel())
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("KS test needs two non-empty samples")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("KS samples must be finite")

    pooled = np.concatenate([a, b])
    # integer counts keep the statistic exact up to a single final rounding
    ca = np.searchsorted(a, pooled, side="right").astype(np.int64)
    cb = np.searchsorted(b, pooled, side="right").astype(np.int64)
    num = int(np.abs(ca * n2 - cb * n1).max())
    d = num / (n1 * n2)

    ne = n1 * n2 / (n1 + n2)
    sq = math.sqrt(ne)
    p = kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d)
    return KSResult(d_value=d, p_value=p, n1=n1, n2=n2)


@dataclass
class GaussianMixture1D:
    """Fitted univariate mixture with components sorted by ascending mean."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood_trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        order = np.argsort(means, kind="stable")
        self.means = means[order]
        self.weights = np.asarray(self.weights, dtype=float)[order]
        self.variances = np.asarray(self.variances, dtype=float)[order]

    @property
    def n_components(self) -> int:
        return len(self.means)

    @property
    def components(self) -> list[tuple[float, float, float]]:
        return [(float(w), float(m), float(v)) for w, m, v in zip(self.weights, self.means, self.variances)]

    def log_weighted_density(self, x) -> np.ndarray:
        """log(w_c * N(x; mu_c, var_c)) with shape (len(x), n_components)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
        return _log_joint(x, self.weights, self.means, self.variances)

    def predict_proba(self, x) -> np.ndarray:
        lj = self.log_weighted_density(x)
        return np.exp(lj - _logsumexp(lj)[:, None])

    def predict(self, x) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lower-mean component on ties
        return np.argmax(self.log_weighted_density(x), axis=1)


def _log_joint(x, weights, means, variances):
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw - 0.5 * (_LOG_2PI + np.log(variances) + (x - means) ** 2 / variances)


def _logsumexp(a):
    amax = a.max(axis=1)
    return amax + np.log(np.exp(a - amax[:, None]).sum(axis=1))


def _floored_weights(nk: np.ndarray, floor: float) -> np.ndarray:
    """Maximise sum(nk * log w) subject to sum(w) = 1 and w >= floor.

    Components whose unconstrained share falls under the floor are pinned to
    it and the remaining mass is shared in proportion to nk.
    """
    k = len(nk)
    pinned = np.zeros(k, dtype=bool)
    while True:
        free_mass = 1.0 - floor * pinned.sum()
        total = nk[~pinned].sum()
        w = np.full(k, floor)
        if total > 0:
            w[~pinned] = free_mass * nk[~pinned] / total
        else:
            w[~pinned] = free_mass / (~pinned).sum()
        newly = (~pinned) & (w < floor)
        if not newly.any():
            return w
        pinned |= newly


def fit_gmm(data, n_components: int, seed: int = 0) -> GaussianMixture1D:
    """Fit a univariate Gaussian mixture by expectation-maximisation.

    Means start at the ``(c + 0.5) / n_components`` data quantiles, weights
    are equal and every variance starts at ``var(data) / n_components``.
    Iteration stops once the total log-likelihood improves by less than
    ``1e-6`` or after 500 iterations. Variances never drop below
    ``max(1e-6, 1e-3 * var(data))`` and weights never below ``1e-4``, so the
    component count survives degenerate fits.

    ``seed`` only drives a tiny deterministic jitter that separates initial
    means that coincide (heavily tied data); otherwise identical components
    could never split.
    """
    x = np.asarray(data, dtype=float).ravel()
    k = int(n_components)
    if k < 1:
        raise ValueError("n_components must be positive")
    if x.size < k:
        raise ValueError(f"need at least {k} data points, got {x.size}")
    if not np.isfinite(x).all():
        raise ValueError("data must be finite")

    n = x.size
    sample_var = float(x.var())
    var_floor = max(1e-6, 1e-3 * sample_var)

    if sample_var == 0.0:
        weights = np.full(k, WEIGHT_FLOOR)
        weights[0] = 1.0 - WEIGHT_FLOOR * (k - 1)
        means = np.full(k, x[0])
        variances = np.full(k, var_floor)
        ll = float(_logsumexp(_log_joint(x[:, None], weights, means, variances)).sum())
        return GaussianMixture1D(weights, means, variances, [ll], n_iter=0, converged=True)

    means = np.quantile(x, (np.arange(k) + 0.5) / k)
    if np.unique(means).size < k:
        rng = np.random.default_rng(seed)
        means = means + rng.normal(0.0, 1e-3 * math.sqrt(sample_var), size=k)
    weights = np.full(k, 1.0 / k)
    variances = np.full(k, max(sample_var / k, var_floor))

    xc = x[:, None]
    trace = []
    converged = False
    it = 0
    lj = _log_joint(xc, weights, means, variances)
    norm = _logsumexp(lj)
    trace.append(float(norm.sum()))
    for it in range(1, MAX_ITER + 1):
        resp = np.exp(lj - norm[:, None])
        nk = resp.sum(axis=0)

        live = nk > 1e-300
        new_means = means.copy()
        new_vars = variances.copy()
        new_means[live] = (resp[:, live] * xc).sum(axis=0) / nk[live]
        sq = (xc - new_means) ** 2
        new_vars[live] = (resp[:, live] * sq[:, live]).sum(axis=0) / nk[live]
        means = new_means
        variances = np.maximum(new_vars, var_floor)
        weights = _floored_weights(nk / n, WEIGHT_FLOOR)

        lj = _log_joint(xc, weights, means, variances)
        norm = _logsumexp(lj)
        ll = float(norm.sum())
        improvement = ll - trace[-1]
        trace.append(ll)
        if improvement < TOL:
            converged = True
            break

    return GaussianMixture1D(
        weights=weights,
        means=means,
        variances=variances,
        log_likelihood_trace=trace,
        n_iter=it,
        converged=converged,
    )


def responsibility(gmm: GaussianMixture1D, x: float) -> int:
    """Index of the component with the largest ``w * N(x)``; ties go to the lower mean."""
    return int(gmm.predict([x])[0])
