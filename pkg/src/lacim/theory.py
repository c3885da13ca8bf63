"""Numerical checks of the theoretical side-conditions.

Three families of checks, all on closed-form or simulator-derived objects:

* diversity / rank: the stacked differences of exponential-family natural
  parameters across environments must have full column rank, and the
  environment count must exceed the sufficient-statistic dimension;
* Stein kernels: the kernel of a 1-D density, its nonnegativity, and the
  identity E[tau(X)] = Var(X);
* the cross-environment prediction-gap bound for Gaussian posterior pairs,
  |E_1 g(S) - E_2 g(S)| <= max|g'| * max|pi'| * Var_1(S), where pi is the
  posterior density ratio.

Everything here is a pure function of its inputs; quadrature uses a
trapezoid rule on [mu - 8 sigma, mu + 8 sigma] with 4001 points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from lacim.numeric import LOG_STD_HI, LOG_STD_LO

QUAD_POINTS = 4001
QUAD_SIGMAS = 8.0
RANK_RTOL = 1e-8  # sigma_min > RANK_RTOL * sigma_max declares full rank
DENSITY_RELIABLE_MIN = 1e-12


@dataclass
class TheoryReport:
    name: str
    passed: bool
    margin: float
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "check": self.name,
            "pass": bool(self.passed),
            "margin": float(self.margin),
            "details": self.details,
        }


@dataclass
class ExpFamSpec:
    """Conditionally factorized exponential family for one latent block.

    gamma(c, d) returns the natural-parameter matrix of shape (k_t, q_t)
    for confounder value c under environment base value d.  suff_stats maps
    a latent vector t (q_t,) to the (k_t, q_t) matrix of statistics.  base
    and normalizer document the density's remaining pieces.
    """

    q_t: int
    k_t: int
    gamma: Callable[[np.ndarray, np.ndarray], np.ndarray]
    suff_stats: Callable[[np.ndarray], np.ndarray]
    base: Optional[Callable] = None
    normalizer: Optional[Callable] = None

    def __post_init__(self):
        if self.q_t < 1 or self.k_t < 1:
            raise ValueError("q_t and k_t must be positive")


def gaussian_suff_stats(t: np.ndarray) -> np.ndarray:
    """(t, t^2) rows for a diagonal-Gaussian family (k = 2)."""
    t = np.asarray(t, dtype=np.float64)
    return np.stack([t, np.square(t)], axis=0)


def gaussian_expfam(a_mu: np.ndarray, a_sig: np.ndarray) -> ExpFamSpec:
    """Family of N(A_mu c, diag(exp(A_sig c))^2) conditionals.

    Natural parameters per dimension: gamma_1 = mu / sigma^2 and
    gamma_2 = -1 / (2 sigma^2), with log sigma clipped to the package-wide
    range before exponentiation.
    """
    a_mu = np.asarray(a_mu, dtype=np.float64)
    a_sig = np.asarray(a_sig, dtype=np.float64)
    if a_mu.shape != a_sig.shape:
        raise ValueError("a_mu and a_sig must have the same shape")
    q_t = a_mu.shape[1]

    def gamma(c: np.ndarray, d: np.ndarray) -> np.ndarray:
        del d  # the confounder value fully determines the conditional
        c = np.asarray(c, dtype=np.float64).ravel()
        mu = c @ a_mu
        sigma = np.exp(np.clip(c @ a_sig, LOG_STD_LO, LOG_STD_HI))
        var = np.square(sigma)
        return np.stack([mu / var, -0.5 / var], axis=0)

    return ExpFamSpec(q_t=q_t, k_t=2, gamma=gamma, suff_stats=gaussian_suff_stats)


def scm_expfam_specs(scm) -> tuple[ExpFamSpec, ExpFamSpec]:
    """The simulator's (s, z) conditional as two exponential-family blocks."""
    q_s = scm.dims.q_s
    spec_s = gaussian_expfam(scm.a_mu[:, :q_s], scm.a_sig[:, :q_s])
    spec_z = gaussian_expfam(scm.a_mu[:, q_s:], scm.a_sig[:, q_s:])
    return spec_s, spec_z


def required_environments(spec_s: ExpFamSpec, spec_z: ExpFamSpec) -> int:
    """Smallest admissible environment count for the rank condition."""
    return max(spec_s.q_t * spec_s.k_t, spec_z.q_t * spec_z.k_t) + 1


def _stacked_differences(
    spec: ExpFamSpec, env_values: list[np.ndarray], c_values: list[np.ndarray]
) -> np.ndarray:
    base = spec.gamma(c_values[0], env_values[0]).ravel()
    rows = []
    for d in env_values:
        for c in c_values:
            rows.append(spec.gamma(c, d).ravel() - base)
    return np.asarray(rows)


def check_diversity(
    spec_s: ExpFamSpec,
    spec_z: ExpFamSpec,
    env_values: list[np.ndarray],
    c_values: list[np.ndarray],
    mixture: Optional[np.ndarray] = None,
) -> TheoryReport:
    """Rank check of stacked natural-parameter differences plus the
    environment-count rule.

    For each latent block the matrix [gamma(c_r, d^e) - gamma(c_1, d^1)]
    over all (e, r) pairs must have full column rank q_t * k_t.  When a
    discrete confounder mixture [P^e(C = c_r)] is supplied its rank is
    reported as well.
    """
    m = len(env_values)
    if m < 2:
        raise ValueError("need at least two environments")
    if not c_values:
        raise ValueError("need at least one confounder value")

    details: dict = {"m": m, "n_c_values": len(c_values)}
    margins = []
    passed = True
    for label, spec in (("s", spec_s), ("z", spec_z)):
        mat = _stacked_differences(spec, env_values, c_values)
        svals = np.linalg.svd(mat, compute_uv=False)
        smax = float(svals[0]) if svals.size else 0.0
        wanted = spec.q_t * spec.k_t
        smin = float(svals[wanted - 1]) if svals.size >= wanted else 0.0
        ratio = smin / smax if smax > 0 else 0.0
        full = ratio > RANK_RTOL
        rank = int(np.sum(svals > RANK_RTOL * smax)) if smax > 0 else 0
        details[label] = {
            "columns": wanted,
            "rank": rank,
            "sigma_min": smin,
            "sigma_max": smax,
            "full_rank": full,
        }
        margins.append(ratio)
        passed = passed and full

    need = required_environments(spec_s, spec_z)
    details["required_m"] = need
    details["env_count_ok"] = m >= need
    passed = passed and m >= need

    if mixture is not None:
        mixture = np.asarray(mixture, dtype=np.float64)
        if mixture.shape[0] != m:
            raise ValueError("mixture matrix must have one row per environment")
        svals = np.linalg.svd(mixture, compute_uv=False)
        details["mixture_rank"] = int(np.sum(svals > RANK_RTOL * svals[0]))

    return TheoryReport(
        name="diversity",
        passed=passed,
        margin=float(min(margins)),
        details=details,
    )


@dataclass
class SteinResult:
    grid: np.ndarray
    tau: np.ndarray  # kernel values on the grid
    reliable: np.ndarray  # False where the density is below the floor
    mean: float
    variance: float
    expected_tau: float  # E[tau(X)], which should equal the variance


def stein_kernel(grid: np.ndarray, density: np.ndarray, x: Optional[np.ndarray] = None):
    """Stein kernel of a 1-D density given on an increasing grid.

    tau(x) = (1 / p(x)) * integral_{-inf}^{x} (E[X] - t) p(t) dt, by
    trapezoidal quadrature after normalizing p.  Points with p below
    1e-12 are flagged unreliable (the division is ill-posed there).
    E[tau(X)] integrates the numerator directly, avoiding the division.
    If x is given, returns (tau(x), reliable(x)) interpolated from the grid.
    """
    grid = np.asarray(grid, dtype=np.float64)
    density = np.asarray(density, dtype=np.float64)
    if grid.ndim != 1 or grid.shape != density.shape:
        raise ValueError("grid and density must be equal-length 1-D arrays")
    if grid.size < 3:
        raise ValueError("grid too short")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    if np.any(density < 0):
        raise ValueError("density must be nonnegative")
    total = trapezoid(density, grid)
    if total <= 0:
        raise ValueError("density integrates to zero")
    p = density / total

    mean = float(trapezoid(grid * p, grid))
    variance = float(trapezoid(np.square(grid - mean) * p, grid))
    numerator = cumulative_trapezoid((mean - grid) * p, grid, initial=0.0)
    reliable = p >= DENSITY_RELIABLE_MIN
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(reliable, numerator / np.where(reliable, p, 1.0), np.nan)
    expected_tau = float(trapezoid(numerator, grid))

    result = SteinResult(
        grid=grid,
        tau=tau,
        reliable=reliable,
        mean=mean,
        variance=variance,
        expected_tau=expected_tau,
    )
    if x is None:
        return result
    x = np.asarray(x, dtype=np.float64)
    tau_x = np.interp(x, grid, np.where(reliable, tau, np.nan))
    ok = np.interp(x, grid, reliable.astype(np.float64)) >= 1.0
    return result, tau_x, ok


@dataclass
class GaussianPosteriorPair:
    """Two Gaussian posteriors p^{e1}(s|x), p^{e2}(s|x) and a test function g."""

    mu1: float
    sigma1: float
    mu2: float
    sigma2: float
    g: Callable[[np.ndarray], np.ndarray]
    g_deriv: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError("standard deviations must be positive")


@dataclass
class OodBoundResult:
    lhs: float
    rhs: float
    slack: float
    applicable: bool
    holds: Optional[bool]

    def to_json(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack": self.slack,
            "applicable": self.applicable,
            "holds": self.holds,
        }


def _gauss_pdf(s: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    z = (s - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * np.sqrt(2.0 * np.pi))


def ood_bound_check(pair: GaussianPosteriorPair, tol: float = 1e-6) -> OodBoundResult:
    """Check |E_1 g - E_2 g| <= max|g'| * max|pi'| * sigma1^2 by quadrature.

    pi(s) = p2(s) / p1(s).  The ratio is bounded only when sigma2 < sigma1
    (or the two posteriors coincide); other pairs are reported inapplicable
    rather than failed, since the bound's premise does not hold for them.
    """
    same = pair.mu1 == pair.mu2 and pair.sigma1 == pair.sigma2
    if pair.sigma2 >= pair.sigma1 and not same:
        return OodBoundResult(
            lhs=float("nan"), rhs=float("nan"), slack=float("nan"),
            applicable=False, holds=None,
        )

    lo = min(pair.mu1, pair.mu2) - QUAD_SIGMAS * max(pair.sigma1, pair.sigma2)
    hi = max(pair.mu1, pair.mu2) + QUAD_SIGMAS * max(pair.sigma1, pair.sigma2)
    s = np.linspace(lo, hi, QUAD_POINTS)
    p1 = _gauss_pdf(s, pair.mu1, pair.sigma1)
    p2 = _gauss_pdf(s, pair.mu2, pair.sigma2)
    gs = pair.g(s)

    lhs = float(abs(trapezoid(gs * p1, s) - trapezoid(gs * p2, s)))

    # pi' computed analytically: pi * ((s-mu1)/sigma1^2 - (s-mu2)/sigma2^2)
    log_pi = np.log(pair.sigma1 / pair.sigma2) - 0.5 * np.square(
        (s - pair.mu2) / pair.sigma2
    ) + 0.5 * np.square((s - pair.mu1) / pair.sigma1)
    with np.errstate(over="ignore"):
        pi = np.exp(log_pi)
    pi_deriv = pi * ((s - pair.mu1) / pair.sigma1 ** 2 - (s - pair.mu2) / pair.sigma2 ** 2)
    if not np.all(np.isfinite(pi_deriv)):
        return OodBoundResult(
            lhs=float("nan"), rhs=float("nan"), slack=float("nan"),
            applicable=False, holds=None,
        )
    rhs = float(
        np.max(np.abs(pair.g_deriv(s))) * np.max(np.abs(pi_deriv)) * pair.sigma1 ** 2
    )
    slack = rhs - lhs
    return OodBoundResult(
        lhs=lhs, rhs=rhs, slack=slack, applicable=True, holds=bool(lhs <= rhs + tol)
    )


def check_nonempty_open_set(
    points: np.ndarray, min_count: int = 100, threshold: float = 1e-8
) -> TheoryReport:
    """Proxy for the interior-point assumption on sufficient statistics.

    The statistic samples must not be confined to a lower-dimensional
    affine subspace: every eigenvalue of their covariance must exceed
    threshold * largest eigenvalue.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be 2-D (samples x statistics)")
    if points.shape[0] < min_count:
        raise ValueError(f"need at least {min_count} points, got {points.shape[0]}")
    cov = np.cov(points, rowvar=False)
    cov = np.atleast_2d(cov)
    eigs = np.linalg.eigvalsh(cov)
    largest = float(eigs[-1])
    smallest = float(eigs[0])
    ratio = smallest / largest if largest > 0 else 0.0
    passed = ratio > threshold
    return TheoryReport(
        name="nonempty_open_set",
        passed=passed,
        margin=ratio,
        details={
            "eigenvalues": [float(v) for v in eigs],
            "threshold": threshold,
            "n_points": int(points.shape[0]),
        },
    )
