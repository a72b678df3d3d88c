"""Regularization-induced confounding in the Gaussian linear model.

The model is ``Y = tau z + beta' x + eps`` with ``eps ~ N(0, sigma^2)`` and a
treatment that follows ``z = gamma' x + nu``. Coefficients
``theta = (tau, beta)`` get a Gaussian prior with precision ``M`` (relative to
the noise variance), so the posterior mean is the ridge-type estimator
``(M + Xt' Xt)^-1 Xt' Y`` with ``Xt = (z X)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ValidationError

COND_LIMIT = 1e12


class SingularSystemError(ArithmeticError):
    """A linear system is numerically singular; ``cond`` holds its 2-norm condition number."""

    def __init__(self, what: str, cond: float):
        super().__init__(f"{what} is numerically singular (condition number {cond:.3g})")
        self.cond = cond


class DegenerateOverlapError(SingularSystemError):
    """``z`` lies in the column space of X, so ``(z, z_hat)`` is rank deficient."""


def _solve(A: np.ndarray, B: np.ndarray, what: str, error=SingularSystemError) -> np.ndarray:
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise error(what, cond)
    return np.linalg.solve(A, B)


@dataclass(frozen=True, eq=False)
class LinearRicProblem:
    """One instance of the linear RIC setting.

    Parameters
    ----------
    X : (n, p) control matrix.
    z : (n,) treatment vector.
    beta, gamma : (p,) prognostic and selection coefficients.
    tau : treatment effect.
    sigma : outcome noise sd.
    sigma_nu : sd of the selection noise ``nu``; when None, ``Var(nu)`` is
        estimated by the sample variance of ``z - X gamma``.
    M : (p+1, p+1) prior precision for ``(tau, beta)``; defaults to
        ``blockdiag(0, I_p)`` (flat on tau, unit ridge on beta).
    """

    X: np.ndarray
    z: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    tau: float
    sigma: float = 1.0
    sigma_nu: float | None = None
    M: np.ndarray | None = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, float))
        object.__setattr__(self, "X", X)
        n, p = X.shape
        for name, size in (("z", n), ("beta", p), ("gamma", p)):
            v = np.asarray(getattr(self, name), float).ravel()
            if v.size != size:
                raise ValidationError(f"{name} has length {v.size}, expected {size}")
            object.__setattr__(self, name, v)
        M = default_precision(p) if self.M is None else np.asarray(self.M, float)
        if M.shape != (p + 1, p + 1):
            raise ValidationError(f"M must be {(p + 1, p + 1)}, got {M.shape}")
        if not np.allclose(M, M.T):
            raise ValidationError("M must be symmetric")
        if np.linalg.eigvalsh(M).min() < -1e-10 * max(1.0, np.abs(M).max()):
            raise ValidationError("M must be positive semidefinite")
        object.__setattr__(self, "M", M)
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if self.sigma_nu is not None and not self.sigma_nu > 0:
            raise ValidationError("sigma_nu must be positive")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def design(self) -> np.ndarray:
        """``Xt = (z X)``."""
        return np.column_stack([self.z, self.X])

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[self.tau], self.beta])

    @property
    def mean(self) -> np.ndarray:
        """``E(Y | x, z)``."""
        return self.tau * self.z + self.X @ self.beta

    def var_nu(self) -> float:
        if self.sigma_nu is not None:
            return float(self.sigma_nu ** 2)
        return float(np.var(self.z - self.X @ self.gamma, ddof=1))

    def ols_z_hat(self) -> np.ndarray:
        """Least-squares fit of z on X."""
        g, *_ = np.linalg.lstsq(self.X, self.z, rcond=None)
        return self.X @ g


def default_precision(p: int, k: int = 1) -> np.ndarray:
    """``blockdiag(0_k, I_p)``: flat prior on the first k coefficients."""
    return np.diag(np.r_[np.zeros(k), np.ones(p)])


def random_problem(n: int, p: int, rng: np.random.Generator, tau: float = 1.0,
                   sigma: float = 1.0, sigma_nu: float = 0.5, targeted: bool = True,
                   ) -> LinearRicProblem:
    """Confounded instance with Gaussian controls and ``z = gamma' x + nu``.

    With ``targeted`` the selection coefficients point along ``beta``.
    """
    X = rng.standard_normal((n, p))
    beta = rng.standard_normal(p)
    gamma = 0.5 * beta / np.linalg.norm(beta) if targeted else rng.standard_normal(p) / np.sqrt(p)
    z = X @ gamma + sigma_nu * rng.standard_normal(n)
    return LinearRicProblem(X, z, beta, gamma, tau, sigma, sigma_nu)


def posterior_mean_operator(design: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``(M + D'D)^-1 D'``; maps outcome vectors to posterior means."""
    return _solve(M + design.T @ design, design.T, "M + X'X")


def ridge_bias(problem: LinearRicProblem) -> np.ndarray:
    """Bias ``-(M + Xt'Xt)^-1 M theta`` of the posterior mean; entry 0 is bias(tau_hat)."""
    D = problem.design
    return -_solve(problem.M + D.T @ D, problem.M @ problem.theta, "M + X'X")


def displayed_tau_bias(problem: LinearRicProblem) -> float:
    """bias(tau_hat) for ``M = blockdiag(0, I)`` written through the projection of X on z:
    ``((z'z)^-1 z'X) (I + X'(X - X_z))^-1 beta``.

    The Schur complement of the flat tau block gives a positive leading sign:
    shrinking beta pushes the confounded part of the signal onto z.
    """
    z, X = problem.z, problem.X
    zx = (z @ X) / (z @ z)
    Xz = np.outer(z, zx)
    inner = _solve(np.eye(problem.p) + X.T @ (X - Xz), problem.beta, "I + X'(X - X_z)")
    return float(zx @ inner)


@dataclass(frozen=True)
class DebiasResult:
    """Augmented regression on ``(z, z_hat, X)`` with flat priors on both treatment columns.

    ``coef`` is ``(zt'zt)^-1 zt'X`` for ``zt = (z z_hat)``; ``first_row`` is its
    z row, the quantity that multiplies the tau bias. ``bias`` covers
    ``(tau, z_hat coefficient, beta)``.
    """

    coef: np.ndarray
    first_row: np.ndarray
    bias: np.ndarray

    @property
    def tau_bias(self) -> float:
        return float(self.bias[0])


def augmented_design(problem: LinearRicProblem, z_hat: np.ndarray):
    """Design ``(z z_hat X)``, its prior precision and true coefficients."""
    D = np.column_stack([problem.z, z_hat, problem.X])
    M = np.zeros((problem.p + 2, problem.p + 2))
    M[2:, 2:] = problem.M[1:, 1:]
    theta = np.concatenate([[problem.tau, 0.0], problem.beta])
    return D, M, theta


def debiased_design(problem: LinearRicProblem, z_hat: np.ndarray | None = None) -> DebiasResult:
    """Bias of the ridge estimator after adding ``z_hat`` as an unpenalized regressor.

    ``z_hat`` defaults to the least-squares fit of z on X, for which the z row
    of ``(zt'zt)^-1 zt'X`` vanishes and tau is estimated without bias.
    """
    z_hat = problem.ols_z_hat() if z_hat is None else np.asarray(z_hat, float)
    if z_hat.shape != problem.z.shape:
        raise ValidationError("z_hat must have one entry per row")
    zt = np.column_stack([problem.z, z_hat])
    coef = _solve(zt.T @ zt, zt.T @ problem.X, "(z z_hat)'(z z_hat)", DegenerateOverlapError)
    D, M, theta = augmented_design(problem, z_hat)
    bias = -_solve(M + D.T @ D, M @ theta, "M + X'X")
    return DebiasResult(coef, coef[0], bias)


@dataclass(frozen=True)
class BShift:
    """Reparametrization of the mean for a shift ``b``: coefficients
    ``(tau + b, beta - b gamma)`` and the extra residual variance ``b^2 Var(nu)``."""

    b: float
    tau_shift: float
    beta_shift: np.ndarray
    extra_resid_var: float
    discrepancy: float


def b_shift_decomposition(problem: LinearRicProblem, b: float) -> BShift:
    """Evaluate ``tau z + beta'x = (tau+b) z + (beta - b gamma)'x - b (z - gamma'x)``
    on the data; ``discrepancy`` is the max absolute difference of the two sides."""
    b = float(b)
    X, z, g = problem.X, problem.z, problem.gamma
    tau_b = problem.tau + b
    beta_b = problem.beta - b * g
    rhs = tau_b * z + X @ beta_b - b * (z - X @ g)
    gap = float(np.max(np.abs(problem.mean - rhs)))
    return BShift(b, tau_b, beta_b, b * b * problem.var_nu(), gap)


@dataclass(frozen=True)
class MonteCarloBias:
    """Average estimation error of the posterior mean over simulated outcomes."""

    mean: np.ndarray
    se: np.ndarray
    draws: int

    def within(self, analytic: np.ndarray, k: float = 3.0) -> np.ndarray:
        return np.abs(self.mean - analytic) <= k * self.se


def monte_carlo_bias(design: np.ndarray, M: np.ndarray, theta: np.ndarray, sigma: float,
                     draws: int, rng: np.random.Generator, batch: int = 10_000
                     ) -> MonteCarloBias:
    """Simulate ``Y = D theta + sigma eps`` ``draws`` times and average ``theta_hat - theta``."""
    if draws < 2:
        raise ValidationError("need at least 2 draws")
    H = posterior_mean_operator(design, M)
    mean = design @ theta
    total = np.zeros(theta.size)
    total_sq = np.zeros(theta.size)
    done = 0
    while done < draws:
        m = min(batch, draws - done)
        Y = mean[:, None] + sigma * rng.standard_normal((design.shape[0], m))
        err = H @ Y - theta[:, None]
        total += err.sum(axis=1)
        total_sq += (err ** 2).sum(axis=1)
        done += m
    avg = total / draws
    var = (total_sq - draws * avg ** 2) / (draws - 1)
    return MonteCarloBias(avg, np.sqrt(np.maximum(var, 0.0) / draws), draws)


def ridge_mc_bias(problem: LinearRicProblem, draws: int, rng: np.random.Generator) -> MonteCarloBias:
    return monte_carlo_bias(problem.design, problem.M, problem.theta, problem.sigma, draws, rng)


def debiased_mc_bias(problem: LinearRicProblem, draws: int, rng: np.random.Generator,
                     z_hat: np.ndarray | None = None) -> MonteCarloBias:
    z_hat = problem.ols_z_hat() if z_hat is None else z_hat
    D, M, theta = augmented_design(problem, z_hat)
    return monte_carlo_bias(D, M, theta, problem.sigma, draws, rng)


def ric_report(problem: LinearRicProblem, draws: int, rng: np.random.Generator) -> dict:
    """Analytic and Monte-Carlo tau bias with and without the z_hat column."""
    ana = ridge_bias(problem)
    mc = ridge_mc_bias(problem, draws, rng)
    deb = debiased_design(problem)
    mc_deb = debiased_mc_bias(problem, draws, rng)
    return {
        "n": problem.n, "p": problem.p, "tau": problem.tau, "draws": draws,
        "ridge": {"analytic_tau_bias": float(ana[0]), "mc_tau_bias": float(mc.mean[0]),
                  "mc_se": float(mc.se[0]), "within_3se": bool(mc.within(ana)[0])},
        "debiased": {"analytic_tau_bias": deb.tau_bias,
                     "max_abs_first_row": float(np.max(np.abs(deb.first_row))),
                     "mc_tau_bias": float(mc_deb.mean[0]), "mc_se": float(mc_deb.se[0])},
    }
