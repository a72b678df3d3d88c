"""Synthetic data-generating processes with ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .data import ColumnKind, Dataset, ValidationError

PI_CLAMP = (0.005, 0.995)
G_LEVELS = {"1": 2.0, "2": -1.0, "3": -4.0}


@dataclass(frozen=True, eq=False)
class DgpSample:
    """One synthetic dataset plus the true tau(x), mu(x) and pi(x)."""

    X: pd.DataFrame
    kinds: dict[str, ColumnKind]
    z: np.ndarray
    y: np.ndarray
    true_tau: np.ndarray
    true_mu: np.ndarray
    true_pi: np.ndarray
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def ate(self) -> float:
        """Sample average treatment effect."""
        return float(self.true_tau.mean())

    def dataset(self, pi_hat: np.ndarray | None = None) -> Dataset:
        return Dataset(self.y, self.z, self.X, dict(self.kinds), pi_hat)

    def truth_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"tau": self.true_tau, "mu": self.true_mu, "pi": self.true_pi})


def example1_mu(x1, x2, width: float = 0.05):
    """Stand-in prognostic shelf: ranges over (-3, 3) with its step along x1 = x2."""
    return 6.0 * ndtr((np.asarray(x1) - np.asarray(x2)) / width) - 3.0


def example1_pi(mu, x1, x2):
    return 0.8 * ndtr(mu / (0.1 * (2.0 - x1 - x2) + 0.25)) + 0.025 * (x1 + x2) + 0.05


def gen_example1(n: int = 250, seed: int = 0, tau: float = -1.0,
                 width: float = 0.05) -> DgpSample:
    """Two uniform covariates, targeted selection on a sharp prognostic shelf,
    homogeneous effect ``tau`` (outcome ``y = mu + tau z + eps``)."""
    if n < 2:
        raise ValidationError("n must be >= 2")
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(size=n)
    x2 = rng.uniform(size=n)
    mu = example1_mu(x1, x2, width)
    pi = example1_pi(mu, x1, x2)
    z = (rng.uniform(size=n) < pi).astype(np.int64)
    eps = rng.standard_normal(n)
    true_tau = np.full(n, float(tau))
    y = mu + true_tau * z + eps
    X = pd.DataFrame({"x1": x1, "x2": x2})
    kinds = {"x1": ColumnKind.continuous(), "x2": ColumnKind.continuous()}
    return DgpSample(X, kinds, z, y, true_tau, mu, pi, seed,
                     {"dgp": "example1", "n": n, "tau": tau, "width": width})


def g(levels) -> np.ndarray:
    return np.array([G_LEVELS[str(v)] for v in levels])


def sim_mu(x1, x3, cat, surface: str):
    if surface == "linear":
        return 1.0 + g(cat) + x1 * x3
    if surface == "nonlinear":
        return -6.0 + g(cat) + 6.0 * np.abs(x3 - 1.0)
    raise ValidationError(f"unknown surface {surface!r}")


def sim_tau(x2, binary, effect: str):
    n = np.shape(x2)[0]
    if effect == "homogeneous":
        return np.full(n, 3.0)
    if effect == "heterogeneous":
        return 1.0 + 2.0 * x2 * binary
    if effect == "none":
        return np.zeros(n)
    raise ValidationError(f"unknown effect {effect!r}")


def gen_sim_study(n: int = 250, effect: str = "heterogeneous", surface: str = "nonlinear",
                  seed: int = 0) -> DgpSample:
    """Five covariates: x1..x3 standard normal, x4 binary, x5 three-level
    categorical with labels "1", "2", "3".

    The three-level covariate enters the prognostic function through ``g``
    and the binary covariate moderates the heterogeneous effect
    ``1 + 2 x2 x4``. ``effect="none"`` gives a zero-effect variant.
    """
    if n < 2:
        raise ValidationError("n must be >= 2")
    rng = np.random.default_rng(seed)
    x1, x2, x3 = rng.standard_normal((3, n))
    x4 = rng.binomial(1, 0.5, size=n).astype(float)
    x5 = rng.choice(np.array(["1", "2", "3"], dtype=object), size=n)
    mu = sim_mu(x1, x3, x5, surface)
    tau = sim_tau(x2, x4, effect)
    s = float(np.std(mu, ddof=1))
    u = rng.uniform(size=n)
    pi = 0.8 * ndtr(3.0 * mu / s - 0.5 * x1) + 0.05 + u / 10.0
    pi = np.clip(pi, *PI_CLAMP)
    z = (rng.uniform(size=n) < pi).astype(np.int64)
    eps = rng.standard_normal(n)
    y = mu + tau * z + eps
    X = pd.DataFrame({"x1": x1, "x2": x2, "x3": x3, "x4": x4, "x5": x5})
    kinds = {"x1": ColumnKind.continuous(), "x2": ColumnKind.continuous(),
             "x3": ColumnKind.continuous(), "x4": ColumnKind.binary(),
             "x5": ColumnKind.categorical(["1", "2", "3"])}
    return DgpSample(X, kinds, z, y, tau, mu, pi, seed,
                     {"dgp": "sim61", "n": n, "effect": effect, "surface": surface})


def generate(spec: dict, seed: int) -> DgpSample:
    """Dispatch on ``spec["dgp"]`` (``example1`` or ``sim61``)."""
    kind = spec.get("dgp", "sim61")
    if kind == "example1":
        return gen_example1(int(spec.get("n", 250)), seed, float(spec.get("tau", -1.0)),
                            float(spec.get("width", 0.05)))
    if kind == "sim61":
        return gen_sim_study(int(spec.get("n", 250)), spec.get("effect", "heterogeneous"),
                             spec.get("surface", "nonlinear"), seed)
    raise ValidationError(f"unknown dgp {kind!r}")
