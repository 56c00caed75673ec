"""Synthetic data with longitudinal covariates driven by subject random effects.

Survival times are Weibull with survival function

    S(t) = exp(-lam * t**nu * exp(lp))

so ``lam`` is a rate-type scale: larger values mean earlier events.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from dynsurv.data import Schema, load_dataset


def simulate_t_weibull(n, lam, nu, linear_predictor=None, rng=None):
    """Weibull times by inversion: ``T = (-log U / (lam * exp(lp)))**(1/nu)``."""
    if not (lam > 0 and nu > 0):
        raise ValueError(f"lam and nu must be positive, got lam={lam}, nu={nu}")
    rng = np.random.default_rng(rng)
    lp = np.zeros(n) if linear_predictor is None else np.broadcast_to(np.asarray(linear_predictor, dtype=float), (n,))
    u = rng.uniform(size=n)
    return (-np.log(u) / (lam * np.exp(lp))) ** (1.0 / nu)


@dataclass(frozen=True)
class SimConfig:
    """Generator settings.

    With ``landmark`` set, visits fall in ``[0, landmark]`` and event times
    are ``landmark`` plus a Weibull draw, so every subject is at risk at the
    landmark. Censoring is uniform on ``censor_window`` (absolute times,
    ``landmark`` is added when set) and administrative at ``horizon``.
    """

    n: int = 100
    p: int = 5
    p_relevant: int = 2
    visits: tuple = (0.0, 0.5, 1.0, 1.5, 2.0)
    jitter: float = 0.1
    lam: float = 0.2
    nu: float = 1.5
    effect: float = 1.0
    D: tuple = ((1.0, 0.5), (0.5, 1.0))
    beta: tuple = (0.0, 0.5)
    sigma: float = 0.5
    baseline_effects: tuple = (0.5,)
    landmark: float | None = 2.0
    censor_window: tuple = (0.0, 10.0)
    horizon: float = np.inf
    truncate: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.p < 1 or not 0 <= self.p_relevant <= self.p:
            raise ValueError("need n >= 2, p >= 1 and 0 <= p_relevant <= p")
        if not (self.lam > 0 and self.nu > 0):
            raise ValueError("lam and nu must be positive")
        D = np.asarray(self.D, dtype=float)
        if D.shape != (2, 2) or np.any(np.linalg.eigvalsh(D) < 0):
            raise ValueError("D must be a 2x2 positive semidefinite matrix")
        lo, hi = self.censor_window
        if not lo <= hi:
            raise ValueError("censor_window must be (low, high) with low <= high")


@dataclass(frozen=True)
class SimTruth:
    u: np.ndarray  # (n, p, 2) random intercepts and slopes
    linear_predictor: np.ndarray
    event_time: np.ndarray
    censor_time: np.ndarray
    baseline: np.ndarray
    coefficients: dict = field(default_factory=dict)


def simulate_prclmm_data(config=None, **overrides):
    """Simulate a survival table and a longitudinal table plus the truth.

    Covariate ``y<s>`` follows ``b0 + u0 + (b1 + u1) * fuptime + e`` and the
    hazard uses ``effect * u0`` of the first ``p_relevant`` covariates plus
    the standard normal baseline covariates ``x<k>``.
    """
    config = config or SimConfig()
    if overrides:
        config = SimConfig(**{**config.__dict__, **overrides})
    c = config
    rng = np.random.default_rng(c.seed)
    n, p = c.n, c.p
    D = np.asarray(c.D, dtype=float)
    L = np.linalg.cholesky(D) if np.all(np.linalg.eigvalsh(D) > 0) else _psd_root(D)
    u = rng.standard_normal((n, p, 2)) @ L.T
    k = len(c.baseline_effects)
    X = rng.standard_normal((n, k))
    lp = c.effect * u[:, : c.p_relevant, 0].sum(axis=1) + X @ np.asarray(c.baseline_effects, dtype=float)
    offset = c.landmark or 0.0
    T = offset + simulate_t_weibull(n, c.lam, c.nu, lp, rng)
    C = offset + rng.uniform(c.censor_window[0], c.censor_window[1], size=n)
    obs = np.minimum(np.minimum(T, C), c.horizon)
    event = ((T <= C) & (T <= c.horizon)).astype(int)

    grid = np.asarray(c.visits, dtype=float)
    if c.landmark is not None:
        grid = grid[grid <= c.landmark]
    m = grid.size
    fup = np.tile(grid, (n, 1)) + rng.uniform(-c.jitter, c.jitter, size=(n, m))
    fup[:, 0] = grid[0]
    hi = c.landmark if c.landmark is not None else np.inf
    fup = np.clip(fup, 0.0, hi)
    keep = np.ones((n, m), dtype=bool)
    if c.truncate:
        keep = fup <= obs[:, None]
        keep[:, 0] = True
    b0, b1 = c.beta
    ys = {}
    for s in range(p):
        eps = rng.standard_normal((n, m)) * c.sigma
        ys[f"y{s + 1}"] = (b0 + u[:, s, 0:1]) + (b1 + u[:, s, 1:2]) * fup + eps

    ids = np.array([str(i + 1) for i in range(n)])
    surv = pd.DataFrame({"id": ids, "time": obs, "event": event})
    for j in range(k):
        surv[f"x{j + 1}"] = X[:, j]
    rows = np.nonzero(keep)
    long = pd.DataFrame({"id": ids[rows[0]], "fuptime": fup[rows]})
    for name, y in ys.items():
        long[name] = y[rows]
    schema = Schema(baseline=[f"x{j + 1}" for j in range(k)], longitudinal=list(ys))
    dataset = load_dataset(surv, long, schema)
    truth = SimTruth(
        u=u, linear_predictor=lp, event_time=T, censor_time=C, baseline=X,
        coefficients={"effect": c.effect, "baseline_effects": tuple(c.baseline_effects), "beta": tuple(c.beta)},
    )
    return dataset, truth


def _psd_root(D):
    w, V = np.linalg.eigh(D)
    return V * np.sqrt(np.clip(w, 0.0, None))


def exponential_censoring_rate(lam, window):
    """P(C < T) for T ~ Exp(lam) and C ~ Uniform(window), i.e. E[exp(-lam C)]."""
    lo, hi = window
    if hi == lo:
        return float(np.exp(-lam * lo))
    return float((np.exp(-lam * lo) - np.exp(-lam * hi)) / (lam * (hi - lo)))
