"""Per-channel scalar denoising filters: Kalman, unscented Kalman, particle.

Every RSS channel is filtered independently with a random-walk state model
x_t = x_{t-1} + v,  z_t = x_t + n,  v ~ N(0, q),  n ~ N(0, r).
The measurement variance r comes from training-set channel statistics and
q = gamma * r. The particle filter uses the same Gaussian likelihood and
triggers systematic resampling when the effective sample size drops below
tau * n_particles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class UkfParams:
    """Scalar unscented-transform spread parameters (standard defaults)."""

    alpha: float = 1e-3
    kappa: float = 0.0
    beta: float = 2.0


@dataclass(frozen=True)
class PfParams:
    n_particles: int = 10_000
    ess_tau: float = 0.3
    predict_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if not 0.0 < self.ess_tau < 1.0:
            raise ValueError("ess_tau must be in (0, 1)")
        if self.predict_sigma < 0:
            raise ValueError("predict_sigma must be >= 0")


@dataclass(frozen=True, eq=False)
class FilterConfig:
    """Which filter to run per channel and its noise model."""

    method: str = "kf"  # kf | ukf | pf | none
    q_gamma: float = 0.5  # process noise as a multiple of r
    r: np.ndarray | None = None  # per-channel measurement variances
    pf: PfParams = field(default_factory=PfParams)
    ukf: UkfParams = field(default_factory=UkfParams)

    def __post_init__(self):
        if self.method not in ("kf", "ukf", "pf", "none"):
            raise ValueError(f"unknown filter method {self.method!r}")
        if self.r is not None:
            arr = np.asarray(self.r, dtype=float)
            if np.any(arr <= 0):
                raise ValueError("measurement variances must be positive")
            arr.setflags(write=False)
            object.__setattr__(self, "r", arr)


@dataclass(frozen=True)
class KfState:
    """Scalar posterior: estimate x_hat with variance p."""

    x_hat: float
    p: float

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError("state variance must be positive")


@dataclass(frozen=True, eq=False)
class PfState:
    particles: np.ndarray
    weights: np.ndarray
    degenerate_reset: bool = False  # last update underflowed and was reset

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if p.shape != w.shape or p.ndim != 1:
            raise ValueError("particles and weights must be matching 1-D arrays")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")
        p.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "particles", p)
        object.__setattr__(self, "weights", w)

    @property
    def estimate(self) -> float:
        return float(self.weights @ self.particles)


def kf_step(state: KfState, z: float, q: float, r: float) -> KfState:
    """One predict/update cycle of the scalar Kalman filter."""
    if q < 0 or r <= 0:
        raise ValueError("need q >= 0 and r > 0")
    p = state.p + q
    gain = p / (p + r)
    x = state.x_hat + gain * (z - state.x_hat)
    p = (1.0 - gain) * p
    return KfState(x, p)


def ukf_step(state: KfState, z: float, q: float, r: float,
             params: UkfParams = UkfParams()) -> KfState:
    """One scalar unscented update.

    Sigma points are propagated through the (identity) process and measurement
    models and the moments recomputed from weighted sums, so on this linear
    model the result agrees with kf_step to floating-point cancellation.
    """
    if q < 0 or r <= 0:
        raise ValueError("need q >= 0 and r > 0")
    n = 1.0
    lam = params.alpha ** 2 * (n + params.kappa) - n
    c = n + lam  # = alpha^2 (n + kappa)
    wm = np.array([lam / c, 0.5 / c, 0.5 / c])
    wc = wm.copy()
    wc[0] += 1.0 - params.alpha ** 2 + params.beta

    spread = math.sqrt(c * state.p)
    chi = np.array([state.x_hat, state.x_hat + spread, state.x_hat - spread])
    # identity dynamics; recompute predicted moments from the points
    x_pred = float(wm @ chi)
    p_pred = float(wc @ (chi - x_pred) ** 2) + q
    assert p_pred > 0, "predicted variance must stay positive"

    spread = math.sqrt(c * p_pred)
    chi = np.array([x_pred, x_pred + spread, x_pred - spread])
    zeta = chi  # identity measurement model
    z_pred = float(wm @ zeta)
    s = float(wc @ (zeta - z_pred) ** 2) + r
    cross = float(wc @ ((chi - x_pred) * (zeta - z_pred)))
    gain = cross / s
    x = x_pred + gain * (z - z_pred)
    p = p_pred - gain * s * gain
    return KfState(x, p)


def effective_sample_size(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    return 1.0 / float(w @ w)


def systematic_resample(particles: np.ndarray, weights: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Stride resampling from one uniform offset u ~ U[0, 1/m)."""
    m = len(particles)
    positions = (rng.uniform(0.0, 1.0 / m) + np.arange(m) / m)
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0  # guard against fp undershoot in the last bin
    idx = np.searchsorted(cumulative, positions, side="right")
    return particles[np.minimum(idx, m - 1)]


def pf_step(state: PfState, z: float, r: float, tau: float,
            predict_sigma: float, rng: np.random.Generator) -> PfState:
    """One particle-filter cycle: predict, weight, normalize, maybe resample.

    If every likelihood underflows to zero the weights reset to uniform and
    the returned state is flagged degenerate.
    """
    m = len(state.particles)
    particles = state.particles + rng.normal(0.0, predict_sigma, size=m)
    logw = -((particles - z) ** 2) / (2.0 * r)
    weights = state.weights * np.exp(logw - logw.max())
    total = weights.sum()
    degenerate = False
    if total <= 0.0 or not np.isfinite(total):
        weights = np.full(m, 1.0 / m)
        degenerate = True
    else:
        weights = weights / total
    if effective_sample_size(weights) < tau * m:
        particles = systematic_resample(particles, weights, rng)
        weights = np.full(m, 1.0 / m)
    return PfState(particles, weights, degenerate)


def _filter_channel_kf(series: np.ndarray, q: float, r: float,
                       method: str, ukf: UkfParams) -> np.ndarray:
    out = np.empty_like(series)
    state = KfState(float(series[0]), r)  # init at first observation
    out[0] = state.x_hat
    for t in range(1, len(series)):
        if method == "kf":
            state = kf_step(state, float(series[t]), q, r)
        else:
            state = ukf_step(state, float(series[t]), q, r, ukf)
        out[t] = state.x_hat
    return out


def _filter_channel_pf(series: np.ndarray, r: float, pf: PfParams,
                       rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(series)
    particles = rng.normal(float(series[0]), 1.0, size=pf.n_particles)
    state = PfState(particles, np.full(pf.n_particles, 1.0 / pf.n_particles))
    out[0] = state.estimate
    for t in range(1, len(series)):
        state = pf_step(state, float(series[t]), r, pf.ess_tau,
                        pf.predict_sigma, rng)
        out[t] = state.estimate
    return out


def filter_stream(series: np.ndarray, cfg: FilterConfig) -> np.ndarray:
    """Denoise a (T, d) stream channel by channel; method 'none' is identity.

    KF/UKF start at the first observation with p0 = r_i; the particle filter
    seeds its cloud from N(z_1, 1). Channel i of a PF run uses an independent
    generator derived from (pf.seed, i) so results do not depend on channel
    evaluation order.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim != 2 or series.shape[0] < 1:
        raise ValueError("series must be a (T, d) matrix with T >= 1")
    if cfg.method == "none":
        return series.copy()
    if cfg.r is None or cfg.r.size != series.shape[1]:
        raise ValueError("cfg.r must hold one variance per channel")
    out = np.empty_like(series)
    for i in range(series.shape[1]):
        r_i = float(cfg.r[i])
        if cfg.method in ("kf", "ukf"):
            out[:, i] = _filter_channel_kf(series[:, i], cfg.q_gamma * r_i,
                                           r_i, cfg.method, cfg.ukf)
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence(cfg.pf.seed, spawn_key=(i,)))
            out[:, i] = _filter_channel_pf(series[:, i], r_i, cfg.pf, rng)
    return out
