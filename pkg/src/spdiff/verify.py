"""Independent oracles: Monte Carlo moment checks, ordering checks and path-length comparisons.

Stochastic checks report per-bin estimates with standard errors and pass when
every bin is within ``threshold`` standard errors of its target (3 by default).
Draws come from seeded numpy generators in fixed-size chunks, so
a report is reproducible bit-for-bit from ``(seed, n)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import linalg
from .corruption import FilterSchedule, corrupt, dft2, idft2
from .diffusion import SigmaVariant, oracle_coefficients, sigma_schedule
from .spectrum import SpectrumFit, frequency_grid, model_spectrum

__all__ = [
    "McReport",
    "gaussian_data",
    "bin_variance",
    "check_forward_covariance",
    "check_sample_variance",
    "analytic_sample_variance",
    "frequency_ordering",
    "check_frequency_ordering",
    "fisher_length_diagonal",
    "spd_curve",
    "linear_curve",
    "cosine_curve",
    "compare_path_lengths",
    "random_spd",
    "random_spd_pairs",
    "geodesic_suite",
]

CHUNK = 10_000


@dataclass
class McReport:
    name: str
    estimate: np.ndarray
    stderr: np.ndarray
    target: np.ndarray
    threshold: float = 3.0
    rel_tol: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def deviation_se(self) -> np.ndarray:
        return np.abs(self.estimate - self.target) / self.stderr

    @property
    def max_deviation_se(self) -> float:
        return float(np.max(self.deviation_se))

    @property
    def max_rel_deviation(self) -> float:
        return float(np.max(np.abs(self.estimate / self.target - 1.0)))

    @property
    def passed(self) -> bool:
        if self.rel_tol is not None:
            return self.max_rel_deviation <= self.rel_tol
        return self.max_deviation_se <= self.threshold

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "estimate": np.asarray(self.estimate).tolist(),
            "stderr": np.asarray(self.stderr).tolist(),
            "target": np.asarray(self.target).tolist(),
            "threshold": self.threshold,
            "rel_tol": self.rel_tol,
            "max_deviation_se": self.max_deviation_se,
            "max_rel_deviation": self.max_rel_deviation,
            "passed": self.passed,
            "meta": self.meta,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<34s} max|dev|={self.max_deviation_se:7.3f} SE  "
                f"max rel={self.max_rel_deviation:9.3e}  {status}")


# --------------------------------------------------------------------------- Gaussian data

def gaussian_data(d_values: np.ndarray, n: int, rng, channels: int = 1) -> np.ndarray:
    """``n`` images with ``E|u_0|^2 = d`` in every bin, i.e. covariance ``F diag(d) F^H``.

    Drawn in frequency space: white noise is transformed and scaled bin-wise by
    ``sqrt(d)``, which yields Hermitian-symmetric coefficients with exactly the
    right second moments.
    """
    rng = np.random.default_rng(rng)
    h, w = np.shape(d_values)
    white = rng.standard_normal((n, channels, h, w))
    return idft2(np.sqrt(d_values) * dft2(white))


def bin_variance(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin mean of ``|dft2(x)|^2`` over the batch (and channel) axes, with its standard error."""
    p = np.abs(dft2(x)) ** 2
    p = p.reshape(-1, *p.shape[-2:])
    return p.mean(axis=0), p.std(axis=0, ddof=1) / np.sqrt(p.shape[0])


class _Moments:
    """Streaming sum and sum of squares of ``|u|^2`` per bin."""

    def __init__(self):
        self.n = 0
        self.s1 = 0.0
        self.s2 = 0.0

    def add(self, u: np.ndarray) -> None:
        p = np.abs(u) ** 2
        p = p.reshape(-1, *p.shape[-2:])
        self.n += p.shape[0]
        self.s1 = self.s1 + p.sum(axis=0)
        self.s2 = self.s2 + (p * p).sum(axis=0)

    def result(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.s1 / self.n
        var = (self.s2 - self.n * mean * mean) / (self.n - 1)
        return mean, np.sqrt(np.maximum(var, 0.0) / self.n)


def check_forward_covariance(schedule: FilterSchedule, t: int, n: int, seed: int,
                             threshold: float = 3.0) -> McReport:
    """Monte Carlo check that ``Var(u_t) = d**(1 - t/T)`` bin-wise under :func:`corrupt`.

    Each ``t`` draws from its own stream ``SeedSequence(seed, spawn_key=(t,))``
    so reports for different times are independent.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))
    acc = _Moments()
    for start in range(0, n, CHUNK):
        m = min(CHUNK, n - start)
        x0 = gaussian_data(schedule.d_values, m, rng)
        x_t, _ = corrupt(x0, t, schedule, rng)
        acc.add(dft2(x_t))
    est, se = acc.result()
    return McReport(f"forward covariance t={t}/{schedule.T}", est, se, schedule.target_variance(t),
                    threshold, meta={"t": t, "T": schedule.T, "n": n, "seed": seed})


def check_sample_variance(samples: np.ndarray, target: np.ndarray, rel_tol: float | None = None,
                          name: str = "generated variance") -> McReport:
    """Per-bin variance of generated images against ``target`` (SE or relative criterion)."""
    est, se = bin_variance(samples)
    return McReport(name, est, se, np.asarray(target, dtype=float), rel_tol=rel_tol,
                    meta={"n": int(samples.shape[0])})


def analytic_sample_variance(schedule: FilterSchedule, variant: SigmaVariant | str | None,
                             coefficients: np.ndarray | None = None,
                             sigma: np.ndarray | None = None) -> np.ndarray:
    """Exact per-bin variance of the sampler's output for a linear frequency denoiser.

    With ``eps_hat = w_t u_t`` every reverse step is ``u_{t-1} = k_t u_t + noise``
    bin-wise, so the variance follows ``v_{t-1} = k_t^2 v_t + sigma_t`` from
    ``v_T = 1`` (no noise on the last step).  ``coefficients`` defaults to the
    Gaussian oracle; ``sigma`` overrides the variance table of ``variant``.
    """
    p = schedule.psi_table
    sig = sigma_schedule(schedule, variant) if sigma is None else np.asarray(sigma, dtype=float)
    coef = oracle_coefficients(schedule) if coefficients is None else coefficients
    v = np.ones(schedule.shape)
    for t in range(schedule.T, 0, -1):
        a = np.sqrt(p[t - 1] / p[t])
        b = a * (1.0 - p[t] / p[t - 1]) / np.sqrt(1.0 - p[t])
        k = a - b * coef[t]
        v = k * k * v + (sig[t] if t > 1 else 0.0)
    return v


# --------------------------------------------------------------------------- ordering

def _levels(schedule: FilterSchedule, t: int):
    f = frequency_grid(*schedule.shape).ravel()
    psi = schedule.psi(t).ravel()
    d = schedule.d_values.ravel()
    fu = np.unique(np.round(f, 12))
    idx = np.searchsorted(fu, np.round(f, 12))
    psi_lvl = np.array([psi[idx == k] for k in range(fu.size)], dtype=object)
    d_lvl = np.array([d[idx == k].mean() for k in range(fu.size)])
    return fu, psi_lvl, d_lvl


def frequency_ordering(schedule: FilterSchedule, t: int) -> str:
    """Classify ``psi_t`` against frequency norm: increasing, decreasing, flat or mixed."""
    if not 0 < t < schedule.T:
        raise ValueError(f"t must lie strictly between 0 and {schedule.T}")
    if check_frequency_ordering(schedule, t):
        flat = np.ptp(schedule.psi(t)) == 0
        return "flat" if flat else "increasing"
    if check_frequency_ordering(schedule, t, descending=True):
        return "decreasing"
    return "mixed"


def check_frequency_ordering(schedule: FilterSchedule, t: int, descending: bool = False) -> bool:
    """True iff ``psi_t`` is monotone along increasing frequency norm.

    Ascending by default (low frequencies lose signal first).  Bins sharing a
    norm must agree; between consecutive norms the change must be strict
    wherever the model power changes strictly in the opposite direction.
    """
    if not 0 < t < schedule.T:
        raise ValueError(f"t must lie strictly between 0 and {schedule.T}")
    _, psi_lvl, d_lvl = _levels(schedule, t)
    sign = -1.0 if descending else 1.0
    tol = 1e-14
    for k, vals in enumerate(psi_lvl):
        if np.ptp(vals) > tol:
            return False
        if k == 0:
            continue
        step = sign * (vals[0] - psi_lvl[k - 1][0])
        d_step = sign * (d_lvl[k] - d_lvl[k - 1])
        if step < -tol:
            return False
        if d_step < 0 and step <= 0:
            return False
    return True


# --------------------------------------------------------------------------- path lengths

DiagCurve = Callable[[float], np.ndarray]


def fisher_length_diagonal(curve: DiagCurve, n_steps: int = 1000, t0: float = 0.0, t1: float = 1.0) -> float:
    """Fisher length of a path of diagonal covariances given as per-bin variances.

    ``(1/sqrt 2) * integral of sqrt(sum (d log v / dt)^2)``, midpoint rule with
    central differences of ``log v`` between grid nodes.
    """
    h = (t1 - t0) / n_steps
    logv = np.log(np.stack([np.asarray(curve(t0 + k * h), dtype=float) for k in range(n_steps + 1)]))
    rate = np.diff(logv, axis=0).reshape(n_steps, -1) / h
    return float(abs(h) * np.sqrt((rate ** 2).sum(axis=1)).sum() / np.sqrt(2.0))


def spd_curve(d: np.ndarray) -> DiagCurve:
    return lambda t: d ** (1.0 - t)


def linear_curve(d: np.ndarray) -> DiagCurve:
    return lambda t: (1.0 - t) * d + t


def cosine_curve(d: np.ndarray) -> DiagCurve:
    """Uniform noising with a cosine signal schedule ``abar = cos^2(pi t / 2)``."""
    def curve(t):
        abar = np.cos(0.5 * np.pi * t) ** 2
        return abar * d + (1.0 - abar)
    return curve


def compare_path_lengths(spectrum: SpectrumFit | np.ndarray, height: int | None = None, width: int | None = None,
                         alternatives: Mapping[str, DiagCurve] | None = None,
                         n_steps: int = 1000) -> dict[str, float]:
    """Fisher length from ``N(0, diag d)`` to ``N(0, I)`` for several variance schedules.

    ``spectrum`` is either a fit (evaluated on the H x W grid) or explicit
    per-bin variances.  The shortest-path curve ``d**(1-t)`` is always included
    as ``"spd"``; ``alternatives`` defaults to linear and cosine schedules.
    """
    d = model_spectrum(spectrum, height, width) if isinstance(spectrum, SpectrumFit) else np.asarray(spectrum, float)
    curves = {"spd": spd_curve(d)}
    if alternatives is None:
        alternatives = {"linear": linear_curve(d), "cosine": cosine_curve(d)}
    curves.update(alternatives)
    return {name: fisher_length_diagonal(c, n_steps) for name, c in curves.items()}


# --------------------------------------------------------------------------- dense geodesics

def random_spd(rng, dim: int, log_spread: float = 1.5) -> np.ndarray:
    """Random SPD matrix: Haar-ish rotation with log-uniform eigenvalues in ``exp(+-log_spread)``."""
    rng = np.random.default_rng(rng)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    w = np.exp(rng.uniform(-log_spread, log_spread, dim))
    a = (q * w) @ q.T
    return 0.5 * (a + a.T)


def random_spd_pairs(seed: int, count: int = 20, max_dim: int = 6):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        dim = int(rng.integers(2, max_dim + 1))
        yield random_spd(rng, dim), random_spd(rng, dim)


@dataclass
class GeodesicCase:
    dim: int
    max_residual: float
    boundary_error: float
    geodesic_length: float
    straight_length: float
    straight_max_residual: float

    @property
    def passed(self) -> bool:
        return (self.max_residual <= 1e-5 and self.boundary_error <= 1e-8
                and self.geodesic_length <= self.straight_length)


def geodesic_suite(seed: int = 0, count: int = 20, max_dim: int = 6, h: float = 1e-3,
                   n_steps: int = 1000, probe_ts=(0.1, 0.3, 0.5, 0.7, 0.9)) -> list[GeodesicCase]:
    """Residual, boundary and length checks of closed-form geodesics on random SPD pairs."""
    cases = []
    for s0, s1 in random_spd_pairs(seed, count, max_dim):
        path = linalg.geodesic(s0, s1)
        res = max(linalg.geodesic_ode_residual(path, t, h) for t in probe_ts)
        bnd = max(np.linalg.norm(path(0.0) - s0) / np.linalg.norm(s0),
                  np.linalg.norm(path(1.0) - s1) / np.linalg.norm(s1))
        straight = lambda t, s0=s0, s1=s1: (1.0 - t) * s0 + t * s1  # noqa: E731
        cases.append(GeodesicCase(
            dim=s0.shape[0],
            max_residual=res,
            boundary_error=float(bnd),
            geodesic_length=linalg.path_length(path, 0.0, 1.0, n_steps),
            straight_length=linalg.path_length(straight, 0.0, 1.0, n_steps),
            straight_max_residual=max(linalg.geodesic_ode_residual(straight, t, h) for t in probe_ts),
        ))
    return cases
