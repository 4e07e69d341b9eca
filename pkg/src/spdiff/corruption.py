"""Shortest-path corruption filters and the frequency-space forward process.

The forward process keeps, in every DFT bin, a fraction ``psi_t`` of the signal
variance and fills the rest with white noise::

    u_t = sqrt(psi_t) * u_0 + sqrt(1 - psi_t) * xi_t
    psi_t = (1 - d**(1 - t/T)) / (1 - d)

so the variance of each bin moves from ``d`` to 1 as ``d**(1 - t/T)``.  Dense
pixel-space counterparts are provided for cross-checking on small problems.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .errors import NoRoot, NonHermitian, OutOfRange
from .spectrum import SpectrumFit, model_spectrum

__all__ = [
    "FilterSchedule",
    "dft2",
    "idft2",
    "shortest_path_psi",
    "build_schedule",
    "corrupt",
    "corrupt_freq",
    "phi_pixel",
    "half_time_noise",
    "calibrate_c1_for_m",
]

EPS_MIN = 1e-8
UNIT_TOL = 1e-6
HERMITIAN_TOL = 1e-8


def dft2(x: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT over the last two axes."""
    return np.fft.fft2(np.asarray(x, dtype=float), norm="ortho")


def idft2(u: np.ndarray) -> np.ndarray:
    """Inverse unitary 2-D DFT; the input must be Hermitian (DFT of a real image)."""
    x = np.fft.ifft2(u, norm="ortho")
    scale = max(1.0, float(np.max(np.abs(u)))) if np.size(u) else 1.0
    if np.size(x) and np.max(np.abs(x.imag)) > HERMITIAN_TOL * scale:
        raise NonHermitian(f"imaginary residue {np.max(np.abs(x.imag)):.3e} after inverse DFT")
    return x.real


def shortest_path_psi(d, s):
    """Signal fraction ``(1 - d**(1-s)) / (1 - d)`` at relative time ``s``.

    Evaluated with ``expm1`` for accuracy near ``d = 1``; bins with
    ``|1 - d| < 1e-6`` take the limit ``1 - s``.
    """
    d = np.asarray(d, dtype=float)
    s = np.asarray(s, dtype=float)
    near_one = np.abs(1.0 - d) < UNIT_TOL
    safe = np.where(near_one, 2.0, d)
    logsafe = np.log(safe)
    psi = np.expm1((1.0 - s) * logsafe) / np.expm1(logsafe)
    return np.where(near_one, 1.0 - s, psi)


@dataclass
class FilterSchedule:
    """Per-bin signal fractions ``psi_t`` for ``t = 0..T``.

    ``d_values`` is the (H, W) model power that the schedule was built from.
    ``psi_t`` is recomputed from ``d_values`` on construction, never stored on disk.
    The last step is floored at ``eps_min`` so the reverse process stays invertible.
    """

    d_values: np.ndarray
    T: int
    eps_min: float = EPS_MIN
    fit: SpectrumFit | None = None
    _psi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        self.d_values = np.asarray(self.d_values, dtype=float)
        if np.any(self.d_values <= 0):
            raise ValueError("model power must be positive in every bin")
        s = np.arange(self.T + 1)[:, None, None] / self.T
        psi = shortest_path_psi(self.d_values[None], s)
        psi[0] = 1.0
        # keep the floored endpoint below the previous step
        psi[-1] = np.minimum(self.eps_min, 0.5 * psi[-2]) if self.T > 1 else self.eps_min
        self._psi = psi
        self._psi.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.d_values.shape

    @property
    def psi_table(self) -> np.ndarray:
        """Read-only ``(T + 1, H, W)`` array of all ``psi_t``."""
        return self._psi

    def psi(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise OutOfRange(f"t must lie in [0, {self.T}]")
        return self._psi[t]

    def variance(self, t) -> np.ndarray:
        """Per-bin variance of ``u_t`` when ``u_0`` has variance ``d_values``."""
        p = self.psi(t)
        return p * self.d_values + (1.0 - p)

    def target_variance(self, t: int) -> np.ndarray:
        """``d**(1 - t/T)``; at ``t = T`` the floored value ``variance(T)``."""
        if t == self.T:
            return self.variance(t)
        return self.d_values ** (1.0 - t / self.T)

    def validate(self) -> None:
        """Check boundary values, interior bounds and monotonicity in t."""
        p = self._psi
        if not np.all(p[0] == 1.0):
            raise ValueError("psi_0 must equal 1")
        if not np.all(p[-1] <= self.eps_min):
            raise ValueError("psi_T must not exceed eps_min")
        if self.T > 1 and not np.all((p[1:-1] > 0) & (p[1:-1] < 1)):
            raise ValueError("interior psi must lie in (0, 1)")
        if not np.all(np.diff(p, axis=0) < 0):
            raise ValueError("psi must decrease strictly in t")

    def to_json(self) -> dict:
        if self.fit is None:
            raise ValueError("schedule was not built from a spectrum fit; nothing to serialise")
        h, w = self.shape
        return {"H": h, "W": w, "T": self.T, "c1": self.fit.c1, "c2": self.fit.c2,
                "m": self.fit.m, "eps_min": self.eps_min}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "FilterSchedule":
        obj = json.loads(Path(path).read_text())
        fit = SpectrumFit(float(obj["c1"]), float(obj["c2"]), float(obj["m"]))
        sched = build_schedule(fit, int(obj["H"]), int(obj["W"]), int(obj["T"]),
                               eps_min=float(obj.get("eps_min", EPS_MIN)))
        sched.validate()
        return sched


def build_schedule(fit: SpectrumFit, height: int, width: int, T: int, eps_min: float = EPS_MIN) -> FilterSchedule:
    return FilterSchedule(model_spectrum(fit, height, width), T, eps_min, fit)


def corrupt_freq(u0: np.ndarray, xi: np.ndarray, t, schedule: FilterSchedule) -> np.ndarray:
    """``sqrt(psi_t) u0 + sqrt(1 - psi_t) xi`` bin-wise; ``t`` may be an array over the batch axis."""
    p = schedule.psi(t)
    if np.ndim(t):
        p = p.reshape(p.shape[:1] + (1,) * (u0.ndim - 3) + p.shape[1:])
    return np.sqrt(p) * u0 + np.sqrt(1.0 - p) * xi


def corrupt(x0: np.ndarray, t, schedule: FilterSchedule, noise_seed) -> tuple[np.ndarray, np.ndarray]:
    """Forward-corrupt ``x0`` to step ``t``.

    Noise is drawn in pixel space (unit white Gaussian, same shape as ``x0``) from
    ``noise_seed`` (an int or a ``numpy.random.Generator``) and transformed to the
    frequency domain.  ``x0`` is ``(..., C, H, W)``; a 1-d ``t`` indexes the
    leading batch axis.

    Returns
    -------
    x_t, eps : ndarray
        The corrupted image and the pixel-space noise that produced it.
    """
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > schedule.T):
        raise OutOfRange(f"t must lie in [0, {schedule.T}]")
    rng = np.random.default_rng(noise_seed)
    x0 = np.asarray(x0, dtype=float)
    eps = rng.standard_normal(x0.shape)
    if np.ndim(t) == 0 and int(t) == 0:
        return x0.copy(), eps
    u_t = corrupt_freq(dft2(x0), dft2(eps), t, schedule)
    return idft2(u_t), eps


def phi_pixel(sigma0: np.ndarray, t: float) -> np.ndarray:
    """Dense pixel-space filter ``(I - S0**(1-t)) (I - S0)**-1``.

    Eigenvalues within 1e-6 of 1 use the limit ``1 - t``.
    """
    if not 0.0 < t < 1.0:
        raise OutOfRange(f"t={t} outside (0, 1)")
    return linalg.spd_apply(sigma0, lambda w: shortest_path_psi(w, t))


def half_time_noise(d_values: np.ndarray) -> float:
    """Mean over bins of the noise fraction ``1 - psi`` at half time."""
    return float(np.mean(1.0 - shortest_path_psi(d_values, 0.5)))


def calibrate_c1_for_m(reference: SpectrumFit, target_m: float, height: int, width: int, T: int | None = None,
                       tol: float = 1e-10, bracket: tuple[float, float] = (1e-6, 1e6)) -> SpectrumFit:
    """Pick ``c1`` for exponent ``target_m`` so the half-time noise matches ``reference``.

    ``c2`` is kept.  The matched quantity is the per-bin mean of ``1 - psi`` at
    ``t = T/2``, which increases monotonically with ``c1``; bisection on
    ``log c1`` over ``bracket``.  ``T`` does not enter because half time is
    ``s = 0.5`` for every ``T``.
    """
    if not -2.0 <= target_m <= 4.0:
        raise OutOfRange(f"target_m={target_m} outside [-2, 4]")
    goal = half_time_noise(model_spectrum(reference, height, width))

    def excess(log_c1: float) -> float:
        fit = SpectrumFit(float(np.exp(log_c1)), reference.c2, target_m, fixed_m=True)
        return half_time_noise(model_spectrum(fit, height, width)) - goal

    lo, hi = np.log(bracket[0]), np.log(bracket[1])
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo > 0 or f_hi < 0:
        raise NoRoot(f"half-time noise {goal:.6g} not bracketed by c1 in {bracket}")
    if target_m == reference.m and bracket[0] <= reference.c1 <= bracket[1]:
        return SpectrumFit(reference.c1, reference.c2, target_m, fixed_m=True)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if excess(mid) < 0:
            lo = mid
        else:
            hi = mid
    return SpectrumFit(float(np.exp(0.5 * (lo + hi))), reference.c2, target_m, fixed_m=True)
