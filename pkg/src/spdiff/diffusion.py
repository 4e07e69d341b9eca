"""Training loop, epsilon-prediction denoisers and the frequency-space reverse sampler.

Shapes: images are ``(C, H, W)`` or batches ``(B, C, H, W)``; filters are
``(H, W)`` and shared by all channels.  The reverse update in every bin is::

    u_{t-1} = a_t u_t - a_t (1 - psi_t / psi_{t-1}) / sqrt(1 - psi_t) * dft2(eps_hat)
              + sqrt(sigma_t) * dft2(z)
    a_t = sqrt(psi_{t-1} / psi_t)

with ``sigma_t`` one of the two variance choices in :class:`SigmaVariant`.
"""
from __future__ import annotations

import enum
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .corruption import FilterSchedule, corrupt_freq, dft2, idft2
from .errors import NonFiniteLoss, OutOfRange, ShapeMismatch, UnsupportedFormat
from .tensorio import decode_tensor, encode_tensor

__all__ = [
    "Denoiser",
    "GaussianOracleDenoiser",
    "LinearFrequencyDenoiser",
    "SigmaVariant",
    "TrainState",
    "default_variant",
    "expected_update",
    "gaussian_oracle_denoiser",
    "inverse_time_lr",
    "load_denoiser",
    "oracle_coefficients",
    "reverse_step",
    "sample",
    "save_denoiser",
    "sigma_schedule",
    "simple_loss",
    "simple_loss_grad",
    "train",
    "train_step",
]


class SigmaVariant(str, enum.Enum):
    BETA = "beta"
    BETA_TILDE = "beta-tilde"


def default_variant(T: int) -> SigmaVariant:
    """BETA for long chains (T > 300), BETA_TILDE otherwise."""
    return SigmaVariant.BETA if T > 300 else SigmaVariant.BETA_TILDE


def sigma_schedule(schedule: FilterSchedule, variant: SigmaVariant | str) -> np.ndarray:
    """Reverse-step noise variances, shape ``(T + 1, H, W)``; row 0 is unused (zero).

    BETA is ``1 - psi_t / psi_{t-1}``; BETA_TILDE scales it by
    ``(1 - psi_{t-1}) / (1 - psi_t)``.
    """
    variant = SigmaVariant(variant)
    p = schedule.psi_table
    out = np.zeros_like(p)
    beta = 1.0 - p[1:] / p[:-1]
    if variant is SigmaVariant.BETA_TILDE:
        beta = beta * (1.0 - p[:-1]) / (1.0 - p[1:])
    out[1:] = beta
    return out


def simple_loss(eps_hat: np.ndarray, eps: np.ndarray) -> float:
    """Mean squared error over every element."""
    eps_hat, eps = np.asarray(eps_hat), np.asarray(eps)
    if eps_hat.shape != eps.shape:
        raise ShapeMismatch(f"{eps_hat.shape} vs {eps.shape}")
    return float(np.mean((eps_hat - eps) ** 2))


def simple_loss_grad(eps_hat: np.ndarray, eps: np.ndarray) -> np.ndarray:
    if np.shape(eps_hat) != np.shape(eps):
        raise ShapeMismatch(f"{np.shape(eps_hat)} vs {np.shape(eps)}")
    return 2.0 * (eps_hat - eps) / np.size(eps)


# --------------------------------------------------------------------------- denoisers

class Denoiser(Protocol):
    def predict(self, x_t: np.ndarray, t) -> np.ndarray:
        """Estimate the pixel-space noise contained in ``x_t`` at step ``t``."""


def _broadcast_t(coef: np.ndarray, t, ndim: int) -> np.ndarray:
    # coef: (B, ...) indexed per batch element when t is an array
    if np.ndim(t):
        return coef.reshape(coef.shape[:1] + (1,) * (ndim - coef.ndim) + coef.shape[1:])
    return coef


def oracle_coefficients(schedule: FilterSchedule) -> np.ndarray:
    """Posterior-mean slopes ``sqrt(1 - psi_t) / Var(u_t)`` for ``t = 0..T``, shape ``(T+1, H, W)``."""
    p = schedule.psi_table
    var = p * schedule.d_values + (1.0 - p)
    return np.sqrt(1.0 - p) / var


class GaussianOracleDenoiser:
    """Exact ``E[eps | x_t]`` when ``x_0 ~ N(0, F diag(d) F^H)`` with ``d = schedule.d_values``."""

    def __init__(self, schedule: FilterSchedule):
        self.schedule = schedule
        self._coef = oracle_coefficients(schedule)

    def coefficients(self, t) -> np.ndarray:
        if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > self.schedule.T):
            raise OutOfRange(f"t must lie in [0, {self.schedule.T}]")
        return self._coef[t]

    def predict(self, x_t: np.ndarray, t) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=float)
        coef = _broadcast_t(self.coefficients(t), t, x_t.ndim)
        return idft2(coef * dft2(x_t))


def gaussian_oracle_denoiser(schedule: FilterSchedule) -> GaussianOracleDenoiser:
    return GaussianOracleDenoiser(schedule)


class LinearFrequencyDenoiser:
    """``eps_hat = idft2(w[t] * dft2(x_t))`` with an independent real weight per (t, channel, bin).

    ``weights`` has shape ``(T, C, H, W)``; row ``t - 1`` serves step ``t``.  At
    ``t = 0`` the prediction is zero.
    """

    model = "linear-frequency"

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.ndim != 4:
            raise ShapeMismatch(f"weights must be (T, C, H, W), got {self.weights.shape}")

    @property
    def T(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, T: int, channels: int, height: int, width: int) -> "LinearFrequencyDenoiser":
        return cls(np.zeros((T, channels, height, width)))

    @classmethod
    def from_oracle(cls, schedule: FilterSchedule, channels: int = 1) -> "LinearFrequencyDenoiser":
        coef = oracle_coefficients(schedule)[1:]
        return cls(np.repeat(coef[:, None], channels, axis=1))

    def _rows(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise OutOfRange(f"t must lie in [0, {self.T}]")
        padded = np.concatenate([np.zeros_like(self.weights[:1]), self.weights])
        return padded[t]

    def predict(self, x_t: np.ndarray, t) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=float)
        w = self._rows(t)
        if np.ndim(t) == 0:
            return idft2(w * dft2(x_t))
        return idft2(w.reshape(w.shape[:1] + (1,) * (x_t.ndim - 4) + w.shape[1:]) * dft2(x_t))


def save_denoiser(path: str | Path, denoiser: LinearFrequencyDenoiser) -> None:
    """JSON header line, then an SPDT payload of the weights as a (T*C, H, W) tensor."""
    T, C, H, W = denoiser.weights.shape
    header = json.dumps({"T": T, "H": H, "W": W, "C": C, "model": denoiser.model})
    payload = encode_tensor(denoiser.weights.reshape(T * C, H, W))
    Path(path).write_bytes(header.encode() + b"\n" + payload)


def load_denoiser(path: str | Path) -> LinearFrequencyDenoiser:
    data = Path(path).read_bytes()
    head, sep, rest = data.partition(b"\n")
    if not sep:
        raise UnsupportedFormat(f"{path}: missing header line")
    try:
        meta = json.loads(head)
    except json.JSONDecodeError as exc:
        raise UnsupportedFormat(f"{path}: bad header: {exc}") from exc
    if meta.get("model") != LinearFrequencyDenoiser.model:
        raise UnsupportedFormat(f"{path}: unknown model {meta.get('model')!r}")
    T, C, H, W = (int(meta[k]) for k in ("T", "C", "H", "W"))
    flat = decode_tensor(io.BytesIO(rest))
    if flat.shape != (T * C, H, W):
        raise UnsupportedFormat(f"{path}: payload shape {flat.shape} does not match header")
    return LinearFrequencyDenoiser(flat.reshape(T, C, H, W))


# --------------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainState:
    weights: np.ndarray  # (T, C, H, W)
    step: int = 0
    lr: float = 1e-2
    running_loss: float = float("nan")
    last_loss: float = float("nan")
    last_update: np.ndarray | None = None
    loss_decay: float = 0.99

    @property
    def denoiser(self) -> LinearFrequencyDenoiser:
        return LinearFrequencyDenoiser(self.weights)


def train_step(state: TrainState, x0: np.ndarray, schedule: FilterSchedule, rng) -> TrainState:
    """One iteration of the training loop on the linear frequency denoiser.

    Samples ``t`` uniformly in ``1..T`` per batch element, corrupts ``x0`` with
    fresh pixel noise, and takes a plain gradient step on the simple loss
    (averaged over batch elements and pixels).  ``x0`` is ``(C, H, W)`` or a
    batch ``(B, C, H, W)``; ``rng`` is a seed or ``Generator``.
    """
    rng = np.random.default_rng(rng)
    x0 = np.asarray(x0, dtype=float)
    batched = x0.ndim == 4
    xb = x0 if batched else x0[None]
    T = schedule.T
    if state.weights.shape[0] != T or state.weights.shape[2:] != schedule.shape:
        raise ShapeMismatch("denoiser weights do not match the schedule")
    t = rng.integers(1, T + 1, size=xb.shape[0])
    eps = rng.standard_normal(xb.shape)
    xi = dft2(eps)
    u_t = corrupt_freq(dft2(xb), xi, t, schedule)
    w = state.weights[t - 1]
    # dft2(eps_hat - eps) = w u_t - xi; loss and gradient by Parseval
    with np.errstate(invalid="ignore", over="ignore"):
        resid = w * u_t - xi
        loss = float(np.sum(np.abs(resid) ** 2)) / resid.size
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss} at step {state.step}")
    g_w = 2.0 / resid.size * np.real(np.conj(resid) * u_t)
    grad = np.zeros_like(state.weights)
    np.add.at(grad, t - 1, g_w)
    update = -state.lr * grad
    if np.isnan(state.running_loss):
        running = loss
    else:
        running = state.loss_decay * state.running_loss + (1.0 - state.loss_decay) * loss
    return replace(state, weights=state.weights + update, step=state.step + 1,
                   running_loss=running, last_loss=loss, last_update=update)


def expected_update(state: TrainState, schedule: FilterSchedule, t: int) -> np.ndarray:
    """Population-mean parameter update of a single-sample :func:`train_step` at step ``t``.

    Assumes Gaussian data whose spectrum equals ``schedule.d_values``; the mean
    gradient in each bin is ``2/N * (w Var(u_t) - sqrt(1 - psi_t))`` with
    ``N = C H W``.  Only row ``t - 1`` is nonzero.
    """
    n = np.prod(state.weights.shape[1:])
    var = schedule.variance(t)
    out = np.zeros_like(state.weights)
    out[t - 1] = -state.lr * 2.0 / n * (state.weights[t - 1] * var - np.sqrt(1.0 - schedule.psi(t)))
    return out


def inverse_time_lr(peak: float, scale: float) -> Callable[[int], float]:
    """Learning rate ``min(peak, scale / k)`` for step ``k = 1, 2, ...``."""
    return lambda k: min(peak, scale / k)


def train(state: TrainState, schedule: FilterSchedule, data, steps: int, rng, batch_size: int = 1,
          lr_schedule: Callable[[int], float] | None = None) -> tuple[TrainState, np.ndarray]:
    """Run ``steps`` calls of :func:`train_step`.

    ``data`` is either an ``(N, C, H, W)`` array, from which each batch is drawn
    uniformly with replacement, or a callable ``(n, rng) -> (n, C, H, W)`` that
    generates fresh images.  ``lr_schedule`` maps the 1-based step index to a
    learning rate; by default ``state.lr`` is kept.  Returns the final state and
    the per-step losses.
    """
    rng = np.random.default_rng(rng)
    if not callable(data):
        data = np.asarray(data, dtype=float)
        if data.ndim != 4 or data.shape[0] == 0:
            raise ShapeMismatch(f"training data must be a non-empty (N, C, H, W) array, got {data.shape}")
    losses = np.empty(steps)
    for k in range(1, steps + 1):
        if lr_schedule is not None:
            state = replace(state, lr=float(lr_schedule(k)))
        if callable(data):
            batch = data(batch_size, rng)
        else:
            batch = data[rng.integers(0, data.shape[0], size=batch_size)]
        state = train_step(state, batch, schedule, rng)
        losses[k - 1] = state.last_loss
    return state, losses


# --------------------------------------------------------------------------- sampling

def reverse_step(u_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: FilterSchedule,
                 sigma: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
    """One ancestral step ``u_t -> u_{t-1}`` in frequency space.

    ``eps_hat`` and ``z`` are pixel-space; ``sigma`` is a table from
    :func:`sigma_schedule` and is used as a variance.  ``z=None`` means no noise.
    """
    if not 1 <= t <= schedule.T:
        raise OutOfRange(f"t={t} outside [1, {schedule.T}]")
    p_t, p_prev = schedule.psi(t), schedule.psi(t - 1)
    a = np.sqrt(p_prev / p_t)
    b = a * (1.0 - p_t / p_prev) / np.sqrt(1.0 - p_t)
    out = a * u_t - b * dft2(eps_hat)
    if z is not None:
        out = out + np.sqrt(sigma[t]) * dft2(z)
    return out


def _sample_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def sample(schedule: FilterSchedule, denoiser: Denoiser, sigma_variant: SigmaVariant | str | None,
           seed: int, n: int, channels: int | None = None, chunk: int = 1000) -> np.ndarray:
    """Generate ``n`` images by running the reverse chain from white noise.

    Each sample owns an RNG stream derived from ``(seed, index)``, so results do
    not depend on ``chunk``.  No noise is added on the final step ``t = 1``.
    Returns an ``(n, C, H, W)`` array.
    """
    T = schedule.T
    H, W = schedule.shape
    if channels is None:
        channels = getattr(denoiser, "channels", 1)
    if sigma_variant is None:
        sigma_variant = default_variant(T)
    sig = sigma_schedule(schedule, sigma_variant)
    out = np.empty((n, channels, H, W))
    for start in range(0, n, chunk):
        idx = range(start, min(n, start + chunk))
        noise = np.stack([_sample_stream(seed, i).standard_normal((T, channels, H, W)) for i in idx])
        u = dft2(noise[:, 0])
        for t in range(T, 0, -1):
            x_t = idft2(u)
            eps_hat = denoiser.predict(x_t, t)
            z = noise[:, T - t + 1] if t > 1 else None
            u = reverse_step(u, t, eps_hat, schedule, sig, z)
        out[start:start + len(idx)] = idft2(u)
    return out
