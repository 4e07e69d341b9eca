"""Dataset power spectra and the inverse power-law fit ``D(f) = c1 / |c2 + f|**m``.

Images are ``numpy`` arrays of shape ``(C, H, W)`` with values in ``[-1, 1]``;
datasets are arrays of shape ``(N, C, H, W)`` or sequences of images.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import EmptyDataset, MixedShapes, NonConvergence, SingularBin, UnsupportedFormat
from .tensorio import read_tensor

__all__ = [
    "PowerSpectrum",
    "SpectrumFit",
    "load_image",
    "load_images",
    "save_image",
    "frequency_grid",
    "signed_frequencies",
    "compute_power_spectrum",
    "fit_spectrum",
    "model_power",
    "model_spectrum",
]

SINGULAR_TOL = 1e-6
DC_CLAMP = 1e6
DC_MIN_BASE = 1e-3
IMAGE_SUFFIXES = {".pgm", ".png", ".spdt"}


# --------------------------------------------------------------------------- ingestion

def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit PGM (P5) or PNG file as a ``(C, H, W)`` float array in [-1, 1].

    ``.spdt`` tensor files are returned as stored (no rescaling).
    """
    path = Path(path)
    if path.suffix.lower() == ".spdt":
        return read_tensor(path)
    try:
        with Image.open(path) as im:
            fmt, mode = im.format, im.mode
            if fmt == "PPM" and mode == "L":
                arr = np.asarray(im, dtype=np.uint8)[None]
            elif fmt == "PNG" and mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.uint8)
                arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            else:
                raise UnsupportedFormat(f"{path}: {fmt} mode {mode} is not 8-bit PGM or PNG")
    except (OSError, SyntaxError) as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    return arr.astype(float) / 127.5 - 1.0


def save_image(path: str | Path, x: np.ndarray) -> None:
    """Write a ``(C, H, W)`` image in [-1, 1] as PGM (C=1) or PNG, rounding to 8 bits."""
    path = Path(path)
    x = np.asarray(x, dtype=float)
    q = np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if x.shape[0] == 1:
        im = Image.fromarray(q[0])
    elif x.shape[0] == 3:
        im = Image.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0)))
    else:
        raise UnsupportedFormat(f"cannot encode {x.shape[0]} channels as an image")
    im.save(path, format="PPM" if path.suffix.lower() == ".pgm" and x.shape[0] == 1 else "PNG")


def load_images(source: str | Path | Iterable[str | Path]) -> np.ndarray:
    """Load a directory (sorted by name) or an explicit list of image files.

    Returns an ``(N, C, H, W)`` array.  Raises :class:`MixedShapes` if the images
    disagree in shape and :class:`EmptyDataset` if nothing was found.
    """
    if isinstance(source, (str, Path)):
        root = Path(source)
        if not root.is_dir():
            raise UnsupportedFormat(f"{root} is not a directory")
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        files = [Path(p) for p in source]
    if not files:
        raise EmptyDataset("no PGM/PNG/SPDT images found")
    images = [load_image(p) for p in files]
    shape = images[0].shape
    for p, im in zip(files, images):
        if im.shape != shape:
            raise MixedShapes(f"{p} has shape {im.shape}, expected {shape}")
    return np.stack(images)


# --------------------------------------------------------------------------- spectra

def signed_frequencies(n: int) -> np.ndarray:
    """Integer frequency index per DFT bin: ``i`` if ``i <= n/2`` else ``i - n``."""
    i = np.arange(n)
    return np.where(i <= n / 2, i, i - n)


def frequency_grid(height: int, width: int) -> np.ndarray:
    """Radial frequency norm ``sqrt(fx**2 + fy**2)`` for every bin of an H x W DFT."""
    fx = signed_frequencies(height)[:, None]
    fy = signed_frequencies(width)[None, :]
    return np.sqrt(fx * fx + fy * fy)


@dataclass
class PowerSpectrum:
    """Mean squared unitary-DFT magnitude per channel and bin."""

    power: np.ndarray  # (C, H, W)
    count: int

    @property
    def channels(self) -> int:
        return self.power.shape[0]

    @property
    def height(self) -> int:
        return self.power.shape[1]

    @property
    def width(self) -> int:
        return self.power.shape[2]

    def merge(self, other: "PowerSpectrum") -> "PowerSpectrum":
        """Combine two partial estimates (count-weighted mean)."""
        if other.power.shape != self.power.shape:
            raise MixedShapes(f"{other.power.shape} vs {self.power.shape}")
        n = self.count + other.count
        power = (self.power * self.count + other.power * other.count) / n
        return PowerSpectrum(power, n)

    def to_json(self) -> dict:
        return {
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "count": self.count,
            "power": [float(v) for v in self.power.ravel()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PowerSpectrum":
        shape = (int(obj["channels"]), int(obj["height"]), int(obj["width"]))
        power = np.asarray(obj["power"], dtype=float).reshape(shape)
        return cls(power, int(obj["count"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "PowerSpectrum":
        return cls.from_json(json.loads(Path(path).read_text()))

    def rows(self):
        """Yield ``(channel, fx, fy, f, power)`` for every bin (CSV export)."""
        fx = signed_frequencies(self.height)
        fy = signed_frequencies(self.width)
        for c in range(self.channels):
            for i in range(self.height):
                for j in range(self.width):
                    yield c, int(fx[i]), int(fy[j]), math.hypot(fx[i], fy[j]), float(self.power[c, i, j])


def compute_power_spectrum(images: np.ndarray | Sequence[np.ndarray], batch_size: int = 1024) -> PowerSpectrum:
    """Average ``|DFT|**2`` (unitary normalisation) over a dataset, per channel."""
    if isinstance(images, np.ndarray):
        if images.ndim == 3:
            images = images[None]
        n = images.shape[0]
        batches = (images[i:i + batch_size] for i in range(0, n, batch_size))
    else:
        images = list(images)
        n = len(images)
        if n and len({np.shape(im) for im in images}) > 1:
            raise MixedShapes("images have differing shapes")
        batches = (np.stack(images[i:i + batch_size]) for i in range(0, n, batch_size))
    if n == 0:
        raise EmptyDataset("cannot compute a power spectrum of zero images")
    total = None
    for batch in batches:
        p = np.abs(np.fft.fft2(np.asarray(batch, dtype=float), norm="ortho")) ** 2
        s = p.sum(axis=0)
        total = s if total is None else total + s
    return PowerSpectrum(total / n, n)


# --------------------------------------------------------------------------- model fit

@dataclass(frozen=True)
class SpectrumFit:
    c1: float
    c2: float
    m: float
    residual: float = 0.0
    fixed_m: bool = True

    def to_json(self) -> dict:
        return {k: (bool(v) if k == "fixed_m" else float(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "SpectrumFit":
        return cls(float(obj["c1"]), float(obj["c2"]), float(obj["m"]),
                   float(obj.get("residual", 0.0)), bool(obj.get("fixed_m", True)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SpectrumFit":
        return cls.from_json(json.loads(Path(path).read_text()))


def model_power(fit: SpectrumFit, f):
    """``c1 / |c2 + f|**m``; raises :class:`SingularBin` when ``|c2 + f| <= 1e-6``."""
    base = np.abs(fit.c2 + np.asarray(f, dtype=float))
    if np.any(base <= SINGULAR_TOL):
        raise SingularBin(f"|c2 + f| <= {SINGULAR_TOL:g} for c2={fit.c2}")
    out = fit.c1 / base ** fit.m
    return float(out) if np.ndim(out) == 0 else out


def model_spectrum(fit: SpectrumFit, height: int, width: int) -> np.ndarray:
    """Model power on the H x W frequency grid.

    The DC bin is not covered by the fit; it is evaluated from the model with
    ``|c2|`` floored at 1e-3 and the result clamped to at most 1e6.
    """
    f = frequency_grid(height, width)
    d = np.empty_like(f)
    ac = f > 0
    d[ac] = model_power(fit, f[ac])
    dc = fit.c1 / max(abs(fit.c2), DC_MIN_BASE) ** fit.m
    d[~ac] = min(dc, DC_CLAMP)
    return d


def _fit_design(ps: PowerSpectrum) -> tuple[np.ndarray, np.ndarray]:
    f = np.broadcast_to(frequency_grid(ps.height, ps.width), ps.power.shape)
    keep = (f > 0) & (ps.power > 0)
    return f[keep], np.log(ps.power[keep])


class _SingularIterate(Exception):
    def __init__(self, mask):
        self.mask = mask


def _gauss_newton(f, logp, x0, free_m, fixed_m, max_iter, step_tol):
    """Minimise sum (log p - log c1 + m log|c2 + f|)**2 over x = (log c1, c2[, m])."""

    def unpack(x):
        return x[0], x[1], (x[2] if free_m else fixed_m)

    def residuals(x):
        logc1, c2, m = unpack(x)
        base = np.abs(c2 + f)
        bad = base < SINGULAR_TOL
        if np.any(bad):
            raise _SingularIterate(bad)
        return logp - logc1 + m * np.log(base)

    x = np.array(x0, dtype=float)
    r = residuals(x)
    cost = r @ r
    for _ in range(max_iter):
        logc1, c2, m = unpack(x)
        cols = [-np.ones_like(f), m / (c2 + f)]
        if free_m:
            cols.append(np.log(np.abs(c2 + f)))
        jac = np.stack(cols, axis=1)
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        alpha = 1.0
        while alpha > 1e-12:
            trial = x + alpha * step
            r_trial = residuals(trial)
            if r_trial @ r_trial <= cost:
                break
            alpha *= 0.5
        else:
            # no descent along the Gauss-Newton direction: stationary to rounding
            return x, r
        x, r, cost = trial, r_trial, r_trial @ r_trial
        if np.linalg.norm(alpha * step) < step_tol:
            return x, r
    raise NonConvergence(f"Gauss-Newton did not converge in {max_iter} iterations")


def fit_spectrum(ps: PowerSpectrum, fix_m: float | None = None, max_iter: int = 200,
                 step_tol: float = 1e-10) -> SpectrumFit:
    """Least-squares fit of ``log power`` against ``log(c1 / |c2 + f|**m)``.

    All channels are pooled; the DC bin and bins with zero power are excluded.
    With ``fix_m`` the exponent is held fixed, otherwise it is fitted too.
    Gauss-Newton with backtracking, started from a log-log regression at c2=0.
    If an iterate lands on a singular bin, that bin is dropped and the fit is
    restarted once.
    """
    f, logp = _fit_design(ps)
    if np.unique(f).size < 3:
        raise ValueError("need at least 3 distinct frequency norms with positive power")
    free_m = fix_m is None
    for attempt in range(2):
        logf = np.log(f)
        if free_m:
            slope, intercept = np.polyfit(logf, logp, 1)
            x0 = [intercept, 0.0, -slope]
        else:
            x0 = [np.mean(logp + fix_m * logf), 0.0]
        try:
            x, r = _gauss_newton(f, logp, x0, free_m, fix_m, max_iter, step_tol)
            break
        except _SingularIterate as exc:
            if attempt:
                raise SingularBin(f"{int(exc.mask.sum())} bins singular after restart") from None
            f, logp = f[~exc.mask], logp[~exc.mask]
    m = float(x[2]) if free_m else float(fix_m)
    resid = float(np.sqrt(np.mean(r * r)))
    return SpectrumFit(float(np.exp(x[0])), float(x[1]), m, resid, not free_m)
