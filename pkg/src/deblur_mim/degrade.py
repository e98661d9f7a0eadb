"""Image degradation operators: blurs, speckle-reducing diffusion, noise.

Images are 2-D float64 arrays (grayscale).  Every operator is a pure function
of its inputs; the only randomness (additive noise) comes from an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SRAD_FLOOR = 1e-6
SRAD_MAX_DT = 0.25


class DegradeError(ValueError):
    pass


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise DegradeError(f"expected a non-empty 2-D image, got shape {img.shape}")
    return img


def _check_odd(k: int, what: str = "kernel size") -> None:
    if int(k) != k or k < 1 or k % 2 == 0:
        raise DegradeError(f"{what} must be an odd integer >= 1, got {k}")


# ---------------------------------------------------------------------------
# kernels


def gaussian_kernel_1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if not sigma > 0:
        raise DegradeError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = math.ceil(3.0 * sigma)
    u = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(u * u) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """Truncated 2-D Gaussian, renormalized to sum to one.

    The default truncation radius is ``ceil(3 * sigma)``.
    """
    g = gaussian_kernel_1d(sigma, radius)
    k = np.outer(g, g)
    return k / k.sum()


def box_kernel(k: int) -> np.ndarray:
    _check_odd(k)
    return np.full((k, k), 1.0 / (k * k))


def motion_kernel(k: int, angle: float = 0.0) -> np.ndarray:
    """Normalized line of length ``k`` through the center, at ``angle`` degrees.

    Cells are picked by rounding points sampled along the line to the
    nearest grid position.
    """
    _check_odd(k)
    r = k // 2
    theta = math.radians(angle)
    ker = np.zeros((k, k))
    for t in np.linspace(-r, r, k):
        row = r - int(round(t * math.sin(theta)))
        col = r + int(round(t * math.cos(theta)))
        ker[row, col] = 1.0
    return ker / ker.sum()


def disk_kernel(radius: int) -> np.ndarray:
    if int(radius) != radius or radius < 1:
        raise DegradeError(f"defocus radius must be an integer >= 1, got {radius}")
    u = np.arange(-radius, radius + 1)
    inside = (u[:, None] ** 2 + u[None, :] ** 2) <= radius * radius
    return inside / inside.sum()


# ---------------------------------------------------------------------------
# convolution


def _pad(img: np.ndarray, ry: int, rx: int) -> np.ndarray:
    return np.pad(img, ((ry, ry), (rx, rx)), mode="reflect")


KERNEL_SUM_TOL = 1e-9


def _check_normalized(kernel: np.ndarray) -> None:
    if abs(kernel.sum() - 1.0) > KERNEL_SUM_TOL:
        raise DegradeError(f"blur kernels must sum to one, got {kernel.sum()!r}")


def convolve2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 2-D convolution with reflect padding, for unit-sum kernels.

    Evaluated as ``img + sum_k w_k (neighbor_k - img)``, which equals the
    plain weighted sum when the weights sum to one and keeps constant
    regions exactly constant.
    """
    img = _check_image(img)
    kernel = np.asarray(kernel, dtype=np.float64)
    ky, kx = kernel.shape
    if ky % 2 == 0 or kx % 2 == 0:
        raise DegradeError(f"kernel dims must be odd, got {kernel.shape}")
    _check_normalized(kernel)
    padded = _pad(img, ky // 2, kx // 2)
    windows = sliding_window_view(padded, kernel.shape)
    # convolution flips the kernel
    return img + np.einsum("ijab,ab->ij", windows - img[:, :, None, None], kernel[::-1, ::-1])


def _convolve_rows(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    padded = np.pad(img, ((0, 0), (r, r)), mode="reflect")
    acc = np.zeros_like(img)
    w = img.shape[1]
    for i, gi in enumerate(g[::-1]):
        acc += gi * (padded[:, i:i + w] - img)
    return img + acc


def gaussian_blur(img: np.ndarray, sigma: float, radius: int | None = None) -> np.ndarray:
    """Gaussian blur as a row pass followed by a column pass."""
    img = _check_image(img)
    g = gaussian_kernel_1d(sigma, radius)
    return _convolve_rows(_convolve_rows(img, g).T, g).T


def mean_blur(img: np.ndarray, k: int = 5) -> np.ndarray:
    return convolve2d(img, box_kernel(k))


def median_blur(img: np.ndarray, k: int = 5) -> np.ndarray:
    img = _check_image(img)
    _check_odd(k)
    r = k // 2
    windows = sliding_window_view(_pad(img, r, r), (k, k))
    return np.median(windows.reshape(img.shape + (k * k,)), axis=-1)


def motion_blur(img: np.ndarray, k: int = 5, angle: float = 0.0) -> np.ndarray:
    return convolve2d(img, motion_kernel(k, angle))


def defocus_blur(img: np.ndarray, radius: int = 5) -> np.ndarray:
    return convolve2d(img, disk_kernel(radius))


# ---------------------------------------------------------------------------
# speckle-reducing anisotropic diffusion


def srad_diffusivity(img: np.ndarray) -> np.ndarray:
    """Diffusion coefficient field for one SRAD iteration, clamped to [0, 1].

    Uses the instantaneous coefficient of variation at each pixel against a
    whole-image speckle scale ``q0^2 = var / mean^2``.
    """
    p = np.pad(img, 1, mode="edge")
    c = p[1:-1, 1:-1]
    d_n = p[:-2, 1:-1] - c
    d_s = p[2:, 1:-1] - c
    d_w = p[1:-1, :-2] - c
    d_e = p[1:-1, 2:] - c
    q0sq = img.var() / img.mean() ** 2
    if q0sq == 0.0:
        return np.ones_like(img)
    g2 = (d_n ** 2 + d_s ** 2 + d_w ** 2 + d_e ** 2) / (c * c)
    lap = (d_n + d_s + d_w + d_e) / c
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        qsq = (0.5 * g2 - lap * lap / 16.0) / (1.0 + 0.25 * lap) ** 2
        coef = 1.0 / (1.0 + (qsq - q0sq) / (q0sq * (1.0 + q0sq)))
    coef = np.where(np.isnan(coef), 0.0, coef)
    return np.clip(coef, 0.0, 1.0)


def srad_step(img: np.ndarray, dt: float) -> np.ndarray:
    coef = srad_diffusivity(img)
    p = np.pad(img, 1, mode="edge")
    c = p[1:-1, 1:-1]
    d_n = p[:-2, 1:-1] - c
    d_s = p[2:, 1:-1] - c
    d_w = p[1:-1, :-2] - c
    d_e = p[1:-1, 2:] - c
    cp = np.pad(coef, 1, mode="edge")
    # north/west fluxes use the center coefficient, south/east the neighbor's
    div = coef * d_n + cp[2:, 1:-1] * d_s + coef * d_w + cp[1:-1, 2:] * d_e
    return img + dt * div


def srad(img: np.ndarray, n_iter: int = 40, dt: float = 0.1) -> np.ndarray:
    """Iterate the SRAD update ``n_iter`` times with time step ``dt``."""
    img = _check_image(img)
    if int(n_iter) != n_iter or n_iter < 0:
        raise DegradeError(f"SRAD iteration count must be >= 0, got {n_iter}")
    if not 0.0 < dt <= SRAD_MAX_DT:
        raise DegradeError(f"SRAD time step must lie in (0, {SRAD_MAX_DT}], got {dt}")
    if n_iter == 0:
        return img.copy()
    # the coefficient divides by intensity; lift zeros, undo on return
    shift = SRAD_FLOOR if (img == 0).any() else 0.0
    x = img + shift
    for k in range(int(n_iter)):
        x = srad_step(x, dt)
        if not np.isfinite(x).all():
            raise DegradeError(f"SRAD produced non-finite values at iteration {k}")
    return x - shift if shift else x


# ---------------------------------------------------------------------------
# noise


def additive_noise(img: np.ndarray, sigma_n: float, rng: np.random.Generator) -> np.ndarray:
    """Add zero-mean Gaussian noise.  The result is not clamped."""
    img = _check_image(img)
    if sigma_n < 0:
        raise DegradeError(f"noise level must be >= 0, got {sigma_n}")
    if sigma_n == 0:
        return img.copy()
    return img + rng.normal(0.0, sigma_n, size=img.shape)


# ---------------------------------------------------------------------------
# dispatch

METHODS = ("identity", "gaussian", "srad", "mean", "median", "motion", "defocus", "noise")

_DEFAULTS: dict[str, dict[str, Any]] = {
    "identity": {},
    "gaussian": {"sigma": 1.1},
    "srad": {"n_iter": 40, "dt": 0.1},
    "mean": {"k": 5},
    "median": {"k": 5},
    "motion": {"k": 5, "angle": 0.0},
    "defocus": {"radius": 5},
    "noise": {"sigma_n": 0.1},
}

_INT_PARAMS = {"n_iter", "k", "radius"}


@dataclass(frozen=True)
class DegradeSpec:
    """One degradation operator and its parameters."""

    method: str = "identity"
    params: tuple = ()

    @classmethod
    def make(cls, method: str, **params) -> "DegradeSpec":
        if method not in _DEFAULTS:
            raise DegradeError(f"unknown degradation method {method!r}; expected one of {METHODS}")
        unknown = set(params) - set(_DEFAULTS[method])
        if unknown:
            raise DegradeError(f"{method}: unknown parameter(s) {sorted(unknown)}")
        merged = dict(_DEFAULTS[method])
        merged.update(params)
        for key, val in merged.items():
            merged[key] = int(val) if key in _INT_PARAMS else float(val)
        spec = cls(method, tuple(sorted(merged.items())))
        spec.validate()
        return spec

    @property
    def kwargs(self) -> dict:
        return dict(self.params)

    def validate(self) -> None:
        p = self.kwargs
        m = self.method
        if m == "gaussian" and not p["sigma"] > 0:
            raise DegradeError("gaussian: sigma must be > 0")
        if m == "srad":
            if p["n_iter"] < 0:
                raise DegradeError("srad: n_iter must be >= 0")
            if not 0 < p["dt"] <= SRAD_MAX_DT:
                raise DegradeError(f"srad: dt must lie in (0, {SRAD_MAX_DT}]")
        if m in ("mean", "median", "motion"):
            _check_odd(p["k"])
        if m == "defocus" and p["radius"] < 1:
            raise DegradeError("defocus: radius must be >= 1")
        if m == "noise" and p["sigma_n"] < 0:
            raise DegradeError("noise: sigma_n must be >= 0")

    def to_dict(self) -> dict:
        return {"method": self.method, "params": self.kwargs}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradeSpec":
        return cls.make(d["method"], **d.get("params", {}))

    def __str__(self):
        args = ",".join(f"{k}={v}" for k, v in self.params)
        return f"{self.method}({args})"


def apply(spec: DegradeSpec, img: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    p = spec.kwargs
    m = spec.method
    if m == "identity":
        return _check_image(img).copy()
    if m == "gaussian":
        return gaussian_blur(img, p["sigma"])
    if m == "srad":
        return srad(img, p["n_iter"], p["dt"])
    if m == "mean":
        return mean_blur(img, p["k"])
    if m == "median":
        return median_blur(img, p["k"])
    if m == "motion":
        return motion_blur(img, p["k"], p["angle"])
    if m == "defocus":
        return defocus_blur(img, p["radius"])
    if m == "noise":
        if rng is None:
            raise DegradeError("noise degradation needs a random generator")
        return additive_noise(img, p["sigma_n"], rng)
    raise DegradeError(f"unknown degradation method {m!r}")


def apply_batch(spec: DegradeSpec, imgs: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    return np.stack([apply(spec, im, rng) for im in imgs])


__all__ = [
    "DegradeError", "DegradeSpec", "METHODS", "additive_noise", "apply", "apply_batch",
    "box_kernel", "convolve2d", "defocus_blur", "disk_kernel", "gaussian_blur",
    "gaussian_kernel", "gaussian_kernel_1d", "mean_blur", "median_blur", "motion_blur",
    "motion_kernel", "srad", "srad_diffusivity", "srad_step",
]
