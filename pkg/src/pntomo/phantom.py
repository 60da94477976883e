"""Shepp-Logan ground truth and transmission data simulation.

Images are (n, n) float arrays indexed [iy, ix] with iy increasing upward,
so flattening in C order matches the system matrix pixel numbering.
Sinograms are flat vectors ordered angle-major (angle_index * n_rays +
ray_index), or (n_angles, n_rays) arrays where 2-D layout is convenient.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import SystemMatrix

# Ten-ellipse modified Shepp-Logan table: additive intensity, semi-axes
# (a along x, b along y), center, rotation in degrees counter-clockwise.
_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def shepp_logan(n: int) -> np.ndarray:
    """Rasterize the ten-ellipse head phantom on an n x n grid over [-1,1]^2.

    Grid points are (i - (n-1)/2) / ((n-1)/2), so the extreme pixels sit
    exactly at -1 and 1 and the corners are outside every ellipse.  Values
    are the sum of intensities of the ellipses covering each point, clamped
    to be nonnegative.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    coords = (np.arange(n) - (n - 1) / 2.0) / ((n - 1) / 2.0)
    x = coords[None, :]
    y = coords[:, None]
    img = np.zeros((n, n))
    for amp, a, b, x0, y0, phi in _ELLIPSES:
        c = math.cos(math.radians(phi))
        s = math.sin(math.radians(phi))
        xr = (x - x0) * c + (y - y0) * s
        yr = -(x - x0) * s + (y - y0) * c
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += amp
    return np.maximum(img, 0.0)


def simulate_noiseless(A: SystemMatrix, x_true: np.ndarray,
                       i0: float) -> np.ndarray:
    """Expected photon counts i0 * exp(-A x_true) per ray.

    All entries lie in (0, i0]; rays missing the object read exactly i0.
    """
    if not i0 > 0:
        raise ValueError(f"i0 must be positive, got {i0}")
    return i0 * np.exp(-A.forward(np.asarray(x_true, dtype=np.float64).ravel()))


def _poisson_invert(mu: float, u: float) -> int:
    """Poisson draw by sequential CDF search; one uniform per variate."""
    p = math.exp(-mu)
    s = p
    k = 0
    while u > s:
        k += 1
        p *= mu / k
        s += p
        if k > 10_000_000:  # unreachable for mu < 30; guards bad input
            break
    return k


def _poisson_ptrs(mu: float, rand) -> int:
    """Poisson draw by transformed rejection with squeeze (valid mu >= 10)."""
    slam = math.sqrt(mu)
    loglam = math.log(mu)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    while True:
        u = rand() - 0.5
        v = rand()
        us = 0.5 - abs(u)
        k = math.floor((2.0 * a / us + b) * u + mu + 0.43)
        if us >= 0.07 and v <= vr:
            return int(k)
        if k < 0 or (us < 0.013 and v > us):
            continue
        if (math.log(v) + math.log(invalpha) - math.log(a / (us * us) + b)
                <= k * loglam - mu - math.lgamma(k + 1.0)):
            return int(k)


def poisson_counts(means: np.ndarray, seed: int) -> np.ndarray:
    """Seed-reproducible independent Poisson draws, one per entry.

    The algorithm is pinned (CDF inversion below mean 30, transformed
    rejection above) and consumes uniforms from a PCG64 stream in flat
    C order, so a given seed yields the same counts on any platform.
    Zero means yield zero counts without consuming randomness.
    """
    means = np.asarray(means, dtype=np.float64)
    if (means < 0).any():
        raise ValueError("Poisson means must be nonnegative")
    rand = np.random.Generator(np.random.PCG64(seed)).random
    out = np.empty(means.size, dtype=np.int64)
    flat = means.ravel()
    for j in range(flat.size):
        mu = flat[j]
        if mu == 0.0:
            out[j] = 0
        elif mu < 30.0:
            out[j] = _poisson_invert(mu, rand())
        else:
            out[j] = _poisson_ptrs(mu, rand)
    return out.reshape(means.shape)


def simulate_noisy(d_noiseless: np.ndarray, seed: int) -> np.ndarray:
    """Poisson-noisy sinogram with entry j ~ Poisson(d_noiseless_j)."""
    return poisson_counts(d_noiseless, seed)


def negative_log_display(d: np.ndarray, i0: float, clip_max: float,
                         n_rays: int | None = None) -> np.ndarray:
    """Log-scaled sinogram min(-ln(max(d,1)/i0), clip_max) for display.

    Zero-count detectors map to the clip ceiling instead of infinity.
    If n_rays is given the flat sinogram is reshaped to (n_angles, n_rays).
    """
    if not clip_max > 0:
        raise ValueError(f"clip_max must be positive, got {clip_max}")
    d = np.asarray(d, dtype=np.float64)
    img = np.minimum(-np.log(np.maximum(d, 1.0) / i0), clip_max)
    if n_rays is not None:
        img = img.reshape(-1, n_rays)
    return img
