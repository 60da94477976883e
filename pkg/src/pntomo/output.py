"""File writers for images, sinograms, and numeric tables."""

from __future__ import annotations

import numpy as np


def write_pgm(path, array: np.ndarray, vmin: float | None = None,
              vmax: float | None = None, flip: bool = False) -> None:
    """Write a 2-D array as a 16-bit binary PGM (P5, big-endian samples).

    Values are mapped linearly from [vmin, vmax] (data range by default)
    to 0..65535.  Pass flip=True for spatial images stored with row index
    increasing upward, so the file shows them right side up.
    """
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    lo = float(arr.min()) if vmin is None else float(vmin)
    hi = float(arr.max()) if vmax is None else float(vmax)
    if hi > lo:
        scaled = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    else:
        scaled = np.zeros_like(arr)
    pix = np.round(scaled * 65535.0).astype(">u2")
    if flip:
        pix = pix[::-1, :]
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())


def write_csv(path, array: np.ndarray, header: str = "") -> None:
    """Write an array as comma-separated values, one row per line."""
    arr = np.atleast_2d(np.asarray(array, dtype=np.float64))
    np.savetxt(path, arr, delimiter=",", header=header, comments="")


def write_sinogram_csv(path, counts: np.ndarray, n_rays: int) -> None:
    """Write per-ray counts as rows of angle_index,ray_index,count."""
    flat = np.asarray(counts).ravel()
    with open(path, "w") as fh:
        fh.write("angle_index,ray_index,count\n")
        for j, c in enumerate(flat):
            fh.write(f"{j // n_rays},{j % n_rays},{c:g}\n")
