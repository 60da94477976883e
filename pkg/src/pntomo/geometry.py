"""Parallel-beam acquisition geometry and the sparse ray-path system matrix.

The scanner model is a square field of view sampled on an n x n pixel grid,
with equispaced view angles and equispaced detector bins spanning the FOV
width.  The system matrix A holds exact line/pixel intersection lengths
(in mm) computed by Siddon-style grid traversal, so forward projection Ax
is a discrete line integral and back projection is its exact adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# Ray direction components below this magnitude are treated as exactly
# axis-aligned, so 90-degree views produce exact per-pixel lengths.
_AXIS_EPS = 1e-12


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam acquisition description.

    Angles are theta_v = v * span_deg / n_angles for v = 0..n_angles-1
    (angle 0 projects along the image x-axis).  Detector bins are centered
    at offsets (k + 0.5) / n_rays * fov_mm - fov_mm / 2, symmetric about
    the rotation center (the image center).
    """

    n_pixels: int
    fov_mm: float
    n_angles: int
    span_deg: float
    n_rays: int

    @property
    def pixel_size(self) -> float:
        """Pixel side length in mm."""
        return self.fov_mm / self.n_pixels

    @property
    def n_rows(self) -> int:
        """Total number of measurement rays (angles x detector bins)."""
        return self.n_angles * self.n_rays

    @property
    def n_cols(self) -> int:
        """Number of image pixels."""
        return self.n_pixels * self.n_pixels

    def angles_deg(self) -> np.ndarray:
        return np.arange(self.n_angles) * (self.span_deg / self.n_angles)

    def detector_offsets(self) -> np.ndarray:
        k = np.arange(self.n_rays)
        return (k + 0.5) / self.n_rays * self.fov_mm - self.fov_mm / 2.0


def build_geometry(n_pixels: int, fov_mm: float, n_angles: int,
                   span_deg: float, n_rays: int) -> Geometry:
    """Validate scanner parameters and return a Geometry.

    Raises ValueError for non-positive dimensions (n_pixels must be >= 2).
    """
    if n_pixels < 2:
        raise ValueError(f"n_pixels must be >= 2, got {n_pixels}")
    if n_angles < 1 or n_rays < 1:
        raise ValueError("n_angles and n_rays must be positive")
    if not fov_mm > 0:
        raise ValueError(f"fov_mm must be positive, got {fov_mm}")
    if not span_deg > 0:
        raise ValueError(f"span_deg must be positive, got {span_deg}")
    return Geometry(int(n_pixels), float(fov_mm), int(n_angles),
                    float(span_deg), int(n_rays))


@dataclass
class SystemMatrix:
    """Sparse ray-path operator with forward and adjoint application.

    ``matrix`` is CSR for fast Ax; ``matrix_t`` is an explicit CSR
    transpose so A^T t streams row-wise as well.  Immutable after
    construction; safe for concurrent read-only application.
    """

    geometry: Geometry
    matrix: sp.csr_matrix
    matrix_t: sp.csr_matrix
    _opnorm: float | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Apply A to a flat image vector: line integrals per ray."""
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.geometry.n_cols:
            raise ValueError(
                f"image has {x.size} entries, expected {self.geometry.n_cols}")
        return self.matrix.dot(x)

    def adjoint(self, t: np.ndarray) -> np.ndarray:
        """Apply A^T to a flat ray-domain vector."""
        t = np.asarray(t, dtype=np.float64).ravel()
        if t.size != self.geometry.n_rows:
            raise ValueError(
                f"sinogram has {t.size} entries, expected {self.geometry.n_rows}")
        return self.matrix_t.dot(t)

    def spectral_norm(self, n_iter: int = 50, tol: float = 1e-6) -> float:
        """Power-method estimate of ||A||_2 (cached, deterministic)."""
        if self._opnorm is None:
            v = np.ones(self.geometry.n_cols) / np.sqrt(self.geometry.n_cols)
            lam = 0.0
            for _ in range(n_iter):
                w = self.matrix_t.dot(self.matrix.dot(v))
                lam_new = float(np.linalg.norm(w))
                if lam_new == 0.0:
                    lam = 0.0
                    break
                v = w / lam_new
                if abs(lam_new - lam) <= tol * lam_new:
                    lam = lam_new
                    break
                lam = lam_new
            self._opnorm = float(np.sqrt(lam))
        return self._opnorm


def forward_project(A: SystemMatrix, x: np.ndarray) -> np.ndarray:
    """Return Ax for a flat image vector of n_pixels**2 entries."""
    return A.forward(x)


def back_project(A: SystemMatrix, t: np.ndarray) -> np.ndarray:
    """Return A^T t for a flat ray-domain vector of n_angles*n_rays entries."""
    return A.adjoint(t)


def _trace_ray(p0x: float, p0y: float, ux: float, uy: float,
               n: int, half: float, h: float):
    """Siddon traversal of one ray through the [-half, half]^2 pixel grid.

    Returns (flat pixel indices, intersection lengths).  The ray is the
    line p0 + s*u with u unit-length; segments shorter than 1e-9 * h
    (floating-point corner slivers) are dropped.
    """
    # Entry/exit parameters against the bounding box (robust slab test).
    s_lo, s_hi = -np.inf, np.inf
    for p0c, uc in ((p0x, ux), (p0y, uy)):
        if abs(uc) < _AXIS_EPS:
            if not (-half <= p0c <= half):
                return None
        else:
            s0 = (-half - p0c) / uc
            s1 = (half - p0c) / uc
            s_lo = max(s_lo, min(s0, s1))
            s_hi = min(s_hi, max(s0, s1))
    if not s_hi > s_lo:
        return None

    params = [np.array([s_lo, s_hi])]
    planes = -half + h * np.arange(n + 1)
    if abs(ux) >= _AXIS_EPS:
        sx = (planes - p0x) / ux
        params.append(sx[(sx > s_lo) & (sx < s_hi)])
    if abs(uy) >= _AXIS_EPS:
        sy = (planes - p0y) / uy
        params.append(sy[(sy > s_lo) & (sy < s_hi)])
    s = np.unique(np.concatenate(params))

    lengths = np.diff(s)
    mids = 0.5 * (s[:-1] + s[1:])
    keep = lengths > 1e-9 * h
    if not keep.any():
        return None
    lengths = lengths[keep]
    mids = mids[keep]

    cols = np.floor((p0x + mids * ux + half) / h).astype(np.int64)
    rows = np.floor((p0y + mids * uy + half) / h).astype(np.int64)
    ok = (cols >= 0) & (cols < n) & (rows >= 0) & (rows < n)
    if not ok.all():
        cols, rows, lengths = cols[ok], rows[ok], lengths[ok]
    if lengths.size == 0:
        return None
    return rows * n + cols, lengths


def build_system_matrix(g: Geometry) -> SystemMatrix:
    """Trace every ray of the geometry and assemble A in CSR form.

    Entry (j, i) is the length in mm of the path of ray j through pixel i.
    Ray index j = angle_index * n_rays + detector_index.  Rays missing the
    image produce empty rows.  Deterministic for a fixed geometry.
    """
    n = g.n_pixels
    h = g.pixel_size
    half = g.fov_mm / 2.0
    angles = np.deg2rad(g.angles_deg())
    offsets = g.detector_offsets()

    rows_out: list[np.ndarray] = []
    cols_out: list[np.ndarray] = []
    vals_out: list[np.ndarray] = []
    for v, th in enumerate(angles):
        ux, uy = np.cos(th), np.sin(th)
        # Detector offset axis is perpendicular to the ray direction.
        wx, wy = -uy, ux
        for k, off in enumerate(offsets):
            hit = _trace_ray(off * wx, off * wy, ux, uy, n, half, h)
            if hit is None:
                continue
            idx, lengths = hit
            rows_out.append(np.full(idx.shape, v * g.n_rays + k, dtype=np.int64))
            cols_out.append(idx)
            vals_out.append(lengths)

    if rows_out:
        rows_all = np.concatenate(rows_out)
        cols_all = np.concatenate(cols_out)
        vals_all = np.concatenate(vals_out)
    else:
        rows_all = np.empty(0, dtype=np.int64)
        cols_all = np.empty(0, dtype=np.int64)
        vals_all = np.empty(0, dtype=np.float64)

    coo = sp.coo_matrix((vals_all, (rows_all, cols_all)),
                        shape=(g.n_rows, g.n_cols))
    mat = coo.tocsr()
    mat.sum_duplicates()
    mat_t = mat.T.tocsr()
    return SystemMatrix(geometry=g, matrix=mat, matrix_t=mat_t)


def save_triplets(A: SystemMatrix, path) -> None:
    """Write A as plain-text 'row col value' triplets for cross-validation."""
    coo = A.matrix.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {A.shape[0]} {A.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")


def load_triplets(path) -> sp.csr_matrix:
    """Read a triplet file written by save_triplets."""
    with open(path) as fh:
        header = fh.readline().split()
        n_rows, n_cols = int(header[1]), int(header[2])
        rows, cols, vals = [], [], []
        for line in fh:
            r, c, v = line.split()
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(v))
    return sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()
