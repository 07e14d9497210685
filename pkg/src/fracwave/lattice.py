"""Periodic lattice, fractional Laplacian multiplier, region masks, norms and CG.

Fields are plain numpy arrays: a spatial snapshot has shape ``grid.shape``
(``(N,)`` or ``(N, N)``) and a space-time field has shape
``(grid.nt + 1, *grid.shape)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CGError(RuntimeError):
    """Conjugate gradient did not reach the requested residual."""

    def __init__(self, message, residual, iterations):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def _require_finite(u, what="field"):
    if not np.all(np.isfinite(u)):
        raise ValueError(f"{what} contains non-finite entries")


@dataclass(frozen=True)
class Grid:
    """Periodic box ``[-L/2, L/2)^n`` with ``N`` nodes per axis plus a time grid."""

    n: int
    N: int
    box_length: float
    s: float
    dt: float
    nt: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("only n = 1 or n = 2 is supported")
        if self.N < 8 or self.N & (self.N - 1):
            raise ValueError("N must be a power of two, at least 8")
        if not self.s > 0 or float(self.s).is_integer():
            raise ValueError("s must be positive and non-integer")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.nt < 2:
            raise ValueError("nt must be at least 2")
        if not self.box_length > 0:
            raise ValueError("box_length must be positive")

    @property
    def T(self) -> float:
        return self.nt * self.dt

    @property
    def shape(self) -> tuple:
        return (self.N,) * self.n

    @property
    def axes(self) -> tuple:
        return tuple(range(-self.n, 0))

    @property
    def dx(self) -> float:
        return self.box_length / self.N

    @property
    def cell_volume(self) -> float:
        return self.dx ** self.n

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.nt + 1)

    @property
    def coords(self) -> list:
        """Node coordinates per axis, each of shape ``grid.shape``."""
        x = -0.5 * self.box_length + self.dx * np.arange(self.N)
        return list(np.meshgrid(*([x] * self.n), indexing="ij"))

    def with_time(self, dt=None, nt=None) -> "Grid":
        return Grid(self.n, self.N, self.box_length, self.s,
                    self.dt if dt is None else dt, self.nt if nt is None else nt)

    def header(self, role="field") -> dict:
        return {"n": self.n, "N": self.N, "L": self.box_length, "s": self.s,
                "dt": self.dt, "nt": self.nt, "role": role}

    # --- spectral machinery -------------------------------------------------

    def wavenumber_modulus(self) -> np.ndarray:
        """|xi| on the rfftn frequency lattice."""
        k_full = 2.0 * np.pi * np.fft.fftfreq(self.N, d=self.dx)
        k_half = 2.0 * np.pi * np.fft.rfftfreq(self.N, d=self.dx)
        ks = [k_full] * (self.n - 1) + [k_half]
        mesh = np.meshgrid(*ks, indexing="ij")
        return np.sqrt(sum(k * k for k in mesh))

    def multiplier(self, order: float) -> np.ndarray:
        """Symbol ``|xi|^(2*order)`` with the zero mode set to 0."""
        return _multiplier(self, float(order))

    def fft(self, u):
        if self.n == 1:
            return np.fft.rfft(u, axis=-1)
        return np.fft.rfftn(u, axes=self.axes)

    def ifft(self, uh):
        if self.n == 1:
            return np.fft.irfft(uh, n=self.N, axis=-1)
        return np.fft.irfftn(uh, s=self.shape, axes=self.axes)


_MULT_CACHE: dict = {}


def _multiplier(grid, order):
    key = (grid.n, grid.N, grid.box_length, order)
    m = _MULT_CACHE.get(key)
    if m is None:
        xi = grid.wavenumber_modulus()
        m = np.zeros_like(xi)
        nz = xi > 0
        m[nz] = xi[nz] ** (2.0 * order)
        m.setflags(write=False)
        _MULT_CACHE[key] = m
    return m


def frac_laplacian(grid: Grid, u, order: float | None = None):
    """Apply ``(-Delta)^order`` (default ``order = s``) through the Fourier multiplier.

    Works on a snapshot or on a stack of snapshots (leading axes are batched).
    The zero mode is annihilated for every order, including ``order = 0``.
    """
    if order is None:
        order = grid.s
    if order < 0:
        raise ValueError("order must be non-negative")
    u = np.asarray(u, dtype=float)
    _require_finite(u)
    return grid.ifft(grid.multiplier(order) * grid.fft(u))


def lowpass(grid: Grid, u, keep: int | None = None):
    """Keep the lowest ``keep`` modes per axis (default ``N // 4``)."""
    keep = grid.N // 4 if keep is None else keep
    freqs = np.abs(np.fft.fftfreq(grid.N) * grid.N)
    half = np.arange(grid.N // 2 + 1)
    ks = [freqs] * (grid.n - 1) + [half]
    mesh = np.meshgrid(*ks, indexing="ij")
    window = np.ones(mesh[0].shape)
    for k in mesh:
        window = window * (k < keep / 2)
    return grid.ifft(window * grid.fft(u))


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Interior set ``omega`` and exterior measurement windows ``w1``, ``w2``."""

    grid: Grid
    omega: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    _hash: str = field(default="", repr=False)

    def __post_init__(self):
        for name in ("omega", "w1", "w2"):
            arr = np.asarray(getattr(self, name), dtype=bool)
            if arr.shape != self.grid.shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {self.grid.shape}")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.omega.any():
            raise ValueError("omega is empty")
        if (self.omega & self.w1).any() or (self.omega & self.w2).any() or (self.w1 & self.w2).any():
            raise ValueError("omega, w1, w2 must be pairwise disjoint")
        for name in ("w1", "w2"):
            arr = getattr(self, name)
            if not arr.any():
                raise ValueError(f"{name} is empty")
            if not _has_open_block(arr):
                raise ValueError(f"{name} must contain at least 2 contiguous nodes per axis")
        gap = _periodic_gap(self.omega | self.w1 | self.w2)
        if gap < self.grid.N // 16:
            raise ValueError(
                f"regions leave only {gap} buffer nodes to their periodic images; need {self.grid.N // 16}")
        h = hashlib.sha256()
        for arr in (self.omega, self.w1, self.w2):
            h.update(np.packbits(arr).tobytes())
        object.__setattr__(self, "_hash", h.hexdigest()[:16])

    @property
    def hash(self) -> str:
        return self._hash

    @property
    def exterior(self) -> np.ndarray:
        return ~self.omega

    def region(self, name):
        if name in (None, "all"):
            return None
        if name == "exterior":
            return self.exterior
        return getattr(self, name)

    def project(self, u, region="omega"):
        """Zero every node outside ``region`` (works on batched fields)."""
        sel = self.region(region)
        return u if sel is None else np.where(sel, u, 0.0)

    @classmethod
    def from_boxes(cls, grid, omega, w1, w2):
        """Build masks from axis-aligned boxes ``[(lo, hi), ...]`` (one pair per axis).

        A region may be a single box or a list of boxes.
        """
        return cls(grid, _boxes(grid, omega), _boxes(grid, w1), _boxes(grid, w2))


def _normalize_boxes(spec, n):
    """Accept ``(lo, hi)`` (1D), a box ``[(lo, hi), ...]`` or a list of boxes."""
    spec = [tuple(c) if not np.isscalar(c) else c for c in spec]
    if all(np.isscalar(c) for c in spec):
        return [[tuple(spec)]]
    if all(np.isscalar(c[0]) for c in spec):
        return [[c] for c in spec] if n == 1 else [spec]
    return [list(box) for box in spec]


def _boxes(grid, spec):
    coords = grid.coords
    out = np.zeros(grid.shape, dtype=bool)
    for box in _normalize_boxes(spec, grid.n):
        sel = np.ones(grid.shape, dtype=bool)
        for ax, (lo, hi) in enumerate(box):
            sel &= (coords[ax] > lo) & (coords[ax] < hi)
        out |= sel
    return out


def _runs_1d(line):
    """Lengths of runs of True in a periodic boolean vector."""
    if line.all():
        return [len(line)]
    start = int(np.argmin(line))
    rolled = np.roll(line, -start)
    runs, count = [], 0
    for v in rolled:
        if v:
            count += 1
        elif count:
            runs.append(count)
            count = 0
    if count:
        runs.append(count)
    return runs


def _has_open_block(arr):
    if arr.ndim == 1:
        return max(_runs_1d(arr), default=0) >= 2
    # 2D: some 2x2 block of nodes fully inside
    block = arr & np.roll(arr, -1, 0) & np.roll(arr, -1, 1) & np.roll(np.roll(arr, -1, 0), -1, 1)
    return bool(block.any())


def _periodic_gap(arr):
    """Empty nodes separating the occupied set from its periodic image, worst axis line."""
    gaps = []
    lines = [arr] if arr.ndim == 1 else [arr[i, :] for i in range(arr.shape[0])] + [arr[:, j] for j in range(arr.shape[1])]
    for line in lines:
        if line.any():
            gaps.append(max(_runs_1d(~line), default=0))
    return min(gaps) if gaps else arr.shape[0]


# --- norms and inner products ------------------------------------------------

def inner(grid, u, v, region=None, mask=None):
    w = grid.cell_volume
    if region is not None:
        sel = region if isinstance(region, np.ndarray) else mask.region(region)
        if sel is not None:
            return w * float(np.sum(u[..., sel] * v[..., sel]))
    return w * float(np.sum(u * v))


def l2_norm(grid: Grid, u, region=None, mask: RegionMask | None = None) -> float:
    """Cell-volume weighted L2 norm, optionally restricted to a region.

    ``region`` is a boolean array, ``None``/``"all"``, or a region name
    understood by ``mask``.
    """
    _require_finite(u)
    return float(np.sqrt(inner(grid, u, u, region, mask)))


def hs_tilde_norm(grid: Grid, u) -> float:
    return l2_norm(grid, frac_laplacian(grid, u, grid.s / 2))


def time_weights(grid: Grid, nt: int | None = None) -> np.ndarray:
    """Trapezoid weights on the time levels."""
    nt = grid.nt if nt is None else nt
    w = np.full(nt + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return w


def spacetime_l2(grid: Grid, u, region=None, mask: RegionMask | None = None) -> float:
    """L2 norm over space-time: cell volumes in space, trapezoid rule in time."""
    _require_finite(u)
    sel = region if isinstance(region, np.ndarray) or region is None else mask.region(region)
    sq = u * u
    per_t = sq[:, sel].sum(axis=1) if sel is not None else sq.reshape(len(u), -1).sum(axis=1)
    wt = time_weights(grid, len(u) - 1)
    return float(np.sqrt(grid.cell_volume * np.dot(wt, per_t)))


def sup_norm_in_time(grid, u, norm="l2", mask=None, region=None):
    """max over time levels of a spatial norm (``'l2'`` or ``'hs'``)."""
    if norm == "hs":
        lap = frac_laplacian(grid, u, grid.s / 2)
        vals = np.sqrt(grid.cell_volume * np.sum(lap.reshape(len(u), -1) ** 2, axis=1))
    else:
        sel = region if isinstance(region, np.ndarray) or region is None else mask.region(region)
        sq = u * u
        per_t = sq[:, sel].sum(axis=1) if sel is not None else sq.reshape(len(u), -1).sum(axis=1)
        vals = np.sqrt(grid.cell_volume * per_t)
    return float(vals.max())


# --- operators ---------------------------------------------------------------

def masked_stiffness(grid: Grid, u, mask: RegionMask):
    """``P_omega (-Delta)^s P_omega u``."""
    pu = mask.project(u)
    return mask.project(frac_laplacian(grid, pu, grid.s))


def cg_solve(operator, rhs, tol=1e-10, x0=None, max_iter=None, callback=None):
    """Matrix-free conjugate gradient for a symmetric positive definite ``operator``.

    Stops once ``||r|| <= tol * ||rhs||``.  Raises :class:`CGError` when the
    iteration cap (default ``10 * rhs.size``) is hit.  ``callback(it, x, rel)``
    is called after every iteration with the relative residual.
    """
    rhs = np.asarray(rhs, dtype=float)
    max_iter = 10 * rhs.size if max_iter is None else max_iter
    bnorm = np.sqrt(np.sum(rhs * rhs))
    if bnorm == 0.0:
        return np.zeros_like(rhs)
    if x0 is None:
        x = np.zeros_like(rhs)
        r = rhs.copy()
    else:
        x = np.array(x0, dtype=float)
        r = rhs - operator(x)
    p = r.copy()
    rr = np.sum(r * r)
    target = (tol * bnorm) ** 2
    it = 0
    while rr > target:
        if it >= max_iter:
            raise CGError(f"CG hit the {max_iter}-iteration cap, relative residual "
                          f"{np.sqrt(rr) / bnorm:.3e} > {tol:.1e}", np.sqrt(rr) / bnorm, it)
        Ap = operator(p)
        alpha = rr / np.sum(p * Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = np.sum(r * r)
        p *= rr_new / rr
        p += r
        rr = rr_new
        it += 1
        if callback is not None:
            callback(it, x, np.sqrt(rr) / bnorm)
    return x


def smallest_eigenvalue(grid, mask, iters=200, tol=1e-10, seed=0):
    """Estimate the bottom of the spectrum of ``masked_stiffness`` on omega.

    Power iteration on the inverse (each step one CG solve).  Returns
    ``lambda_min`` so that ``<Au, u> >= lambda_min ||u||^2`` for omega-supported u.
    """
    rng = np.random.default_rng(seed)
    x = mask.project(rng.standard_normal(grid.shape))
    x /= np.linalg.norm(x)
    op = lambda v: masked_stiffness(grid, v, mask)
    mu = 0.0
    for _ in range(iters):
        y = cg_solve(op, x, tol=1e-12)
        mu_new = float(np.sum(x * y))
        x = y / np.linalg.norm(y)
        if abs(mu_new - mu) <= tol * abs(mu_new):
            mu = mu_new
            break
        mu = mu_new
    return 1.0 / mu


# --- binary field format ---------------------------------------------------

def dump_field(path, grid, values, role="field"):
    """Write raw little-endian float64 (row-major) plus ``<path>.json`` header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(values, dtype="<f8")
    arr.tofile(path)
    header = grid.header(role)
    header["shape"] = list(arr.shape)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2))


def dump_mask(path, grid, values, role="mask"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(values, dtype=np.uint8)
    arr.tofile(path)
    header = grid.header(role)
    header["shape"] = list(arr.shape)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2))


def load_field(path):
    """Return ``(grid, values, role)`` from a dumped field or mask."""
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    grid = Grid(header["n"], header["N"], header["L"], header["s"], header["dt"], header["nt"])
    is_mask = header["role"].startswith("mask")
    dtype = np.uint8 if is_mask else "<f8"
    values = np.fromfile(path, dtype=dtype).reshape(header["shape"])
    if is_mask:
        values = values.astype(bool)
    return grid, values, header["role"]


def save_mask(directory, mask: RegionMask):
    directory = Path(directory)
    for name in ("omega", "w1", "w2"):
        dump_mask(directory / f"{name}.u8", mask.grid, getattr(mask, name), role=f"mask:{name}")


def load_mask(directory) -> RegionMask:
    directory = Path(directory)
    arrays = {}
    grid = None
    for name in ("omega", "w1", "w2"):
        grid, arrays[name], _ = load_field(directory / f"{name}.u8")
    return RegionMask(grid, **arrays)


def smooth_bump(grid: Grid, center=0.0, width=0.5, amp=1.0):
    """Compactly supported C-infinity bump ``amp * exp(1 - 1/(1 - |z|^2))``, ``z = (x - center)/width``."""
    coords = grid.coords
    center = np.broadcast_to(np.asarray(center, dtype=float), (grid.n,))
    r2 = sum(((c - c0) / width) ** 2 for c, c0 in zip(coords, center))
    out = np.zeros(grid.shape)
    inside = r2 < 1.0
    out[inside] = amp * np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return out
