"""Sparse LPRM detector readings to a dense flux volume.

The reconstruction is separable. Each detector string gets a natural cubic
spline through its four axial readings, evaluated on the axial nodes (linear
continuation outside the detector span). Each axial plane then gets a
thin-plate spline through the 43 per-string values, evaluated on the radial
grid. Both steps are linear in the readings, so for a fixed layout the whole
map is two small matrices; :class:`LprmInterpolator` caches them.

Geometry: cell-centred nodes at ``(i + 0.5) / N`` on the unit cube. Volumes are
indexed ``[z, ix, iy]`` with ``x = (ix + 0.5) / 30`` and ``y = (iy + 0.5) / 30``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

N_STRINGS = 43
N_LEVELS = 4
GRID = (25, 30, 30)
CORE_CENTER = (0.5, 0.5)
CORE_RADIUS = 0.48
DEFAULT_LEVELS = (0.125, 0.375, 0.625, 0.875)


def node_coords(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def core_mask(nx: int = GRID[1], ny: int = GRID[2], radius: float = CORE_RADIUS) -> np.ndarray:
    x = node_coords(nx)[:, None]
    y = node_coords(ny)[None, :]
    return (x - CORE_CENTER[0]) ** 2 + (y - CORE_CENTER[1]) ** 2 <= radius**2


@dataclass(frozen=True)
class LprmLayout:
    string_positions: np.ndarray  # (43, 2) radial (x, y)
    axial_levels: np.ndarray  # (4,) normalized heights
    grid: tuple = GRID
    core_radius: float = CORE_RADIUS

    def __post_init__(self):
        pos = np.asarray(self.string_positions, dtype=np.float64)
        lev = np.asarray(self.axial_levels, dtype=np.float64)
        object.__setattr__(self, "string_positions", pos)
        object.__setattr__(self, "axial_levels", lev)
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if pos.shape != (N_STRINGS, 2):
            raise ValueError(f"need {N_STRINGS} string positions, got shape {pos.shape}")
        if lev.shape != (N_LEVELS,):
            raise ValueError(f"need {N_LEVELS} axial levels, got shape {lev.shape}")
        if np.any(np.diff(lev) <= 0):
            raise ValueError("axial levels must be strictly increasing")
        gaps = np.diff(lev)
        if not np.allclose(gaps, gaps[0], rtol=1e-9, atol=1e-12):
            raise ValueError("axial levels must be equally spaced")
        if len({tuple(p) for p in pos}) != N_STRINGS:
            raise ValueError("string positions must be distinct")
        r2 = ((pos - np.array(CORE_CENTER)) ** 2).sum(axis=1)
        if np.any(r2 >= self.core_radius**2):
            raise ValueError("all string positions must lie inside the core")

    @property
    def n_sites(self) -> int:
        return len(self.string_positions) * len(self.axial_levels)

    @cached_property
    def mask(self) -> np.ndarray:
        return core_mask(self.grid[1], self.grid[2], self.core_radius)

    def to_dict(self) -> dict:
        return {
            "string_positions": [[float(x), float(y)] for x, y in self.string_positions],
            "axial_levels": [float(z) for z in self.axial_levels],
            "grid": list(self.grid),
            "core_radius": float(self.core_radius),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LprmLayout":
        return cls(
            string_positions=np.array(d["string_positions"], dtype=np.float64),
            axial_levels=np.array(d["axial_levels"], dtype=np.float64),
            grid=tuple(d.get("grid", GRID)),
            core_radius=float(d.get("core_radius", CORE_RADIUS)),
        )

    def __eq__(self, other):
        if not isinstance(other, LprmLayout):
            return NotImplemented
        return (
            np.array_equal(self.string_positions, other.string_positions)
            and np.array_equal(self.axial_levels, other.axial_levels)
            and self.grid == other.grid
            and self.core_radius == other.core_radius
        )

    __hash__ = None


def build_default_layout(seed: int = 0, jitter: float = 0.02) -> LprmLayout:
    """43 strings on a jittered square lattice inside the circular core.

    The lattice (pitch 0.11) is centred on the core; the 43 sites nearest the
    centre are kept, then each is moved by up to ``jitter`` in x and y.
    """
    pitch = 0.11
    k = np.arange(-5, 6)
    gx, gy = np.meshgrid(k * pitch, k * pitch, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    r = np.hypot(pts[:, 0], pts[:, 1])
    # stable sort: ties at equal radius resolve by lattice index
    order = np.argsort(np.round(r, 12), kind="stable")[:N_STRINGS]
    pts = pts[order] + np.array(CORE_CENTER)
    rng = np.random.default_rng([seed, 0x1A7])
    pts = pts + rng.uniform(-jitter, jitter, size=pts.shape)
    return LprmLayout(string_positions=pts, axial_levels=np.array(DEFAULT_LEVELS))


# -- axial: natural cubic spline ------------------------------------------------


def natural_spline_weights(levels: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Matrix ``S`` with ``S @ readings`` = natural spline values at ``nodes``.

    Outside ``[levels[0], levels[-1]]`` the spline continues linearly with the
    end slope. The second derivatives come from a dense solve of the interior
    system, one column per unit reading.
    """
    levels = np.asarray(levels, dtype=np.float64)
    nodes = np.asarray(nodes, dtype=np.float64)
    n = len(levels)
    if n < 2:
        raise ValueError("need at least two knots")
    h = np.diff(levels)
    if np.any(h <= 0):
        raise ValueError("knot levels must be strictly increasing")
    # interior rows i=1..n-2: h[i-1] M[i-1] + 2(h[i-1]+h[i]) M[i] + h[i] M[i+1] = 6 (slope_i - slope_{i-1})
    A = np.zeros((n - 2, n - 2))
    D = np.zeros((n - 2, n))
    for r, i in enumerate(range(1, n - 1)):
        A[r, r] = 2.0 * (h[i - 1] + h[i])
        if r > 0:
            A[r, r - 1] = h[i - 1]
        if r < n - 3:
            A[r, r + 1] = h[i]
        D[r, i - 1] += 6.0 / h[i - 1]
        D[r, i] -= 6.0 / h[i - 1] + 6.0 / h[i]
        D[r, i + 1] += 6.0 / h[i]
    M = np.zeros((n, n))
    if n > 2:
        M[1:-1] = np.linalg.solve(A, D)
    eye = np.eye(n)

    W = np.zeros((len(nodes), n))
    for row, z in enumerate(nodes):
        if z <= levels[0] or z >= levels[-1]:
            lo = z <= levels[0]
            j = 0 if lo else n - 2
            hj = h[j]
            # end slopes of the cubic on the first / last interval
            slope = (eye[j + 1] - eye[j]) / hj + (
                -hj * (2 * M[j] + M[j + 1]) / 6.0 if lo else hj * (M[j] + 2 * M[j + 1]) / 6.0
            )
            anchor = 0 if lo else n - 1
            W[row] = eye[anchor] + slope * (z - levels[anchor])
            continue
        j = int(np.searchsorted(levels, z, side="right") - 1)
        hj = h[j]
        a = (levels[j + 1] - z) / hj
        b = (z - levels[j]) / hj
        W[row] = (
            a * eye[j]
            + b * eye[j + 1]
            + ((a**3 - a) * M[j] + (b**3 - b) * M[j + 1]) * hj * hj / 6.0
        )
    return W


def axial_profile(readings, levels, nodes) -> np.ndarray:
    readings = np.asarray(readings, dtype=np.float64)
    if not np.all(np.isfinite(readings)):
        raise ValueError("readings must be finite")
    W = natural_spline_weights(levels, nodes)
    return np.maximum(W @ readings, 0.0)


# -- radial: thin-plate spline --------------------------------------------------


def tps_kernel(r: np.ndarray) -> np.ndarray:
    """``r^2 log r`` with the removable singularity at 0 set to 0."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


class ThinPlateSpline:
    """Exact 2D thin-plate interpolant for fixed centres.

    The bordered system ``[[K, P], [P^T, 0]] [w; a] = [v; 0]`` is LU-factored
    once; :meth:`fit` then solves for any number of value columns.
    """

    def __init__(self, centers: np.ndarray):
        c = np.asarray(centers, dtype=np.float64)
        if len({tuple(p) for p in c}) != len(c):
            raise ValueError("thin-plate spline centres must be distinct")
        self.centers = c
        n = len(c)
        P = np.hstack([np.ones((n, 1)), c])
        L = np.zeros((n + 3, n + 3))
        L[:n, :n] = tps_kernel(_pairwise(c, c))
        L[:n, n:] = P
        L[n:, :n] = P.T
        self._lu = scipy.linalg.lu_factor(L, check_finite=True)
        if not np.all(np.isfinite(self._lu[0])) or np.any(np.diag(self._lu[0]) == 0):
            raise np.linalg.LinAlgError("singular thin-plate system")

    def fit(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        rhs = np.zeros((len(self.centers) + 3,) + v.shape[1:])
        rhs[: len(self.centers)] = v
        return scipy.linalg.lu_solve(self._lu, rhs)

    def design(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.hstack([tps_kernel(_pairwise(pts, self.centers)), np.ones((len(pts), 1)), pts])

    def operator(self, points: np.ndarray) -> np.ndarray:
        """Matrix ``E`` with ``E @ values`` = interpolant at ``points``."""
        n = len(self.centers)
        return self.design(points) @ self.fit(np.eye(n))

    def __call__(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        return self.design(points) @ self.fit(values)


def grid_points(nx: int = GRID[1], ny: int = GRID[2]) -> np.ndarray:
    gx, gy = np.meshgrid(node_coords(nx), node_coords(ny), indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def radial_tps(points, grid_shape=GRID[1:], mask=None) -> np.ndarray:
    """Fit a TPS through ``(x, y, value)`` triples and evaluate it on the grid."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be (n, 3) triples of x, y, value")
    nx, ny = grid_shape
    tps = ThinPlateSpline(pts[:, :2])
    plane = tps(pts[:, 2], grid_points(nx, ny)).reshape(nx, ny)
    if mask is None:
        mask = core_mask(nx, ny)
    return np.where(mask, np.maximum(plane, 0.0), 0.0)


# -- composed volume --------------------------------------------------------------


@dataclass
class LprmInterpolator:
    """Cached linear operators for one layout."""

    layout: LprmLayout
    axial: np.ndarray = field(init=False, repr=False)
    radial: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nz, nx, ny = self.layout.grid
        self.axial = natural_spline_weights(self.layout.axial_levels, node_coords(nz))
        self._tps = ThinPlateSpline(self.layout.string_positions)
        self.radial = self._tps.operator(grid_points(nx, ny))

    def volume(self, readings, clamp: bool = True) -> np.ndarray:
        """Dense ``(25, 30, 30)`` volume from ``(43, 4)`` readings.

        With ``clamp=False`` the two clamps at zero are skipped, which leaves
        the purely linear operator (masking still applies).
        """
        r = _check_readings(readings, self.layout)
        prof = r @ self.axial.T  # (43, nz)
        if clamp:
            prof = np.maximum(prof, 0.0)
        planes = (self.radial @ prof).T  # (nz, nx*ny)
        if clamp:
            planes = np.maximum(planes, 0.0)
        nz, nx, ny = self.layout.grid
        vol = planes.reshape(nz, nx, ny)
        return np.where(self.layout.mask[None], vol, 0.0)

    def evaluate(self, readings, points) -> np.ndarray:
        """Unclamped reconstruction at arbitrary ``(z, x, y)`` points."""
        r = _check_readings(readings, self.layout)
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        prof = r @ natural_spline_weights(self.layout.axial_levels, pts[:, 0]).T  # (43, npts)
        coef = self._tps.fit(prof)  # (46, npts)
        design = self._tps.design(pts[:, 1:])
        return np.einsum("pk,kp->p", design, coef)


def _check_readings(readings, layout: LprmLayout) -> np.ndarray:
    r = np.asarray(readings, dtype=np.float64)
    shape = (len(layout.string_positions), len(layout.axial_levels))
    if r.shape != shape:
        raise ValueError(f"readings shape {r.shape} != {shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("readings must be finite")
    if np.any(r < 0):
        raise ValueError("readings must be non-negative")
    return r


def interpolate_lprm_volume(readings, layout: LprmLayout) -> np.ndarray:
    """Axial spline per string, then a thin-plate spline per axial plane."""
    return LprmInterpolator(layout).volume(readings)
