"""Synthetic multi-cycle BWR operating data.

Each cycle is a daily sequence of latent plant states (exposure, iodine and
xenon inventories, rod pattern, flow, pressure, subcooling, power). Features
are rendered from the state: nodal power is an axial shape times a radial
shape, suppressed below inserted rods; LPRM readings sample that field at the
detector sites and go through the LPRM interpolation; nodal iodine and xenon
follow the local power. The label is a closed-form ARO k plus noise.

Cycle-to-cycle shift enters only through the rod policy and core-flow
offsets, so the shift is visible in the features, not in the label formula.
The rod policy offset moves the rod sequence and the burnup-driven flux shape
together, so an off-policy cycle looks older or younger than it is.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import F0D_SHAPE, F2D_SHAPE, F3D_SHAPE, Dataset, Record
from .lprm import (
    CORE_CENTER,
    LprmInterpolator,
    LprmLayout,
    build_default_layout,
    core_mask,
    node_coords,
)
from .rng import stream

# daily retention of the iodine / xenon boxes (half-lives 6.57 h and 9.14 h)
IODINE_KEEP = float(np.exp(-np.log(2) * 24 / 6.57))
XENON_KEEP = float(np.exp(-np.log(2) * 24 / 9.14))
IODINE_TO_XENON = 0.95
DIRECT_XENON = 0.05
# burnout rate that puts full-power equilibrium at xenon = iodine = 1
XENON_BURN = IODINE_TO_XENON * (1 - IODINE_KEEP) + DIRECT_XENON - 1 + XENON_KEEP

PRESSURE_NOM = 1020.0  # psia
FLOW_RATED = 100.0  # Mlb/hr
SUBCOOL_NOM = 22.0  # Btu/lb
POWER_RATED = 3500.0  # MWt
PCM = 1e5


@dataclass
class CycleSpec:
    cycle_id: int
    n_records: int
    boc_excess: float = 0.008
    decay_gamma: float = 1.25
    xenon_worth: float = 0.0025
    rod_worth: float = 0.0004
    flow_coeff: float = 0.003
    subcool_coeff: float = 0.0002
    rod_depth: float = 0.55
    rod_notches: int = 12
    rod_policy_offset: float = 0.0
    flow_base: float = 0.90
    flow_ramp: float = 0.10
    flow_offset: float = 0.0
    maneuvers: int = 6
    label_noise: float = 2e-4
    lprm_noise: float = 0.01
    field_noise: float = 0.005
    scalar_noise: float = 0.002

    def __post_init__(self):
        if self.n_records < 30:
            raise ValueError(f"cycle {self.cycle_id}: need at least 30 records")
        if not 0 < self.boc_excess < 0.02:
            raise ValueError("boc_excess must lie in (0, 0.02)")
        for f in ("label_noise", "lprm_noise", "field_noise", "scalar_noise"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CycleSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown CycleSpec fields {sorted(unknown)}")
        return cls(**d)


DEFAULT_CAMPAIGN = (
    CycleSpec(20, 300, rod_policy_offset=0.0, flow_offset=0.0),
    CycleSpec(21, 330, rod_policy_offset=0.08, flow_offset=0.04),
    CycleSpec(22, 350, rod_policy_offset=-0.12, flow_offset=-0.06),
    CycleSpec(23, 1400, rod_policy_offset=0.0, flow_offset=0.015),
)


@dataclass
class LatentState:
    exposure_frac: float
    xenon: float
    iodine: float
    rods: np.ndarray  # (30, 30) insertion fraction, non-zero only at rod cells
    flow: float  # fraction of rated
    pressure: float
    subcooling: float
    power: float  # fraction of rated

    def mean_rod_insertion(self) -> float:
        cells = rod_cells()
        return float(self.rods[cells].mean())


def nominal_state(exposure: float = 0.0, xenon: float = 0.0) -> LatentState:
    return LatentState(
        exposure_frac=exposure, xenon=xenon, iodine=0.0,
        rods=np.zeros(F2D_SHAPE[1:]), flow=1.0, pressure=PRESSURE_NOM,
        subcooling=SUBCOOL_NOM, power=1.0,
    )


def latent_k(state: LatentState, spec: CycleSpec) -> float:
    """ARO eigenvalue of a latent state.

    ``1 + excess * (1 - exposure)^gamma`` minus xenon and residual rod terms,
    plus small linear flow and subcooling perturbations around nominal.
    """
    e = min(max(state.exposure_frac, 0.0), 1.0)
    return (
        1.0
        + spec.boc_excess * (1.0 - e) ** spec.decay_gamma
        - spec.xenon_worth * state.xenon
        - spec.rod_worth * state.mean_rod_insertion()
        + spec.flow_coeff * (state.flow - 1.0)
        + spec.subcool_coeff * (state.subcooling - SUBCOOL_NOM) / SUBCOOL_NOM
    )


# -- geometry helpers -------------------------------------------------------------


@lru_cache(maxsize=None)
def rod_cells() -> np.ndarray:
    """Boolean (30, 30) map of control-rod cells: every third cell inside the core."""
    nx, ny = F2D_SHAPE[1:]
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    cells = (i % 3 == 1) & (j % 3 == 1) & core_mask(nx, ny)
    cells.flags.writeable = False
    return cells


@lru_cache(maxsize=None)
def rod_groups() -> np.ndarray:
    """Sequence group 0..3 for each rod cell (-1 elsewhere)."""
    nx, ny = F2D_SHAPE[1:]
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    g = np.where(rod_cells(), 2 * (((i // 3) + (j // 3)) % 2) + (i // 3) % 2, -1)
    g.flags.writeable = False
    return g


def rod_pattern(exposure: float, spec: CycleSpec) -> np.ndarray:
    """Insertion map for the scheduled sequence at this exposure.

    One group is inserted at a time, swapped every quarter cycle; the depth
    withdraws notch by notch toward all-rods-out at end of cycle.
    """
    e = min(max(exposure + spec.rod_policy_offset, 0.0), 1.0)
    depth = np.round(spec.rod_depth * (1.0 - e) * spec.rod_notches) / spec.rod_notches
    active = (0, 2, 1, 3)[min(int(e * 4), 3)]
    return np.where(rod_groups() == active, depth, 0.0)


def _power_history(spec: CycleSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_records
    p = np.ones(n)
    if spec.maneuvers > 0:
        period = n / (spec.maneuvers + 1)
        for m in range(1, spec.maneuvers + 1):
            t = int(round(m * period))
            p[t:t + 2] = (0.70, 0.85)[: len(p[t:t + 2])]
    coast = max(int(0.06 * n), 1)
    p[n - coast:] = np.linspace(1.0, 0.88, coast)
    p *= 1.0 + 0.003 * rng.standard_normal(n)
    return np.clip(p, 0.5, 1.0)


def latent_trajectory(spec: CycleSpec, seed: int) -> List[LatentState]:
    """Daily latent states for one cycle, deterministic in ``(seed, cycle_id)``."""
    rng = stream(seed, "synth-latent", spec.cycle_id)
    n = spec.n_records
    power = _power_history(spec, rng)
    flow_noise = rng.standard_normal(n)
    sub_noise = rng.standard_normal(n)
    pres_noise = rng.standard_normal(n)
    states = []
    iodine = xenon = 0.0
    for d in range(n):
        e = d / (n - 1)
        p = power[d]
        # xenon update uses yesterday's iodine
        xenon = (
            XENON_KEEP * xenon
            + IODINE_TO_XENON * (1 - IODINE_KEEP) * iodine
            + DIRECT_XENON * p
            - XENON_BURN * p * xenon
        )
        iodine = IODINE_KEEP * iodine + (1 - IODINE_KEEP) * p
        flow = spec.flow_base + spec.flow_ramp * e + spec.flow_offset + 0.8 * (p - 1.0)
        flow += 0.002 * flow_noise[d]
        sub = SUBCOOL_NOM + 12.0 * (p - 1.0) - 10.0 * (flow - 1.0) + 0.1 * sub_noise[d]
        states.append(LatentState(
            exposure_frac=e,
            xenon=xenon,
            iodine=iodine,
            rods=rod_pattern(e, spec),
            flow=flow,
            pressure=PRESSURE_NOM + 8.0 * (p - 1.0) + 0.5 * pres_noise[d],
            subcooling=sub,
            power=p,
        ))
    return states


# -- feature rendering --------------------------------------------------------------


class _Renderer:
    def __init__(self, layout: LprmLayout):
        self.layout = layout
        self.interp = LprmInterpolator(layout)
        nz, nx, ny = layout.grid
        self.z = node_coords(nz)
        x = node_coords(nx)[:, None]
        y = node_coords(ny)[None, :]
        self.mask = core_mask(nx, ny)
        self.r2 = ((x - CORE_CENTER[0]) ** 2 + (y - CORE_CENTER[1]) ** 2) / layout.core_radius**2
        self.cells = rod_cells().astype(np.float64)
        self.influence = np.minimum(ndimage.gaussian_filter(self.cells, 1.0) * 2 * np.pi, 1.0)
        # detector sites in fractional grid-index units for bilinear lookup
        pos = layout.string_positions
        self.det_idx = np.stack([pos[:, 0] * nx - 0.5, pos[:, 1] * ny - 0.5])
        self.det_r2 = ((pos - np.array(CORE_CENTER)) ** 2).sum(axis=1) / layout.core_radius**2
        self.levels = layout.axial_levels

    @staticmethod
    def axial(z, exposure, flow):
        skew = -1.0 + 2.0 * exposure + 1.5 * (flow - 1.0)
        return np.sin(np.pi * (0.04 + 0.92 * z)) * np.exp(skew * (z - 0.5))

    @staticmethod
    def radial(r2, exposure):
        return np.clip(1.0 - (0.55 - 0.15 * exposure) * r2, 0.0, None)

    def rod_depth_field(self, rods):
        smooth = ndimage.gaussian_filter(rods, 1.0)
        weight = ndimage.gaussian_filter(self.cells * (rods > 0), 1.0)
        depth = np.where(weight > 1e-6, smooth / np.maximum(weight, 1e-6), 0.0)
        strength = np.minimum(ndimage.gaussian_filter((rods > 0).astype(float), 1.0) * 2 * np.pi, 1.0)
        return depth, strength

    @staticmethod
    def suppression(z, depth, strength):
        # bottom-entry rods: cells below the local rod tip lose power
        return 1.0 - 0.6 * strength * (1.0 / (1.0 + np.exp(-(depth - z) / 0.03)))

    def render(self, state: LatentState, spec: CycleSpec, rng: np.random.Generator):
        e = state.exposure_frac
        # the rod program shapes where burnup accumulates, so the flux shape
        # runs on the same shifted clock as the rod sequence
        e_shape = min(max(e + spec.rod_policy_offset, 0.0), 1.0)
        depth, strength = self.rod_depth_field(state.rods)
        ax = self.axial(self.z, e_shape, state.flow)[:, None, None]
        rad = np.where(self.mask, self.radial(self.r2, e_shape), 0.0)[None]
        shape = ax * rad * self.suppression(self.z[:, None, None], depth[None], strength[None])
        norm = shape[:, self.mask].mean()
        shape = shape / norm
        power = state.power * shape * (1.0 + spec.field_noise * rng.standard_normal(shape.shape))
        power = np.where(self.mask[None], np.maximum(power, 0.0), 0.0)

        d_depth = ndimage.map_coordinates(depth, self.det_idx, order=1, mode="nearest")
        d_str = ndimage.map_coordinates(strength, self.det_idx, order=1, mode="nearest")
        det = (
            self.axial(self.levels[None, :], e_shape, state.flow)
            * self.radial(self.det_r2, e_shape)[:, None]
            * self.suppression(self.levels[None, :], d_depth[:, None], d_str[:, None])
        ) / norm
        readings = state.power * det * (1.0 + spec.lprm_noise * rng.standard_normal(det.shape))
        lprm = self.interp.volume(np.maximum(readings, 0.0))

        iod = 100.0 * state.iodine * shape * (1.0 + spec.field_noise * rng.standard_normal(shape.shape))
        xen_local = shape * 1.5 / (shape * state.power + 0.5)
        xen = 100.0 * state.xenon * xen_local * (1.0 + spec.field_noise * rng.standard_normal(shape.shape))
        m = self.mask[None]
        f3d = np.stack([lprm, np.where(m, iod, 0.0), power, np.where(m, xen, 0.0)])

        sn = spec.scalar_noise
        z = rng.standard_normal(3)
        f0d = np.array([
            state.pressure,
            FLOW_RATED * state.flow,
            state.subcooling,
            POWER_RATED * state.power * (1.0 + sn * z[0]),
            -spec.xenon_worth * state.xenon * PCM * (1.0 + sn * z[1]),
        ])
        return f3d, state.rods[None], f0d


def _fill_cycle(spec, layout, seed, renderer, out, offset):
    states = latent_trajectory(spec, seed)
    frng = stream(seed, "synth-features", spec.cycle_id)
    lrng = stream(seed, "synth-label", spec.cycle_id)
    noise = lrng.standard_normal(len(states))
    for d, st in enumerate(states):
        i = offset + d
        f3d, f2d, f0d = renderer.render(st, spec, frng)
        out["f3d"][i] = f3d
        out["f2d"][i] = f2d
        out["f0d"][i] = f0d
        out["k"][i] = latent_k(st, spec) + spec.label_noise * noise[d]
        out["cycle"][i] = spec.cycle_id
        out["day"][i] = d
        out["expo"][i] = st.exposure_frac


def _alloc(n):
    return {
        "f3d": np.empty((n,) + F3D_SHAPE, np.float32),
        "f2d": np.empty((n,) + F2D_SHAPE, np.float32),
        "f0d": np.empty((n,) + F0D_SHAPE, np.float32),
        "k": np.empty(n),
        "cycle": np.empty(n, np.int64),
        "day": np.empty(n, np.int64),
        "expo": np.empty(n),
    }


def generate_cycle(spec: CycleSpec, layout: LprmLayout, seed: int) -> List[Record]:
    out = _alloc(spec.n_records)
    _fill_cycle(spec, layout, seed, _Renderer(layout), out, 0)
    return [
        Record(int(out["cycle"][i]), int(out["day"][i]), float(out["expo"][i]),
               out["f3d"][i], out["f2d"][i], out["f0d"][i], float(out["k"][i]))
        for i in range(spec.n_records)
    ]


def generate_campaign(
    specs: Sequence[CycleSpec] = DEFAULT_CAMPAIGN,
    seed: int = 0,
    layout: Optional[LprmLayout] = None,
    layout_seed: int = 0,
) -> Dataset:
    ids = [s.cycle_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate cycle ids {ids}")
    specs = sorted(specs, key=lambda s: s.cycle_id)
    layout = layout or build_default_layout(layout_seed)
    renderer = _Renderer(layout)
    out = _alloc(sum(s.n_records for s in specs))
    offset = 0
    for spec in specs:
        _fill_cycle(spec, layout, seed, renderer, out, offset)
        offset += spec.n_records
    provenance = {
        "generator": "critforge.synth",
        "seed": int(seed),
        "config": campaign_config(specs, layout_seed),
    }
    return Dataset(out["cycle"], out["day"], out["expo"], out["f3d"], out["f2d"],
                   out["f0d"], out["k"], layout, provenance)


def campaign_config(specs: Sequence[CycleSpec] = DEFAULT_CAMPAIGN, layout_seed: int = 0) -> dict:
    return {"layout_seed": int(layout_seed), "cycles": [s.to_dict() for s in specs]}


def load_campaign_config(path) -> tuple:
    """Read a generator config file; returns ``(specs, layout_seed)``."""
    d = json.loads(Path(path).read_text())
    specs = [CycleSpec.from_dict(c) for c in d["cycles"]]
    return specs, int(d.get("layout_seed", 0))


def scaled_campaign(factor: float, specs: Sequence[CycleSpec] = DEFAULT_CAMPAIGN) -> List[CycleSpec]:
    """Default cycles with record counts scaled down (min 30), for quick runs."""
    return [replace(s, n_records=max(30, int(round(s.n_records * factor)))) for s in specs]
