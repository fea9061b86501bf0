"""Record schema, on-disk dataset container, normalization and splits.

A dataset directory holds ``manifest.json`` plus one raw little-endian blob per
feature group (float32, row-major, records concatenated in manifest order) and
a float64 target blob. The manifest carries the LPRM layout, so a dataset is
self-describing.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np

from .lprm import LprmLayout
from .rng import stream

FORMAT_VERSION = 1

F3D_SHAPE = (4, 25, 30, 30)
F2D_SHAPE = (1, 30, 30)
F0D_SHAPE = (5,)

F3D_NAMES = ("interpolated_lprm", "nodal_iodine_worth", "nodal_power", "nodal_xenon_worth")
F2D_NAMES = ("control_rod_pattern",)
F0D_NAMES = (
    "core_dome_pressure",
    "core_flow",
    "core_inlet_subcooling",
    "thermal_power",
    "core_xenon_worth",
)
K_WINDOW = (0.95, 1.05)
TARGET_OFFSET = 1.0
# k - 1 spans about 1e-2; a power-of-two gain keeps the transform exactly invertible
TARGET_SCALE = 128.0

# blob name -> (field, dtype, per-record shape)
_BLOBS = {
    "f3d": ("f3d.f32", "<f4", F3D_SHAPE),
    "f2d": ("f2d.f32", "<f4", F2D_SHAPE),
    "f0d": ("f0d.f32", "<f4", F0D_SHAPE),
    "k_target": ("k_target.f64", "<f8", ()),
}


class DatasetFormatError(ValueError):
    """Dataset container is missing, inconsistent or truncated."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    cycle_id: int
    day_index: int
    exposure_frac: float
    f3d: np.ndarray
    f2d: np.ndarray
    f0d: np.ndarray
    k_target: float

    def validate(self):
        _validate_arrays(
            np.asarray([self.cycle_id]),
            np.asarray([self.day_index]),
            np.asarray([self.exposure_frac]),
            self.f3d[None],
            self.f2d[None],
            self.f0d[None],
            np.asarray([self.k_target]),
        )


def _validate_arrays(cycle, day, expo, f3d, f2d, f0d, k):
    n = len(cycle)
    for name, arr, shape in (
        ("f3d", f3d, F3D_SHAPE),
        ("f2d", f2d, F2D_SHAPE),
        ("f0d", f0d, F0D_SHAPE),
    ):
        if arr.shape != (n,) + shape:
            raise ValueError(f"{name} shape {arr.shape[1:]} != {shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} has non-finite values")
    if len(day) != n or len(expo) != n or len(k) != n:
        raise ValueError("per-record columns differ in length")
    if np.any(day < 0):
        raise ValueError("day_index must be non-negative")
    if np.any((expo < 0) | (expo > 1)):
        raise ValueError("exposure_frac must lie in [0, 1]")
    if np.any((f2d < 0) | (f2d > 1)):
        raise ValueError("rod fractions must lie in [0, 1]")
    if np.any(f3d[:, [0, 2]] < 0):
        raise ValueError("LPRM and nodal power channels must be non-negative")
    if np.any((k <= K_WINDOW[0]) | (k >= K_WINDOW[1])):
        raise ValueError(f"k_target outside {K_WINDOW}")


class Dataset:
    """Records stored column-wise; ``ds[i]`` gives a :class:`Record`."""

    def __init__(
        self,
        cycle_id,
        day_index,
        exposure_frac,
        f3d,
        f2d,
        f0d,
        k_target,
        layout: LprmLayout,
        provenance: Optional[dict] = None,
        validate: bool = True,
    ):
        self.cycle_id = np.asarray(cycle_id, dtype=np.int64).reshape(-1)
        self.day_index = np.asarray(day_index, dtype=np.int64).reshape(-1)
        self.exposure_frac = np.asarray(exposure_frac, dtype=np.float64).reshape(-1)
        n = len(self.cycle_id)
        self.f3d = np.asarray(f3d, dtype=np.float32).reshape((n,) + F3D_SHAPE)
        self.f2d = np.asarray(f2d, dtype=np.float32).reshape((n,) + F2D_SHAPE)
        self.f0d = np.asarray(f0d, dtype=np.float32).reshape((n,) + F0D_SHAPE)
        self.k_target = np.asarray(k_target, dtype=np.float64).reshape(-1)
        self.layout = layout
        self.provenance = provenance or {}
        if validate:
            _validate_arrays(
                self.cycle_id, self.day_index, self.exposure_frac,
                self.f3d, self.f2d, self.f0d, self.k_target,
            )
        keys = list(zip(self.cycle_id.tolist(), self.day_index.tolist()))
        if len(set(keys)) != n:
            raise ValueError("(cycle_id, day_index) pairs must be unique")
        if keys != sorted(keys):
            raise ValueError("records must be ordered by (cycle_id, day_index)")

    @classmethod
    def from_records(cls, records: Sequence[Record], layout: LprmLayout, provenance=None) -> "Dataset":
        if not records:
            return cls.empty(layout, provenance)
        return cls(
            [r.cycle_id for r in records],
            [r.day_index for r in records],
            [r.exposure_frac for r in records],
            np.stack([r.f3d for r in records]),
            np.stack([r.f2d for r in records]),
            np.stack([r.f0d for r in records]),
            [r.k_target for r in records],
            layout,
            provenance,
        )

    @classmethod
    def empty(cls, layout: LprmLayout, provenance=None) -> "Dataset":
        return cls(
            [], [], [], np.zeros((0,) + F3D_SHAPE), np.zeros((0,) + F2D_SHAPE),
            np.zeros((0,) + F0D_SHAPE), [], layout, provenance,
        )

    def __len__(self) -> int:
        return len(self.cycle_id)

    def __getitem__(self, i: int) -> Record:
        return Record(
            cycle_id=int(self.cycle_id[i]),
            day_index=int(self.day_index[i]),
            exposure_frac=float(self.exposure_frac[i]),
            f3d=self.f3d[i],
            f2d=self.f2d[i],
            f0d=self.f0d[i],
            k_target=float(self.k_target[i]),
        )

    def __iter__(self) -> Iterator[Record]:
        return (self[i] for i in range(len(self)))

    @property
    def records(self) -> List[Record]:
        return list(self)

    def cycles(self) -> List[int]:
        return sorted(set(self.cycle_id.tolist()))

    def subset(self, indices) -> "Dataset":
        idx = np.sort(np.asarray(indices, dtype=np.int64))
        return Dataset(
            self.cycle_id[idx], self.day_index[idx], self.exposure_frac[idx],
            self.f3d[idx], self.f2d[idx], self.f0d[idx], self.k_target[idx],
            self.layout, self.provenance, validate=False,
        )


# -- container ----------------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for key, (fname, dtype, shape) in _BLOBS.items():
        arr = np.ascontiguousarray(getattr(ds, key), dtype=np.dtype(dtype))
        arr.tofile(path / fname)
        blobs[key] = {"file": fname, "dtype": dtype, "shape": list(shape)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "record_count": len(ds),
        "cycle_ids": ds.cycle_id.tolist(),
        "day_index": ds.day_index.tolist(),
        "exposure_frac": [float(e) for e in ds.exposure_frac],
        "feature_names": {"f3d": list(F3D_NAMES), "f2d": list(F2D_NAMES), "f0d": list(F0D_NAMES)},
        "blobs": blobs,
        "layout": ds.layout.to_dict(),
        "provenance": ds.provenance,
    }
    write_json(path / "manifest.json", manifest)
    return path


def write_json(path, obj):
    # repr-based float text round-trips exactly; sorted keys keep bytes stable
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise DatasetFormatError(f"no manifest at {mpath}")
    try:
        return json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"unreadable manifest {mpath}: {exc}") from exc


def read_blob(path: Path, spec: dict, count: int) -> np.ndarray:
    fpath = Path(path) / spec["file"]
    if not fpath.is_file():
        raise DatasetFormatError(f"missing blob {fpath}")
    dtype = np.dtype(spec["dtype"])
    shape = tuple(int(s) for s in spec["shape"])
    expected = count * math.prod(shape) * dtype.itemsize
    actual = os.path.getsize(fpath)
    if actual != expected:
        raise DatasetFormatError(
            f"blob {spec['file']} holds {actual} bytes, manifest implies {expected}"
        )
    return np.fromfile(fpath, dtype=dtype).reshape((count,) + shape)


def load_dataset(path) -> Dataset:
    path = Path(path)
    m = read_manifest(path)
    if m.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unknown format version {m.get('format_version')!r}")
    n = int(m["record_count"])
    for col in ("cycle_ids", "day_index", "exposure_frac"):
        if len(m[col]) != n:
            raise DatasetFormatError(f"manifest column {col} has {len(m[col])} entries, expected {n}")
    arrays = {}
    for key, (_, dtype, shape) in _BLOBS.items():
        spec = m["blobs"].get(key)
        if spec is None:
            raise DatasetFormatError(f"manifest lists no blob for {key}")
        if tuple(spec["shape"]) != shape or np.dtype(spec["dtype"]) != np.dtype(dtype):
            raise DatasetFormatError(f"blob {key} has unexpected shape/dtype")
        arrays[key] = read_blob(path, spec, n)
    return Dataset(
        m["cycle_ids"], m["day_index"], m["exposure_frac"],
        arrays["f3d"], arrays["f2d"], arrays["f0d"], arrays["k_target"],
        LprmLayout.from_dict(m["layout"]), m.get("provenance", {}),
    )


# -- normalization -----------------------------------------------------------------


@dataclass
class NormStats:
    """Channel-level z-score statistics fitted on a training partition."""

    f3d_mean: np.ndarray
    f3d_std: np.ndarray
    f2d_mean: np.ndarray
    f2d_std: np.ndarray
    f0d_mean: np.ndarray
    f0d_std: np.ndarray
    target_offset: float = TARGET_OFFSET
    target_scale: float = TARGET_SCALE

    @property
    def zero_variance(self) -> Dict[str, List[int]]:
        return {
            k: np.flatnonzero(getattr(self, f"{k}_std") == 0).tolist()
            for k in ("f3d", "f2d", "f0d")
        }

    def to_dict(self) -> dict:
        d = {
            k: [float(x) for x in getattr(self, k)]
            for k in ("f3d_mean", "f3d_std", "f2d_mean", "f2d_std", "f0d_mean", "f0d_std")
        }
        d["target_offset"] = float(self.target_offset)
        d["target_scale"] = float(self.target_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            **{k: np.array(d[k], dtype=np.float64) for k in
               ("f3d_mean", "f3d_std", "f2d_mean", "f2d_std", "f0d_mean", "f0d_std")},
            target_offset=float(d["target_offset"]),
            target_scale=float(d["target_scale"]),
        )


def _channel_stats(arr: np.ndarray, indices, chunk: int = 256):
    # two-pass in float64 over chunks; a full float64 copy would not fit in memory
    nch = arr.shape[1]
    cells = math.prod(arr.shape[2:])
    total = np.zeros(nch)
    for s in range(0, len(indices), chunk):
        total += arr[indices[s:s + chunk]].astype(np.float64).sum(axis=tuple(i for i in range(arr.ndim) if i != 1))
    count = len(indices) * cells
    mean = total / count
    sq = np.zeros(nch)
    shape = (1, nch) + (1,) * (arr.ndim - 2)
    for s in range(0, len(indices), chunk):
        d = arr[indices[s:s + chunk]].astype(np.float64) - mean.reshape(shape)
        sq += (d * d).sum(axis=tuple(i for i in range(arr.ndim) if i != 1))
    return mean, np.sqrt(sq / count)


def normalize_fit(ds: Dataset, indices=None) -> NormStats:
    """Fit population mean/std per scalar feature and per 3D/2D channel."""
    idx = np.arange(len(ds)) if indices is None else np.sort(np.asarray(indices, dtype=np.int64))
    if len(idx) == 0:
        raise ValueError("cannot fit normalization on an empty set")
    if len(idx) < 2:
        raise ValueError("normalization needs at least 2 records")
    m3, s3 = _channel_stats(ds.f3d, idx)
    m2, s2 = _channel_stats(ds.f2d, idx)
    m0, s0 = _channel_stats(ds.f0d, idx)
    return NormStats(m3, s3, m2, s2, m0, s0)


def _z(arr: np.ndarray, mean: np.ndarray, std: np.ndarray, axis_shape, dtype) -> np.ndarray:
    mean = mean.reshape(axis_shape)
    safe = np.where(std > 0, std, 1.0).reshape(axis_shape)
    out = (arr.astype(np.float64) - mean) / safe
    out = np.where(std.reshape(axis_shape) > 0, out, 0.0)
    return out.astype(dtype)


def normalize_batch(stats: NormStats, f3d, f2d, f0d, dtype=np.float32):
    """Normalize arrays with a leading batch axis; returns ``(x3, x2, x0)``."""
    return (
        _z(f3d, stats.f3d_mean, stats.f3d_std, (1, -1, 1, 1, 1), dtype),
        _z(f2d, stats.f2d_mean, stats.f2d_std, (1, -1, 1, 1), dtype),
        _z(f0d, stats.f0d_mean, stats.f0d_std, (1, -1), dtype),
    )


def normalize_apply(stats: NormStats, record: Record, dtype=np.float32) -> Record:
    x3, x2, x0 = normalize_batch(stats, record.f3d[None], record.f2d[None], record.f0d[None], dtype)
    return Record(
        cycle_id=record.cycle_id,
        day_index=record.day_index,
        exposure_frac=record.exposure_frac,
        f3d=x3[0],
        f2d=x2[0],
        f0d=x0[0],
        k_target=normalize_target(stats, record.k_target),
    )


def normalize_target(stats: NormStats, k):
    y = (np.asarray(k, dtype=np.float64) - stats.target_offset) * stats.target_scale
    return y if np.ndim(k) else float(y)


def denormalize_target(stats: NormStats, y):
    k = np.asarray(y, dtype=np.float64) / stats.target_scale + stats.target_offset
    return k if np.ndim(y) else float(k)


# -- splits --------------------------------------------------------------------------

DEFAULT_CYCLE_ASSIGNMENT = {20: "train", 23: "train", 21: "val", 22: "test"}
PARTITIONS = ("train", "val", "test")


@dataclass
class SplitIndex:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __getitem__(self, partition: str) -> np.ndarray:
        if partition not in PARTITIONS:
            raise KeyError(f"unknown partition {partition!r}")
        return getattr(self, partition)

    def sizes(self) -> tuple:
        return len(self.train), len(self.val), len(self.test)

    def __eq__(self, other):
        if not isinstance(other, SplitIndex):
            return NotImplemented
        return self.kind == other.kind and all(
            np.array_equal(self[p], other[p]) for p in PARTITIONS
        )


def split_sizes(n: int, ratios=(0.70, 0.15, 0.15)) -> tuple:
    # round before floor: 0.7 * 10 evaluates to 6.999... in binary
    n_train = math.floor(round(ratios[0] * n, 9))
    n_val = math.floor(round(ratios[1] * n, 9))
    return n_train, n_val, n - n_train - n_val


def split_random(n: int, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> SplitIndex:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three values summing to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise SplitError("ratios must be non-negative")
    if n < 10:
        raise SplitError(f"random split needs n >= 10, got {n}")
    perm = stream(seed, "split").permutation(n)
    a, b, _ = split_sizes(n, ratios)
    return SplitIndex(
        train=np.sort(perm[:a]), val=np.sort(perm[a:a + b]), test=np.sort(perm[a + b:]),
        kind="random", params={"ratios": list(ratios), "seed": int(seed)},
    )


def split_by_cycle(ds_or_cycles, assignment: Optional[Mapping[int, str]] = None) -> SplitIndex:
    """Route records to partitions by cycle id (default: the 20+23 / 21 / 22 protocol)."""
    cycles = np.asarray(
        ds_or_cycles.cycle_id if isinstance(ds_or_cycles, Dataset) else ds_or_cycles,
        dtype=np.int64,
    )
    assignment = {int(k): v for k, v in (assignment or DEFAULT_CYCLE_ASSIGNMENT).items()}
    for c, part in assignment.items():
        if part not in PARTITIONS:
            raise SplitError(f"cycle {c} assigned to unknown partition {part!r}")
    missing = sorted(set(cycles.tolist()) - set(assignment))
    if missing:
        raise SplitError(f"unassigned cycle(s) {missing}")
    parts = {
        p: np.flatnonzero(np.isin(cycles, [c for c, q in assignment.items() if q == p]))
        for p in PARTITIONS
    }
    empty = [p for p in PARTITIONS if len(parts[p]) == 0]
    if empty:
        raise SplitError(f"empty partition(s) {empty}")
    return SplitIndex(
        **parts, kind="cycle",
        params={"assignment": {str(c): p for c, p in sorted(assignment.items())}},
    )
