"""Three-branch criticality regressor.

A 3D conv branch reads the ``(4, 25, 30, 30)`` nodal block, a 2D conv branch
reads the ``(1, 30, 30)`` rod map, and the five core scalars pass straight
through. The branch outputs are flattened, concatenated in the fixed order
3D, 2D, 0D and fed through the dense head (relu + dropout per hidden layer)
to one linear output, which predicts the normalized target ``(k - 1) * scale``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .data import (
    F0D_SHAPE,
    F2D_SHAPE,
    F3D_SHAPE,
    DatasetFormatError,
    NormStats,
    denormalize_target,
    normalize_batch,
    read_blob,
    read_manifest,
    write_json,
)
from .rng import stream

CONCAT_ORDER = "3d,2d,0d"
CHECKPOINT_VERSION = 1

ConvSpec = Tuple[int, int, int]  # (kernel extent, out channels, stride)


@dataclass
class ModelConfig:
    conv3d: List[ConvSpec] = field(default_factory=lambda: [(3, 8, 2), (3, 16, 2)])
    conv2d: List[ConvSpec] = field(default_factory=lambda: [(3, 8, 2), (3, 16, 2)])
    padding: str = "same"
    head_width: int = 1024
    head_layers: int = 2
    dropout: float = 0.2

    def __post_init__(self):
        self.conv3d = [tuple(int(v) for v in c) for c in self.conv3d]
        self.conv2d = [tuple(int(v) for v in c) for c in self.conv2d]
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.head_width < 1 or self.head_layers < 0:
            raise ValueError("head_width must be >= 1 and head_layers >= 0")
        for k, c, s in self.conv3d + self.conv2d:
            if k < 1 or c < 1 or s < 1:
                raise ValueError(f"bad conv layer {(k, c, s)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv3d"] = [list(c) for c in self.conv3d]
        d["conv2d"] = [list(c) for c in self.conv2d]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def branch_shapes(in_shape: Sequence[int], layers: Sequence[ConvSpec], padding: str) -> List[tuple]:
    """Activation shapes ``(channels, *spatial)`` through one conv branch."""
    shapes = [tuple(in_shape)]
    for k, c, s in layers:
        spatial = []
        for n in shapes[-1][1:]:
            out, _, _ = ad.conv_output_extent(n, k, s, padding)
            if out < 1:
                raise ValueError(
                    f"conv layer {(k, c, s)} with {padding!r} padding maps extent {n} to {out}"
                )
            spatial.append(out)
        shapes.append((c, *spatial))
    return shapes


def concat_length(config: ModelConfig) -> int:
    s3 = branch_shapes(F3D_SHAPE, config.conv3d, config.padding)[-1]
    s2 = branch_shapes(F2D_SHAPE, config.conv2d, config.padding)[-1]
    return math.prod(s3) + math.prod(s2) + F0D_SHAPE[0]


def param_shapes(config: ModelConfig) -> dict:
    shapes = {}
    for tag, in_shape, layers, nsp in (
        ("c3d", F3D_SHAPE, config.conv3d, 3),
        ("c2d", F2D_SHAPE, config.conv2d, 2),
    ):
        trace = branch_shapes(in_shape, layers, config.padding)
        for i, ((k, c, _), prev) in enumerate(zip(layers, trace)):
            shapes[f"{tag}_{i}.w"] = (c, prev[0]) + (k,) * nsp
            shapes[f"{tag}_{i}.b"] = (c,)
    width = concat_length(config)
    for i in range(config.head_layers):
        shapes[f"fc_{i}.w"] = (config.head_width, width)
        shapes[f"fc_{i}.b"] = (config.head_width,)
        width = config.head_width
    shapes["out.w"] = (1, width)
    shapes["out.b"] = (1,)
    return shapes


@dataclass
class CritModel:
    config: ModelConfig
    params: ParamSet
    norm: Optional[NormStats] = None
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.params.values())).dtype

    def astype(self, dtype) -> "CritModel":
        return CritModel(self.config, self.params.astype(dtype), self.norm, self.epoch, dict(self.meta))


def build_model(config: Optional[ModelConfig] = None, init_seed: int = 0, dtype=np.float32) -> CritModel:
    """Fan-in uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    config = config or ModelConfig()
    rng = stream(init_seed, "init")
    params = ParamSet()
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params.add(name, np.zeros(shape), dtype=dtype)
        else:
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            params.add(name, rng.uniform(-bound, bound, size=shape), dtype=dtype)
    return CritModel(config, params)


def forward_batch(
    model: CritModel,
    x3: np.ndarray,
    x2: np.ndarray,
    x0: np.ndarray,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Normalized inputs with a leading batch axis -> ``(B,)`` normalized-target predictions."""
    cfg, p = model.config, model.params
    dt = model.dtype
    for arr, shape, name in ((x3, F3D_SHAPE, "3D"), (x2, F2D_SHAPE, "2D"), (x0, F0D_SHAPE, "0D")):
        if arr.shape[1:] != shape:
            raise ValueError(f"{name} input shape {arr.shape[1:]} != {shape}")
    n = x3.shape[0]
    if x2.shape[0] != n or x0.shape[0] != n:
        raise ValueError("branch inputs disagree on batch size")

    a = Tensor(np.asarray(x3, dtype=dt))
    for i, (_, _, s) in enumerate(cfg.conv3d):
        a = ad.relu(ad.conv(a, p[f"c3d_{i}.w"], p[f"c3d_{i}.b"], s, cfg.padding))
    b = Tensor(np.asarray(x2, dtype=dt))
    for i, (_, _, s) in enumerate(cfg.conv2d):
        b = ad.relu(ad.conv(b, p[f"c2d_{i}.w"], p[f"c2d_{i}.b"], s, cfg.padding))
    h = ad.concat([ad.flatten(a), ad.flatten(b), Tensor(np.asarray(x0, dtype=dt))], axis=1)
    for i in range(cfg.head_layers):
        h = ad.relu(ad.dense(h, p[f"fc_{i}.w"], p[f"fc_{i}.b"]))
        h = ad.dropout(h, cfg.dropout, train, rng)
    out = ad.dense(h, p["out.w"], p["out.b"])
    return ad.reshape(out, (n,))


def forward(model: CritModel, record, mode: str = "infer", rng=None) -> float:
    """Predicted k (raw units) for one record already normalized with ``model.norm``."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    y = forward_batch(model, record.f3d[None], record.f2d[None], record.f0d[None],
                      train=mode == "train", rng=rng)
    if model.norm is None:
        return float(y.data[0]) + 1.0
    return denormalize_target(model.norm, float(y.data[0]))


def predict(model: CritModel, f3d, f2d, f0d, chunk: int = 128) -> np.ndarray:
    """Raw-k predictions for raw (unnormalized) feature arrays, infer mode."""
    if model.norm is None:
        raise ValueError("model has no normalization statistics; train it first")
    out = np.empty(len(f3d))
    for s in range(0, len(f3d), chunk):
        x3, x2, x0 = normalize_batch(model.norm, f3d[s:s + chunk], f2d[s:s + chunk],
                                     f0d[s:s + chunk], model.dtype)
        out[s:s + chunk] = forward_batch(model, x3, x2, x0).data
    return denormalize_target(model.norm, out)


# -- checkpoints --------------------------------------------------------------------


def save_model(model: CritModel, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dt = "<f4" if model.dtype == np.float32 else "<f8"
    ext = "f32" if dt == "<f4" else "f64"
    entries = {}
    for name, t in model.params.items():
        entry = {"shape": list(t.shape), "dtype": dt}
        for kind, arr in (("value", t.data), ("adam_m", model.params.m[name]), ("adam_v", model.params.v[name])):
            fname = f"{name}.{kind}.{ext}"
            np.ascontiguousarray(arr, dtype=np.dtype(dt)).tofile(path / fname)
            entry[kind] = fname
        entries[name] = entry
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "critforge-model",
        "config": model.config.to_dict(),
        "concat_order": CONCAT_ORDER,
        "norm": model.norm.to_dict() if model.norm else None,
        "adam_step": model.params.step,
        "epoch": model.epoch,
        "meta": model.meta,
        "params": entries,
    }
    write_json(path / "manifest.json", manifest)
    return path


def load_model(path) -> CritModel:
    path = Path(path)
    m = read_manifest(path)
    if m.get("kind") != "critforge-model" or m.get("format_version") != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"{path} is not a supported model checkpoint")
    if m.get("concat_order") != CONCAT_ORDER:
        raise DatasetFormatError(
            f"checkpoint concat order {m.get('concat_order')!r} != {CONCAT_ORDER!r}"
        )
    config = ModelConfig.from_dict(m["config"])
    expected = param_shapes(config)
    if set(expected) != set(m["params"]):
        raise DatasetFormatError("checkpoint parameter names do not match its config")
    params = ParamSet()
    for name, shape in expected.items():
        entry = m["params"][name]
        if tuple(entry["shape"]) != shape:
            raise DatasetFormatError(f"parameter {name}: shape {entry['shape']} != {list(shape)}")
        blob = {"shape": entry["shape"], "dtype": entry["dtype"]}
        value = read_blob(path, {**blob, "file": entry["value"]}, 1)[0]
        t = params.add(name, value, dtype=np.dtype(entry["dtype"]).newbyteorder("="))
        params.m[name] = read_blob(path, {**blob, "file": entry["adam_m"]}, 1)[0].astype(t.dtype)
        params.v[name] = read_blob(path, {**blob, "file": entry["adam_v"]}, 1)[0].astype(t.dtype)
    params.step = int(m["adam_step"])
    norm = NormStats.from_dict(m["norm"]) if m.get("norm") else None
    return CritModel(config, params, norm, int(m.get("epoch", 0)), m.get("meta", {}))
