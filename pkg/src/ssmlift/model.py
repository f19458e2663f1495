"""The 2D-to-3D lifting network.

Input keypoints are linearly embedded with spatial and temporal position
matrices, passed through a stack of bidirectional global-local
spatio-temporal scan blocks, and regressed to 3D per frame and joint.
Each block is: LN -> causal depthwise conv -> SiLU -> multi-branch
selective SSM (one scan order per branch, summed after inverse
permutation) -> LN -> residual, then LN -> MLP -> residual.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError
from .numerics import Tensor
from .scan_orders import (
    ScanOrder,
    Skeleton,
    apply_order,
    global_spatial_order,
    h36m17_skeleton,
    invert_order,
    local_spatial_order,
    mirror_sequence,
    reverse_order,
    temporal_order,
    unidirectional_variant,
)
from .ssm_core import SelectiveSSMParams, selective_ssm_forward

__all__ = [
    "LN_EPS",
    "BranchSet",
    "ModelConfig",
    "EmbeddingParams",
    "BlockParams",
    "PoseLifter",
    "branch_orders",
    "branch_count",
    "embed",
    "block_forward",
    "model_forward",
    "flip_inference",
    "parameter_count",
    "parameter_breakdown",
    "mac_estimate",
    "save_checkpoint",
    "load_checkpoint",
]

LN_EPS = 1e-5

_CKPT_MAGIC = b"SLFTCKPT"
_CKPT_VERSION = 1


class BranchSet(str, Enum):
    BIDIRECTIONAL_GLOBAL_LOCAL = "bidirectional_global_local"
    BIDIRECTIONAL = "bidirectional"
    UNI_1 = "uni_1"
    UNI_2 = "uni_2"
    UNI_3 = "uni_3"
    UNI_4 = "uni_4"


_UNI_INDEX = {BranchSet.UNI_1: 1, BranchSet.UNI_2: 2, BranchSet.UNI_3: 3, BranchSet.UNI_4: 4}


def branch_count(branch_set: BranchSet) -> int:
    if branch_set == BranchSet.BIDIRECTIONAL_GLOBAL_LOCAL:
        return 6
    if branch_set == BranchSet.BIDIRECTIONAL:
        return 4
    return 2


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 20
    d_m: int = 64
    frames: int = 243
    joints: int = 17
    state_size: int = 16
    conv_kernel: int = 4
    mlp_expansion: int = 2
    branch_set: BranchSet = BranchSet.BIDIRECTIONAL_GLOBAL_LOCAL
    precision: int = 32
    share_branch_params: bool = False

    def __post_init__(self):
        for name in ("depth", "d_m", "frames", "joints", "state_size", "conv_kernel", "mlp_expansion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if not isinstance(self.branch_set, BranchSet):
            object.__setattr__(self, "branch_set", BranchSet(self.branch_set))

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @classmethod
    def variant(cls, name: str, **overrides) -> "ModelConfig":
        """Published size presets: S, B, and L."""
        presets = {
            "s": dict(depth=20, d_m=64, frames=243),
            "b": dict(depth=20, d_m=128, frames=243),
            "l": dict(depth=40, d_m=128, frames=243),
        }
        key = name.lower()
        if key not in presets:
            raise ConfigError(f"unknown variant {name!r}, expected one of S/B/L")
        params = dict(presets[key])
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["branch_set"] = self.branch_set.value
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown model config fields: {sorted(extra)}")
        return cls(**obj)


def branch_orders(config: ModelConfig, skeleton: Skeleton) -> list[ScanOrder]:
    """Scan orders for every branch of the configured strategy."""
    t, j = config.frames, config.joints
    bs = config.branch_set
    if bs == BranchSet.BIDIRECTIONAL_GLOBAL_LOCAL:
        gs = global_spatial_order(t, j)
        ls = local_spatial_order(t, j, skeleton)
        tm = temporal_order(t, j)
        return [gs, reverse_order(gs), ls, reverse_order(ls), tm, reverse_order(tm)]
    if bs == BranchSet.BIDIRECTIONAL:
        gs = global_spatial_order(t, j)
        tm = temporal_order(t, j)
        return [gs, reverse_order(gs), tm, reverse_order(tm)]
    return unidirectional_variant(_UNI_INDEX[bs], t, j, skeleton)


@dataclass
class EmbeddingParams:
    w_e: Tensor     # [2, d]
    b_e: Tensor     # [d]
    e_spos: Tensor  # [J, d]
    e_tpos: Tensor  # [T, d]


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ln3_gamma: Tensor
    ln3_beta: Tensor
    dw_kernel: Tensor                     # [k, d]
    branch_ssm: list[SelectiveSSMParams]  # one per scan order (possibly shared)
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def _init_embedding(config: ModelConfig, rng: np.random.Generator) -> EmbeddingParams:
    d, dtype = config.d_m, config.dtype
    return EmbeddingParams(
        w_e=_uniform(rng, 2, (2, d), dtype),
        b_e=_zeros((d,), dtype),
        e_spos=Tensor(rng.normal(0.0, 0.02, size=(config.joints, d)), requires_grad=True, dtype=dtype),
        e_tpos=Tensor(rng.normal(0.0, 0.02, size=(config.frames, d)), requires_grad=True, dtype=dtype),
    )


def _init_block(config: ModelConfig, rng: np.random.Generator) -> BlockParams:
    d, k, dtype = config.d_m, config.conv_kernel, config.dtype
    hidden = config.mlp_expansion * d
    nb = branch_count(config.branch_set)
    if config.share_branch_params:
        shared = SelectiveSSMParams.init(d, config.state_size, rng, dtype)
        branches = [shared] * nb
    else:
        branches = [SelectiveSSMParams.init(d, config.state_size, rng, dtype) for _ in range(nb)]
    return BlockParams(
        ln1_gamma=_ones((d,), dtype), ln1_beta=_zeros((d,), dtype),
        ln2_gamma=_ones((d,), dtype), ln2_beta=_zeros((d,), dtype),
        ln3_gamma=_ones((d,), dtype), ln3_beta=_zeros((d,), dtype),
        dw_kernel=_uniform(rng, k, (k, d), dtype),
        branch_ssm=branches,
        mlp_w1=_uniform(rng, d, (d, hidden), dtype),
        mlp_b1=_zeros((hidden,), dtype),
        mlp_w2=_uniform(rng, hidden, (hidden, d), dtype),
        mlp_b2=_zeros((d,), dtype),
    )


def embed(c, params: EmbeddingParams, config: ModelConfig) -> Tensor:
    """Project keypoints to d_m and add spatial then temporal position terms.

    Each addition is followed by an affine-free layer normalization.
    """
    x = c if isinstance(c, Tensor) else Tensor(np.asarray(c), dtype=config.dtype)
    t, j = config.frames, config.joints
    if x.shape != (t, j, 2):
        raise ConfigError(f"input shape {x.shape} does not match config ({t}, {j}, 2)")
    d = config.d_m
    flat = nm.reshape(x, (t * j, 2))
    proj = nm.add(nm.matmul(flat, params.w_e), params.b_e)
    grid = nm.reshape(proj, (t, j, d))
    spos = nm.broadcast_to(nm.reshape(params.e_spos, (1, j, d)), (t, j, d))
    grid = nm.layer_norm(nm.add(grid, spos), eps=LN_EPS)
    tpos = nm.broadcast_to(nm.reshape(params.e_tpos, (t, 1, d)), (t, j, d))
    return nm.layer_norm(nm.add(grid, tpos), eps=LN_EPS)


def block_forward(z: Tensor, params: BlockParams, orders: list[ScanOrder],
                  mode: str = "parallel") -> Tensor:
    """One scan block; preserves the [T, J, d] shape."""
    if len(params.branch_ssm) != len(orders):
        raise ConfigError(
            f"{len(params.branch_ssm)} branch parameter sets for {len(orders)} scan orders"
        )
    t, j, d = z.shape
    u = nm.layer_norm(z, params.ln1_gamma, params.ln1_beta, eps=LN_EPS)
    u = nm.reshape(u, (t * j, d))
    u = nm.depthwise_conv1d(u, params.dw_kernel, causal=True)
    u = nm.silu(u)
    mixed: Tensor | None = None
    for ssm_params, order in zip(params.branch_ssm, orders):
        xb = apply_order(u, order)
        yb = selective_ssm_forward(xb, ssm_params, mode=mode)
        yb = invert_order(yb, order)
        mixed = yb if mixed is None else nm.add(mixed, yb)
    mixed = nm.layer_norm(mixed, params.ln2_gamma, params.ln2_beta, eps=LN_EPS)
    z1 = nm.add(nm.reshape(mixed, (t, j, d)), z)
    h = nm.layer_norm(z1, params.ln3_gamma, params.ln3_beta, eps=LN_EPS)
    h = nm.reshape(h, (t * j, d))
    h = nm.silu(nm.add(nm.matmul(h, params.mlp_w1), params.mlp_b1))
    h = nm.add(nm.matmul(h, params.mlp_w2), params.mlp_b2)
    return nm.add(nm.reshape(h, (t, j, d)), z1)


class PoseLifter:
    """Embeddings, a stack of scan blocks, and a linear 3D regression head."""

    def __init__(self, config: ModelConfig, skeleton: Skeleton | None = None, seed: int = 0):
        skeleton = skeleton if skeleton is not None else h36m17_skeleton()
        if skeleton.joint_count != config.joints:
            raise ConfigError(
                f"skeleton has {skeleton.joint_count} joints, config expects {config.joints}"
            )
        self.config = config
        self.skeleton = skeleton
        self.orders = branch_orders(config, skeleton)
        rng = np.random.default_rng(seed)
        self.embedding = _init_embedding(config, rng)
        self.blocks = [_init_block(config, rng) for _ in range(config.depth)]
        self.head_w = _uniform(rng, config.d_m, (config.d_m, 3), config.dtype)
        self.head_b = _zeros((3,), config.dtype)

    def forward(self, c, mode: str = "parallel") -> Tensor:
        """Map a [T, J, 2] keypoint sequence to [T, J, 3] positions."""
        x = embed(c, self.embedding, self.config)
        for block in self.blocks:
            x = block_forward(x, block, self.orders, mode=mode)
        t, j = self.config.frames, self.config.joints
        flat = nm.reshape(x, (t * j, self.config.d_m))
        out = nm.add(nm.matmul(flat, self.head_w), self.head_b)
        return nm.reshape(out, (t, j, 3))

    def __call__(self, c, mode: str = "parallel") -> Tensor:
        return self.forward(c, mode=mode)

    def named_parameters(self) -> dict[str, Tensor]:
        """Trainable tensors by stable name; shared branch tensors appear once."""
        params: dict[str, Tensor] = {
            "embedding.w_e": self.embedding.w_e,
            "embedding.b_e": self.embedding.b_e,
            "embedding.e_spos": self.embedding.e_spos,
            "embedding.e_tpos": self.embedding.e_tpos,
        }
        for i, block in enumerate(self.blocks):
            prefix = f"blocks.{i}"
            for name in ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
                         "ln3_gamma", "ln3_beta", "dw_kernel",
                         "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
                params[f"{prefix}.{name}"] = getattr(block, name)
            seen: dict[int, str] = {}
            for b, ssm in enumerate(block.branch_ssm):
                if id(ssm) in seen:
                    continue
                seen[id(ssm)] = f"{prefix}.branch{b}"
                for key, tensor in ssm.tensors().items():
                    params[f"{prefix}.branch{b}.{key}"] = tensor
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None


def model_forward(c, model: PoseLifter, mode: str = "parallel") -> Tensor:
    return model.forward(c, mode=mode)


def flip_inference(c, model: PoseLifter, skeleton: Skeleton | None = None) -> np.ndarray:
    """Average of the plain forward pass and the mirrored-unmirrored pass."""
    skeleton = skeleton if skeleton is not None else model.skeleton
    pairs = skeleton.left_right_pairs
    if not pairs:
        raise ConfigError("skeleton defines no left/right pairs for flip inference")
    c = np.asarray(c, dtype=np.float64)
    with nm.no_grad():
        plain = model.forward(c).data.astype(np.float64)
        mirrored = model.forward(mirror_sequence(c, pairs)).data.astype(np.float64)
    return 0.5 * (plain + mirror_sequence(mirrored, pairs))


def parameter_breakdown(config: ModelConfig) -> dict[str, int]:
    """Exact trainable-scalar counts by section."""
    d, n, k = config.d_m, config.state_size, config.conv_kernel
    hidden = config.mlp_expansion * d
    nb = 1 if config.share_branch_params else branch_count(config.branch_set)
    per_branch = 3 * d * n + 3 * d  # a_log, w_b, w_c | w_delta, b_delta, d_skip
    block = 6 * d + k * d + nb * per_branch + d * hidden + hidden + hidden * d + d
    embeddings = (2 * d + d) + config.joints * d + config.frames * d
    head = 3 * d + 3
    return {
        "embeddings": embeddings,
        "blocks": config.depth * block,
        "head": head,
        "total": embeddings + config.depth * block + head,
    }


def parameter_count(config: ModelConfig) -> int:
    return parameter_breakdown(config)["total"]


def mac_estimate(config: ModelConfig) -> int:
    """Analytic multiply-accumulate count for one forward pass.

    Counting rules: dense projections, convolution taps, discretization
    products, scan updates (one MAC per state element per step), and the
    state read-out. Normalizations, activations, and residual adds are
    excluded.
    """
    o = config.frames * config.joints
    d, n, k = config.d_m, config.state_size, config.conv_kernel
    nb = branch_count(config.branch_set)
    per_branch = 2 * o * d * n + o * d + 3 * o * d * n + o * d * n + o * d * n + o * d
    block = o * d * k + nb * per_branch + 2 * config.mlp_expansion * o * d * d
    embeddings = o * 2 * d
    head = o * d * 3
    return embeddings + config.depth * block + head


def _dtype_code(dtype: np.dtype) -> str:
    return {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}[np.dtype(dtype)]


_DTYPE_FROM_CODE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(model: PoseLifter, path: str | Path) -> None:
    """Versioned binary container: manifest JSON + little-endian tensor data + CRC."""
    tensors = model.named_parameters()
    entries = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        code = _dtype_code(tensor.dtype)
        blob = tensor.data.astype(_DTYPE_FROM_CODE[code]).tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": code,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    data = b"".join(blobs)
    manifest = {
        "config": model.config.to_dict(),
        "tensors": entries,
        "data_crc32": zlib.crc32(data),
    }
    manifest_bytes = json.dumps(manifest).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        fh.write(data)


def load_checkpoint(path: str | Path, skeleton: Skeleton | None = None) -> PoseLifter:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != _CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    mlen = struct.unpack("<Q", raw[12:20])[0]
    manifest = json.loads(raw[20:20 + mlen].decode("utf-8"))
    data = raw[20 + mlen:]
    if zlib.crc32(data) != manifest["data_crc32"]:
        raise ConfigError(f"{path}: checkpoint data checksum mismatch")
    config = ModelConfig.from_dict(manifest["config"])
    model = PoseLifter(config, skeleton=skeleton, seed=0)
    params = model.named_parameters()
    manifest_names = {e["name"] for e in manifest["tensors"]}
    if manifest_names != set(params):
        raise ConfigError(f"{path}: tensor names do not match the rebuilt model")
    for entry in manifest["tensors"]:
        tensor = params[entry["name"]]
        if list(tensor.shape) != entry["shape"]:
            raise ConfigError(
                f"{path}: tensor {entry['name']} shape {entry['shape']} != {list(tensor.shape)}"
            )
        blob = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(blob, dtype=_DTYPE_FROM_CODE[entry["dtype"]]).reshape(entry["shape"])
        tensor.data = arr.astype(tensor.dtype)
    return model
