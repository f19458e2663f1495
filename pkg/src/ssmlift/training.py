"""Optimizer, schedules, and the training / evaluation loops."""
from __future__ import annotations

import json
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data_io import (
    CameraConfig,
    Clip,
    SequenceRecord,
    SyntheticConfig,
    load_dataset,
    make_clips,
    synth_generate,
)
from .errors import ConfigError, NumericalFailure
from .losses_metrics import (
    LossWeights,
    build_eval_report,
    metric_mpjpe,
    mpjpe_loss,
    mpjve_loss,
    reproj_2d_loss,
    root_center,
    tc_loss,
    EvalReport,
)
from .model import (
    BranchSet,
    ModelConfig,
    PoseLifter,
    flip_inference,
    mac_estimate,
    parameter_count,
    save_checkpoint,
)
from .numerics import Tensor
from .scan_orders import Skeleton, h36m17_skeleton, mirror_sequence

__all__ = [
    "OptimizerConfig",
    "ScheduleConfig",
    "DatasetSpec",
    "TrainConfig",
    "TrainResult",
    "AdamW",
    "train",
    "predict_record",
    "evaluate_records",
    "run_ablation",
    "ABLATION_STRATEGIES",
]


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 2e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind != "adamw":
            raise ConfigError(f"unsupported optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "exponential"
    decay_factor: float = 0.99

    def __post_init__(self):
        if self.kind != "exponential":
            raise ConfigError(f"unsupported schedule kind {self.kind!r}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must be in (0, 1]")


@dataclass
class DatasetSpec:
    """Either a dataset file path or an inline synthetic recipe."""

    path: str | None = None
    synthetic: SyntheticConfig | None = None

    def load(self) -> list[SequenceRecord]:
        if (self.path is None) == (self.synthetic is None):
            raise ConfigError("dataset spec needs exactly one of 'path' or 'synthetic'")
        if self.path is not None:
            return load_dataset(self.path)
        return synth_generate(self.synthetic)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    epochs: int = 120
    batch_size: int = 4
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    max_steps: int | None = None
    flip_augment: bool = False
    val_fraction: float = 0.1
    clip_stride: int | None = None
    grad_clip: float | None = None
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    scan_mode: str = "parallel"

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        kwargs: dict = {}
        if "model" in obj:
            kwargs["model"] = ModelConfig.from_dict(obj.pop("model"))
        if "loss" in obj:
            kwargs["loss"] = LossWeights(**obj.pop("loss"))
        if "optimizer" in obj:
            opt = dict(obj.pop("optimizer"))
            if "betas" in opt:
                opt["betas"] = tuple(opt["betas"])
            kwargs["optimizer"] = OptimizerConfig(**opt)
        if "schedule" in obj:
            kwargs["schedule"] = ScheduleConfig(**obj.pop("schedule"))
        if "dataset" in obj:
            ds = dict(obj.pop("dataset"))
            synthetic = ds.get("synthetic")
            if synthetic is not None:
                synthetic = _synthetic_from_dict(synthetic)
            kwargs["dataset"] = DatasetSpec(path=ds.get("path"), synthetic=synthetic)
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown train config fields: {sorted(extra)}")
        kwargs.update(obj)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(obj)


def _synthetic_from_dict(obj: dict) -> SyntheticConfig:
    obj = dict(obj)
    skeleton = obj.pop("skeleton", "h36m17")
    if skeleton == "h36m17":
        skel = h36m17_skeleton()
    else:
        skel = Skeleton.from_file(skeleton)
    camera = obj.pop("camera", None)
    cam = CameraConfig(**camera) if camera else CameraConfig()
    if "motion_frequencies" in obj:
        obj["motion_frequencies"] = tuple(obj["motion_frequencies"])
    if "bone_lengths_mm" in obj and obj["bone_lengths_mm"] is not None:
        obj["bone_lengths_mm"] = tuple(obj["bone_lengths_mm"])
    return SyntheticConfig(skeleton=skel, camera=cam, **obj)


class AdamW:
    """Adam with decoupled weight decay; moments kept in float64."""

    def __init__(self, params: dict[str, Tensor], config: OptimizerConfig):
        self.params = params
        self.config = config
        self._m = {k: np.zeros(t.shape, dtype=np.float64) for k, t in params.items()}
        self._v = {k: np.zeros(t.shape, dtype=np.float64) for k, t in params.items()}
        self._t = 0

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float | None = None) -> None:
        cfg = self.config
        lr = cfg.lr if lr is None else lr
        b1, b2 = cfg.betas
        self._t += 1
        bc1 = 1.0 - b1 ** self._t
        bc2 = 1.0 - b2 ** self._t
        for key, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(np.float64)
            m = self._m[key]
            v = self._v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            new = p.data.astype(np.float64) - lr * (update + cfg.weight_decay * p.data.astype(np.float64))
            p.data = new.astype(p.data.dtype)


def clip_loss(pred: Tensor, clip: Clip, weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Composite loss over the valid (unpadded) frames of one clip."""
    v = clip.valid_frames
    pred_v = nm.slice_along(pred, 0, 0, v)
    gt_v = Tensor(clip.poses_3d[:v], copy=False)
    in2d_v = Tensor(clip.keypoints_2d[:v], copy=False)
    l3d = mpjpe_loss(pred_v, gt_v)
    loss = l3d
    parts = {"l3d": l3d.item(), "lt": 0.0, "lm": 0.0, "l2d": 0.0}
    if weights.lambda_t > 0 and v >= 2:
        lt = tc_loss(pred_v)
        parts["lt"] = lt.item()
        loss = nm.add(loss, nm.mul(lt, weights.lambda_t))
    if weights.lambda_m > 0 and v >= 2:
        lm = mpjve_loss(pred_v, gt_v)
        parts["lm"] = lm.item()
        loss = nm.add(loss, nm.mul(lm, weights.lambda_m))
    if weights.lambda_2d > 0:
        l2d = reproj_2d_loss(pred_v, in2d_v)
        parts["l2d"] = l2d.item()
        loss = nm.add(loss, nm.mul(l2d, weights.lambda_2d))
    return loss, parts


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    steps_run: int
    initial_train_mpjpe: float
    final_train_mpjpe: float
    final_val_mpjpe: float | None
    history: list[dict]


def _split_records(records: list[SequenceRecord], val_fraction: float):
    ordered = sorted(records, key=lambda r: r.id)
    n_val = int(len(ordered) * val_fraction)
    if n_val == 0:
        return ordered, []
    return ordered[:-n_val], ordered[-n_val:]


def _dataset_mpjpe(model: PoseLifter, clips: list[Clip], mode: str) -> float:
    errs = []
    with nm.no_grad():
        for clip in clips:
            pred = model.forward(clip.keypoints_2d, mode=mode).data
            v = clip.valid_frames
            errs.append(metric_mpjpe(pred[:v], clip.poses_3d[:v]))
    return float(np.mean(errs))


def _flip_clip(clip: Clip, skeleton: Skeleton) -> Clip:
    pairs = skeleton.left_right_pairs
    return Clip(
        record_id=clip.record_id,
        action=clip.action,
        start=clip.start,
        valid_frames=clip.valid_frames,
        keypoints_2d=mirror_sequence(clip.keypoints_2d, pairs),
        poses_3d=mirror_sequence(clip.poses_3d, pairs),
        mask=clip.mask,
    )


def train(cfg: TrainConfig, log=print) -> TrainResult:
    """Minibatch optimization with decoupled weight decay and per-epoch decay.

    Writes periodic checkpoints plus a key=value metrics log; a non-finite
    loss aborts with the last-good checkpoint retained.
    """
    records = cfg.dataset.load()
    if not records:
        raise ConfigError("dataset is empty")
    train_records, val_records = _split_records(records, cfg.val_fraction)
    stride = cfg.clip_stride or cfg.model.frames
    train_clips = [c for c in make_clips(train_records, cfg.model.frames, stride)
                   if c.poses_3d is not None]
    val_clips = [c for c in make_clips(val_records, cfg.model.frames, stride)
                 if c.poses_3d is not None]
    if not train_clips:
        raise ConfigError("no usable training clips (missing 3D targets?)")

    model = PoseLifter(cfg.model, seed=cfg.seed)
    optimizer = AdamW(model.named_parameters(), cfg.optimizer)
    rng = np.random.default_rng(cfg.seed + 1)

    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = ckpt_dir / "metrics.log"
    final_path = ckpt_dir / "final.ckpt"
    history: list[dict] = []

    def emit(**kv):
        line = " ".join(f"{k}={v}" for k, v in kv.items())
        log(line)
        with metrics_path.open("a") as fh:
            fh.write(line + "\n")

    metrics_path.write_text("")
    initial_mpjpe = _dataset_mpjpe(model, train_clips, cfg.scan_mode)
    emit(event="start", params=parameter_count(cfg.model), train_clips=len(train_clips),
         val_clips=len(val_clips), initial_train_mpjpe=f"{initial_mpjpe:.4f}")

    step = 0
    last_good: Path | None = None
    t0 = time.perf_counter()
    stop = False
    for epoch in range(cfg.epochs):
        lr = cfg.optimizer.lr * (cfg.schedule.decay_factor ** epoch)
        order = rng.permutation(len(train_clips))
        for batch_start in range(0, len(order), cfg.batch_size):
            batch = [train_clips[i] for i in order[batch_start:batch_start + cfg.batch_size]]
            optimizer.zero_grad()
            batch_loss = 0.0
            parts_sum = {"l3d": 0.0, "lt": 0.0, "lm": 0.0, "l2d": 0.0}
            for clip in batch:
                if cfg.flip_augment and rng.random() < 0.5:
                    clip = _flip_clip(clip, model.skeleton)
                pred = model.forward(clip.keypoints_2d, mode=cfg.scan_mode)
                loss, parts = clip_loss(pred, clip, cfg.loss)
                value = loss.item()
                if not np.isfinite(value):
                    emit(event="abort", reason="non_finite_loss", epoch=epoch, step=step)
                    raise NumericalFailure(
                        f"non-finite loss at step {step}; last checkpoint: {last_good}"
                    )
                nm.backward(loss)
                batch_loss += value
                for k in parts_sum:
                    parts_sum[k] += parts[k]
            if cfg.grad_clip is not None:
                _clip_gradients(model, cfg.grad_clip)
            optimizer.step(lr=lr)
            step += 1
            n = len(batch)
            entry = {
                "event": "step", "epoch": epoch, "step": step,
                "loss": round(batch_loss / n, 6),
                "l3d": round(parts_sum["l3d"] / n, 6),
                "lt": round(parts_sum["lt"] / n, 6),
                "lm": round(parts_sum["lm"] / n, 6),
                "l2d": round(parts_sum["l2d"] / n, 6),
                "lr": f"{lr:.6g}",
                "wall_s": round(time.perf_counter() - t0, 3),
            }
            history.append(entry)
            emit(**entry)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            last_good = ckpt_dir / f"epoch_{epoch + 1:04d}.ckpt"
            save_checkpoint(model, last_good)
        if val_clips:
            val_mpjpe = _dataset_mpjpe(model, val_clips, cfg.scan_mode)
            emit(event="val", epoch=epoch, step=step, val_mpjpe=f"{val_mpjpe:.4f}")
        if stop:
            break

    save_checkpoint(model, final_path)
    final_mpjpe = _dataset_mpjpe(model, train_clips, cfg.scan_mode)
    final_val = _dataset_mpjpe(model, val_clips, cfg.scan_mode) if val_clips else None
    emit(event="done", steps=step, final_train_mpjpe=f"{final_mpjpe:.4f}",
         final_val_mpjpe="na" if final_val is None else f"{final_val:.4f}")
    return TrainResult(
        checkpoint_path=str(final_path),
        metrics_path=str(metrics_path),
        steps_run=step,
        initial_train_mpjpe=initial_mpjpe,
        final_train_mpjpe=final_mpjpe,
        final_val_mpjpe=final_val,
        history=history,
    )


def _clip_gradients(model: PoseLifter, max_norm: float) -> None:
    params = model.named_parameters().values()
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)


def predict_record(model: PoseLifter, record: SequenceRecord, flip: bool = False,
                   mode: str = "parallel") -> np.ndarray:
    """Root-relative 3D prediction for a whole record (windowed to model length)."""
    t = model.config.frames
    clips = make_clips([record], t, t)
    out = np.zeros((record.frames, record.joints, 3))
    with nm.no_grad():
        for clip in clips:
            if flip:
                pred = flip_inference(clip.keypoints_2d, model)
            else:
                pred = model.forward(clip.keypoints_2d, mode=mode).data.astype(np.float64)
            v = clip.valid_frames
            out[clip.start:clip.start + v] = pred[:v]
    return root_center(out)


def evaluate_records(model: PoseLifter, records: list[SequenceRecord], flip: bool = False,
                     protocol: str = "all", mode: str = "parallel") -> EvalReport:
    """Per-action and aggregate metrics over records with 3D targets."""
    items = []
    for record in records:
        if record.poses_3d is None:
            continue
        if record.joints != model.config.joints:
            raise ConfigError(
                f"record {record.id} has {record.joints} joints, model expects {model.config.joints}"
            )
        pred = predict_record(model, record, flip=flip, mode=mode)
        items.append((record.action, pred, record.poses_3d))
    if not items:
        raise ConfigError("no records with 3D targets to evaluate")
    return build_eval_report(items, protocol=protocol, flip=flip)


ABLATION_STRATEGIES: list[tuple[str, BranchSet]] = [
    ("Unidirectional Spatial-Temporal 1", BranchSet.UNI_1),
    ("Unidirectional Spatial-Temporal 2", BranchSet.UNI_2),
    ("Unidirectional Spatial-Temporal 3", BranchSet.UNI_3),
    ("Unidirectional Spatial-Temporal 4", BranchSet.UNI_4),
    ("Bidirectional Spatial-Temporal", BranchSet.BIDIRECTIONAL),
    ("Bidirectional Global-Local Spatial-Temporal", BranchSet.BIDIRECTIONAL_GLOBAL_LOCAL),
]


def run_ablation(seed: int = 0, steps: int = 30, frames: int = 9, sequences: int = 8,
                 d_m: int = 16, depth: int = 2, log=print) -> list[dict]:
    """Train every scan strategy under an identical small budget.

    Branch parameters are shared within each block so the trainable count is
    identical across strategies; the resulting table makes no ordering claim.
    """
    rows = []
    for label, branch_set in ABLATION_STRATEGIES:
        model_cfg = ModelConfig(
            depth=depth, d_m=d_m, frames=frames, joints=17, state_size=8,
            branch_set=branch_set, share_branch_params=True,
        )
        cfg = TrainConfig(
            model=model_cfg,
            loss=LossWeights(0.0, 0.0, 0.0),
            optimizer=OptimizerConfig(lr=2e-3),
            dataset=DatasetSpec(synthetic=SyntheticConfig(
                seed=seed, sequence_count=sequences, frames=frames)),
            epochs=max(1, (steps * 4) // sequences + 1),
            batch_size=4,
            seed=seed,
            checkpoint_dir=f".ablate_{branch_set.value}",
            max_steps=steps,
            val_fraction=0.0,
            checkpoint_every=0,
        )
        with tempfile.TemporaryDirectory() as tmp:
            cfg.checkpoint_dir = tmp
            result = train(cfg, log=lambda line: None)
        row = {
            "strategy": label,
            "params": parameter_count(model_cfg),
            "macs": mac_estimate(model_cfg),
            "final_mpjpe": result.final_train_mpjpe,
        }
        rows.append(row)
        log(f"ablation strategy={label!r} params={row['params']} "
            f"macs={row['macs']} final_mpjpe={row['final_mpjpe']:.4f}")
    return rows
