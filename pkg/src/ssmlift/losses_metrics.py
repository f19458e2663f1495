"""Training losses and evaluation metrics for 3D pose sequences.

Losses are differentiable tensor expressions; metrics operate on float64
numpy arrays. Protocol 1 is the mean per-joint position error after
root-joint alignment; Protocol 2 applies a per-frame similarity (Procrustes)
alignment before measuring; MPJVE measures first-order velocity error.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import AlignmentError, DegenerateInputError, DimensionError, ParameterError
from .numerics import Tensor

__all__ = [
    "LossWeights",
    "mpjpe_loss",
    "mpjve_loss",
    "tc_loss",
    "reproj_2d_loss",
    "total_loss",
    "metric_mpjpe",
    "metric_mpjve",
    "metric_p_mpjpe",
    "similarity_align",
    "jacobi_svd_3x3",
    "root_center",
    "ActionMetrics",
    "EvalReport",
    "build_eval_report",
]


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative mixing weights for the composite loss."""

    lambda_t: float = 20.0
    lambda_m: float = 1.0
    lambda_2d: float = 1.0

    def __post_init__(self):
        for name in ("lambda_t", "lambda_m", "lambda_2d"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, copy=False)


def _check_pose_pair(pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and target {gt.shape} differ")
    if pred.ndim != 3:
        raise DimensionError(f"expected [T, J, C] sequences, got {pred.shape}")


def _mean_joint_distance(diff: Tensor) -> Tensor:
    sq = nm.tensor_sum(nm.mul(diff, diff), axis=2)
    return nm.tensor_mean(nm.sqrt(sq))


def mpjpe_loss(pred, gt) -> Tensor:
    """Mean Euclidean joint error; callers root-align both sequences first."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _check_pose_pair(pred, gt)
    return _mean_joint_distance(nm.sub(pred, gt))


def _velocities(x: Tensor) -> Tensor:
    t = x.shape[0]
    return nm.sub(nm.slice_along(x, 0, 1, t), nm.slice_along(x, 0, 0, t - 1))


def mpjve_loss(pred, gt) -> Tensor:
    """Mean per-joint error of first-order velocities."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _check_pose_pair(pred, gt)
    if pred.shape[0] < 2:
        raise DegenerateInputError("velocity error needs at least two frames")
    return _mean_joint_distance(nm.sub(_velocities(pred), _velocities(gt)))


def tc_loss(pred) -> Tensor:
    """Smoothness penalty: mean squared norm of consecutive prediction differences."""
    pred = _as_tensor(pred)
    if pred.ndim != 3:
        raise DimensionError(f"expected [T, J, C] sequence, got {pred.shape}")
    if pred.shape[0] < 2:
        raise DegenerateInputError("temporal consistency needs at least two frames")
    vel = _velocities(pred)
    return nm.tensor_mean(nm.tensor_sum(nm.mul(vel, vel), axis=2))


def reproj_2d_loss(pred, input2d) -> Tensor:
    """Orthographic reprojection error after a least-squares scale/translation fit.

    Depth is dropped, then one scalar scale and a 2D translation are fitted
    over the whole sequence to match the input keypoints; the loss is the
    mean per-joint 2D distance after that fit.
    """
    pred = _as_tensor(pred)
    input2d = _as_tensor(input2d)
    if pred.ndim != 3 or pred.shape[2] < 2:
        raise DimensionError(f"expected [T, J, 3] prediction, got {pred.shape}")
    if input2d.shape != (pred.shape[0], pred.shape[1], 2):
        raise DimensionError(f"2D input {input2d.shape} does not match prediction {pred.shape}")
    proj = nm.slice_along(pred, 2, 0, 2)
    p_mean = nm.tensor_mean(nm.reshape(proj, (-1, 2)), axis=0)
    q_mean = nm.tensor_mean(nm.reshape(input2d, (-1, 2)), axis=0)
    pc = nm.sub(proj, p_mean)
    qc = nm.sub(input2d, q_mean)
    den = nm.tensor_sum(nm.mul(pc, pc))
    if float(den.data) < 1e-12:
        raise AlignmentError("projected prediction is constant; scale fit is degenerate")
    scale = nm.div(nm.tensor_sum(nm.mul(pc, qc)), den)
    residual = nm.sub(nm.mul(pc, scale), qc)
    return _mean_joint_distance(residual)


def total_loss(pred, gt, input2d, weights: LossWeights) -> Tensor:
    """Composite loss: position + weighted smoothness, velocity, and 2D terms.

    Zero-weight terms are skipped entirely, so all-zero weights reduce the
    loss to the position term exactly.
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    loss = mpjpe_loss(pred, gt)
    if weights.lambda_t > 0:
        loss = nm.add(loss, nm.mul(tc_loss(pred), weights.lambda_t))
    if weights.lambda_m > 0:
        loss = nm.add(loss, nm.mul(mpjve_loss(pred, gt), weights.lambda_m))
    if weights.lambda_2d > 0:
        loss = nm.add(loss, nm.mul(reproj_2d_loss(pred, input2d), weights.lambda_2d))
    return loss


def root_center(x: np.ndarray, root: int = 0) -> np.ndarray:
    """Translate each frame so the root joint sits at the origin."""
    x = np.asarray(x, dtype=np.float64)
    return x - x[:, root:root + 1, :]


def metric_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Protocol 1: mean per-joint distance in mm after per-frame root alignment."""
    pred, gt = root_center(pred), root_center(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and target {gt.shape} differ")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def metric_mpjve(pred: np.ndarray, gt: np.ndarray) -> float:
    """Velocity error in mm after root alignment; needs at least two frames."""
    pred, gt = root_center(pred), root_center(gt)
    if pred.shape[0] < 2:
        raise DegenerateInputError("velocity error needs at least two frames")
    vp = np.diff(pred, axis=0)
    vg = np.diff(gt, axis=0)
    return float(np.mean(np.linalg.norm(vp - vg, axis=-1)))


def _det3(m: np.ndarray) -> float:
    return float(
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )


def jacobi_svd_3x3(m: np.ndarray, sweeps: int = 30, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix by one-sided Jacobi column orthogonalization.

    Returns (U, s, Vt) with singular values sorted descending and full
    orthogonal factors even for rank-deficient inputs.
    """
    b = np.array(m, dtype=np.float64, copy=True)
    if b.shape != (3, 3):
        raise DimensionError(f"expected a 3x3 matrix, got {b.shape}")
    v = np.eye(3)
    for _ in range(sweeps):
        off = 0.0
        for p, q in ((0, 1), (0, 2), (1, 2)):
            alpha = float(b[:, p] @ b[:, p])
            beta = float(b[:, q] @ b[:, q])
            gamma = float(b[:, p] @ b[:, q])
            off = max(off, abs(gamma))
            if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                continue
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            bp, bq = b[:, p].copy(), b[:, q].copy()
            b[:, p] = c * bp - s * bq
            b[:, q] = s * bp + c * bq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off <= tol:
            break
    sigma = np.sqrt(np.sum(b * b, axis=0))
    order = np.argsort(-sigma)
    sigma = sigma[order]
    b = b[:, order]
    v = v[:, order]
    u = np.zeros((3, 3))
    for i in range(3):
        if sigma[i] > 1e-300:
            u[:, i] = b[:, i] / sigma[i]
        else:
            # Complete a degenerate column orthogonally to the filled ones.
            cand = _orthogonal_complement(u, i)
            u[:, i] = cand / np.sqrt(cand @ cand)
    return u, sigma, v.T


def _orthogonal_complement(u: np.ndarray, i: int) -> np.ndarray:
    for seed in np.eye(3):
        cand = seed.copy()
        for k in range(3):
            if k != i and (u[:, k] @ u[:, k]) > 0.5:
                cand -= (cand @ u[:, k]) * u[:, k]
        if cand @ cand > 1e-12:
            return cand
    raise AlignmentError("could not complete an orthogonal basis")


def similarity_align(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Best-fit similarity transform (scale, rotation, translation) of source onto target.

    Solves the orthogonal Procrustes problem on one [J, 3] frame with
    reflection correction; raises AlignmentError for rank-deficient frames.
    """
    x = np.asarray(source, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise DimensionError(f"expected matching [J, 3] frames, got {x.shape} and {y.shape}")
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    norm_x = np.sqrt((xc * xc).sum())
    norm_y = np.sqrt((yc * yc).sum())
    if norm_x < 1e-12 or norm_y < 1e-12:
        raise AlignmentError("frame has zero spatial extent")
    x0 = xc / norm_x
    y0 = yc / norm_y
    h = y0.T @ x0
    u, sigma, vt = jacobi_svd_3x3(h)
    if sigma[1] <= 1e-9 * max(sigma[0], 1e-300):
        raise AlignmentError("frame is collinear; rotation is ambiguous")
    v = vt.T
    r = v @ u.T
    if _det3(r) < 0:
        v = v.copy()
        v[:, -1] *= -1.0
        sigma = sigma.copy()
        sigma[-1] *= -1.0
        r = v @ u.T
    scale = sigma.sum() * norm_y / norm_x
    return scale * (x - mu_x) @ r + mu_y


def metric_p_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Protocol 2: per-frame similarity alignment of prediction onto target, then MPJPE.

    Collinear frames are skipped from the aggregate with a warning.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and target {gt.shape} differ")
    if pred.shape[1] < 3:
        raise DegenerateInputError("Procrustes alignment needs at least three joints")
    errs = []
    skipped = 0
    for f in range(pred.shape[0]):
        try:
            aligned = similarity_align(pred[f], gt[f])
        except AlignmentError:
            skipped += 1
            continue
        errs.append(np.mean(np.linalg.norm(aligned - gt[f], axis=-1)))
    if skipped:
        warnings.warn(f"skipped {skipped} rank-deficient frame(s) in Procrustes alignment")
    if not errs:
        raise AlignmentError("every frame was rank-deficient")
    return float(np.mean(errs))


@dataclass
class ActionMetrics:
    mpjpe_mm: float
    p_mpjpe_mm: float
    mpjve_mm: float
    frames: int

    def __post_init__(self):
        for name in ("mpjpe_mm", "p_mpjpe_mm", "mpjve_mm"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ParameterError(f"{name} must be finite and nonnegative, got {value}")


@dataclass
class EvalReport:
    """Per-action and aggregate errors; serializes to a delimited text table."""

    per_action: dict[str, ActionMetrics]
    aggregate: ActionMetrics
    protocol: str = "all"
    flip: bool = False

    def to_table(self, delimiter: str = "\t") -> str:
        actions = sorted(self.per_action)
        header = ["Metric", *actions, "Avg"]
        rows = []
        for label, attr in (("MPJPE", "mpjpe_mm"), ("P-MPJPE", "p_mpjpe_mm"), ("MPJVE", "mpjve_mm")):
            cells = [f"{getattr(self.per_action[a], attr):.3f}" for a in actions]
            cells.append(f"{getattr(self.aggregate, attr):.3f}")
            rows.append([label, *cells])
        lines = [delimiter.join(header)]
        lines.extend(delimiter.join(r) for r in rows)
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        from pathlib import Path

        Path(path).write_text(self.to_table())


def build_eval_report(
    items: list[tuple[str, np.ndarray, np.ndarray]],
    protocol: str = "all",
    flip: bool = False,
) -> EvalReport:
    """Aggregate (action, prediction, target) sequence triples into a report.

    Per-action values are frame-weighted means; the aggregate is frame-weighted
    over everything.
    """
    buckets: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for action, pred, gt in items:
        buckets.setdefault(action or "unlabeled", []).append((pred, gt))
    per_action: dict[str, ActionMetrics] = {}
    totals = np.zeros(3)
    total_frames = 0
    for action, pairs in buckets.items():
        sums = np.zeros(3)
        frames = 0
        for pred, gt in pairs:
            t = pred.shape[0]
            sums[0] += metric_mpjpe(pred, gt) * t
            sums[1] += metric_p_mpjpe(root_center(pred), root_center(gt)) * t
            sums[2] += (metric_mpjve(pred, gt) * t) if t >= 2 else 0.0
            frames += t
        per_action[action] = ActionMetrics(
            mpjpe_mm=sums[0] / frames,
            p_mpjpe_mm=sums[1] / frames,
            mpjve_mm=sums[2] / frames,
            frames=frames,
        )
        totals += sums
        total_frames += frames
    aggregate = ActionMetrics(
        mpjpe_mm=totals[0] / total_frames,
        p_mpjpe_mm=totals[1] / total_frames,
        mpjve_mm=totals[2] / total_frames,
        frames=total_frames,
    )
    return EvalReport(per_action=per_action, aggregate=aggregate, protocol=protocol, flip=flip)
