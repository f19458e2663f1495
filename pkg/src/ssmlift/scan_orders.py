"""Scan-order permutations over the frame-by-joint token grid.

A token grid of T frames and J joints is flattened canonically as
index = t*J + j (frame-major). Every scan strategy is a permutation of
[0, T*J) together with its inverse; backward variants are plain reversals,
so one scan implementation serves every direction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import DimensionError, ParameterError, StructureError
from .numerics import Tensor

__all__ = [
    "ScanLabel",
    "ScanOrder",
    "Skeleton",
    "h36m17_skeleton",
    "global_spatial_order",
    "local_spatial_order",
    "temporal_order",
    "reverse_order",
    "unidirectional_variant",
    "apply_order",
    "invert_order",
    "mirror_sequence",
]


class ScanLabel(str, Enum):
    GLOBAL_SPATIAL_FWD = "global_spatial_fwd"
    GLOBAL_SPATIAL_BWD = "global_spatial_bwd"
    LOCAL_SPATIAL_FWD = "local_spatial_fwd"
    LOCAL_SPATIAL_BWD = "local_spatial_bwd"
    TEMPORAL_FWD = "temporal_fwd"
    TEMPORAL_BWD = "temporal_bwd"
    UNI_VARIANT_1 = "uni_variant_1"
    UNI_VARIANT_2 = "uni_variant_2"
    UNI_VARIANT_3 = "uni_variant_3"
    UNI_VARIANT_4 = "uni_variant_4"


_LABEL_REVERSE = {
    ScanLabel.GLOBAL_SPATIAL_FWD: ScanLabel.GLOBAL_SPATIAL_BWD,
    ScanLabel.GLOBAL_SPATIAL_BWD: ScanLabel.GLOBAL_SPATIAL_FWD,
    ScanLabel.LOCAL_SPATIAL_FWD: ScanLabel.LOCAL_SPATIAL_BWD,
    ScanLabel.LOCAL_SPATIAL_BWD: ScanLabel.LOCAL_SPATIAL_FWD,
    ScanLabel.TEMPORAL_FWD: ScanLabel.TEMPORAL_BWD,
    ScanLabel.TEMPORAL_BWD: ScanLabel.TEMPORAL_FWD,
}


@dataclass(frozen=True)
class ScanOrder:
    """A bijection on token indices with its precomputed inverse."""

    perm: np.ndarray
    inv: np.ndarray
    label: ScanLabel

    @classmethod
    def from_perm(cls, perm: np.ndarray, label: ScanLabel) -> "ScanOrder":
        perm = np.asarray(perm, dtype=np.int64)
        n = perm.shape[0]
        inv = np.empty(n, dtype=np.int64)
        seen = np.zeros(n, dtype=bool)
        if perm.min(initial=0) < 0 or perm.max(initial=-1) >= n:
            raise ParameterError("permutation entries out of range")
        seen[perm] = True
        if not seen.all():
            raise ParameterError("permutation is not a bijection")
        inv[perm] = np.arange(n, dtype=np.int64)
        return cls(perm=perm, inv=inv, label=label)

    def __len__(self) -> int:
        return int(self.perm.shape[0])


@dataclass(frozen=True)
class Skeleton:
    """A kinematic tree: parent indices (root points to itself) plus mirror pairs."""

    names: tuple[str, ...]
    parents: tuple[int, ...]
    left_right_pairs: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        j = len(self.parents)
        if len(self.names) != j:
            raise StructureError(f"{len(self.names)} names for {j} parents")
        if j == 0 or self.parents[0] != 0:
            raise StructureError("joint 0 must be the root (its own parent)")
        for joint in range(j):
            node, steps = joint, 0
            while node != 0:
                node = self.parents[node]
                steps += 1
                if steps > j:
                    raise StructureError(f"joint {joint} does not reach the root (cycle?)")
        used: set[int] = set()
        for left, right in self.left_right_pairs:
            if left == right or not (0 <= left < j and 0 <= right < j):
                raise StructureError(f"bad mirror pair ({left}, {right})")
            if left in used or right in used:
                raise StructureError(f"joint reused in mirror pairs: ({left}, {right})")
            used.update((left, right))

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    def children(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.joint_count)]
        for joint, parent in enumerate(self.parents):
            if joint != 0:
                out[parent].append(joint)
        return out

    def depth_first_order(self) -> np.ndarray:
        """Depth-first walk from the root, children in index order.

        Visits every complete kinematic chain contiguously.
        """
        children = self.children()
        order: list[int] = []
        stack = [0]
        while stack:
            node = stack.pop()
            order.append(node)
            stack.extend(reversed(children[node]))
        if len(order) != self.joint_count:
            raise StructureError("skeleton is not connected")
        return np.asarray(order, dtype=np.int64)

    def to_file(self, path: str | Path) -> None:
        payload = {
            "names": list(self.names),
            "parents": list(self.parents),
            "left_right_pairs": [list(p) for p in self.left_right_pairs],
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def from_file(cls, path: str | Path) -> "Skeleton":
        payload = json.loads(Path(path).read_text())
        return cls(
            names=tuple(payload["names"]),
            parents=tuple(int(p) for p in payload["parents"]),
            left_right_pairs=tuple((int(a), int(b)) for a, b in payload.get("left_right_pairs", [])),
        )


def h36m17_skeleton() -> Skeleton:
    """Standard 17-joint skeleton: pelvis root, right leg, left leg, spine, arms."""
    names = (
        "pelvis", "r_hip", "r_knee", "r_ankle",
        "l_hip", "l_knee", "l_ankle",
        "spine", "thorax", "neck", "head",
        "l_shoulder", "l_elbow", "l_wrist",
        "r_shoulder", "r_elbow", "r_wrist",
    )
    parents = (0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
    pairs = ((4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16))
    return Skeleton(names=names, parents=parents, left_right_pairs=pairs)


def _check_grid(t: int, j: int) -> None:
    if t < 1 or j < 1:
        raise ParameterError(f"grid extents must be positive, got T={t}, J={j}")


def global_spatial_order(t: int, j: int) -> ScanOrder:
    """Frame-major sweep, joints in canonical index order: the identity."""
    _check_grid(t, j)
    return ScanOrder.from_perm(np.arange(t * j, dtype=np.int64), ScanLabel.GLOBAL_SPATIAL_FWD)


def local_spatial_order(t: int, j: int, skeleton: Skeleton) -> ScanOrder:
    """Frame-major sweep with joints in depth-first kinematic-chain order."""
    _check_grid(t, j)
    if skeleton.joint_count != j:
        raise StructureError(f"skeleton has {skeleton.joint_count} joints, grid has {j}")
    walk = skeleton.depth_first_order()
    frames = np.arange(t, dtype=np.int64)[:, None] * j
    return ScanOrder.from_perm((frames + walk[None, :]).reshape(-1), ScanLabel.LOCAL_SPATIAL_FWD)


def temporal_order(t: int, j: int) -> ScanOrder:
    """Joint-major sweep: all frames of joint 0, then joint 1, and so on."""
    _check_grid(t, j)
    grid = np.arange(t * j, dtype=np.int64).reshape(t, j)
    return ScanOrder.from_perm(grid.T.reshape(-1), ScanLabel.TEMPORAL_FWD)


def reverse_order(order: ScanOrder) -> ScanOrder:
    """End-to-end reversal; flips the fwd/bwd direction tag."""
    label = _LABEL_REVERSE.get(order.label, order.label)
    return ScanOrder.from_perm(order.perm[::-1].copy(), label)


# Branch pairs of the four forward-only ablation variants: every ordered
# pairing of the frame-major (spatial) and joint-major (temporal) sweeps.
_UNI_VARIANTS = {
    1: ("spatial", "temporal"),
    2: ("temporal", "spatial"),
    3: ("spatial", "spatial"),
    4: ("temporal", "temporal"),
}


def unidirectional_variant(k: int, t: int, j: int, skeleton: Skeleton | None = None) -> list[ScanOrder]:
    """Branch orders used by ablation variant k (forward-only pairings)."""
    if k not in _UNI_VARIANTS:
        raise ParameterError(f"unidirectional variant must be 1..4, got {k}")
    making = {
        "spatial": lambda: global_spatial_order(t, j),
        "temporal": lambda: temporal_order(t, j),
    }
    return [making[kind]() for kind in _UNI_VARIANTS[k]]


def apply_order(x, order: ScanOrder):
    """Gather rows of a flattened [T*J, ...] array / tensor by the permutation."""
    if isinstance(x, Tensor):
        return nm.permute_rows(x, order.perm, order.inv)
    x = np.asarray(x)
    if x.shape[0] != len(order):
        raise DimensionError(f"leading extent {x.shape[0]} != permutation length {len(order)}")
    return x[order.perm]


def invert_order(y, order: ScanOrder):
    """Scatter rows back to canonical positions (inverse of ``apply_order``)."""
    if isinstance(y, Tensor):
        return nm.permute_rows(y, order.inv, order.perm)
    y = np.asarray(y)
    if y.shape[0] != len(order):
        raise DimensionError(f"leading extent {y.shape[0]} != permutation length {len(order)}")
    return y[order.inv]


def mirror_sequence(a: np.ndarray, pairs: tuple[tuple[int, int], ...]) -> np.ndarray:
    """Horizontal mirror of a [T, J, C] sequence: negate x, swap paired joints."""
    out = np.array(a, copy=True)
    for left, right in pairs:
        out[:, [left, right]] = out[:, [right, left]]
    out[..., 0] = -out[..., 0]
    return out
