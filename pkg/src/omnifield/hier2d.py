"""Hierarchical 2D representation built from overlapping binary masks.

A mask set over one image is reduced to *patches*: the equivalence classes of
pixels that share an identical mask-membership vector. Patches are the atomic
units; masks then vote for patch relatedness (two patches are related in
proportion to how many masks contain both), and sorting an anchor patch's vote
row yields its hierarchy levels, from self outward to weakly related patches.

Patches are membership classes, not connected components: disconnected pixels
with the same membership vector share one patch id. Pixels covered by no mask
form a null region carrying no segmentation evidence.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .binio import pack_container, unpack_container

NULL_PATCH = -1  # in-memory null id; serialized as 0xFFFFFFFF

_HIERREP_MAGIC = b"OMNIHREP"
_HIERREP_VERSION = 1


@dataclass(frozen=True)
class MaskSet:
    """A stack of binary masks over one image, shape (n_masks, H, W)."""

    masks: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masks, dtype=bool)
        if m.ndim != 3 or m.shape[0] == 0:
            raise ValueError("MaskSet needs a nonempty (n_masks, H, W) stack")
        if not m.reshape(m.shape[0], -1).any(axis=1).all():
            raise ValueError("every mask must contain at least one set pixel")
        object.__setattr__(self, "masks", m)

    @classmethod
    def from_list(cls, masks) -> "MaskSet":
        if len(masks) == 0:
            raise ValueError("empty mask list: no segmentation evidence")
        arrs = [np.asarray(m, dtype=bool) for m in masks]
        shape = arrs[0].shape
        if any(a.shape != shape for a in arrs):
            raise ValueError("mask dimension mismatch")
        return cls(np.stack(arrs, axis=0))

    @property
    def n_masks(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]


@dataclass(frozen=True)
class PatchPartition:
    """Pixel partition into membership-equivalence classes.

    patch_index_map: (H, W) int32, NULL_PATCH for pixels in no mask.
    membership:      (n_patches, n_masks) bool, patch-in-mask indicators.
    pixel_counts:    (n_patches,) per-patch pixel tallies.
    """

    patch_index_map: np.ndarray
    membership: np.ndarray
    pixel_counts: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.membership.shape[0]

    @property
    def n_masks(self) -> int:
        return self.membership.shape[1]


@dataclass(frozen=True)
class CorrelationMatrix:
    """Symmetric vote matrix: votes[i, j] = number of masks containing both patches."""

    votes: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.votes.shape[0]


@dataclass(frozen=True)
class HierLevels:
    """Hierarchy levels of one anchor patch, strongest relation first.

    levels[d] holds the patch ids sharing the (d+1)-th highest vote count
    against the anchor; vote_of_level[d] is that shared count. Zero-vote
    patches appear in no level. The anchor always sits in levels[0].
    """

    anchor: int
    levels: tuple[tuple[int, ...], ...]
    vote_of_level: tuple[int, ...]

    @property
    def depth(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class HierRep:
    """Per-image hierarchical representation: partition + vote matrix."""

    partition: PatchPartition
    correlation: CorrelationMatrix

    def __post_init__(self):
        if self.partition.n_patches != self.correlation.n_patches:
            raise ValueError("partition / correlation patch count mismatch")


def build_partition(masks: MaskSet) -> PatchPartition:
    """Group pixels by identical mask-membership vectors.

    Patch ids are assigned in row-major first-encounter order so the result is
    deterministic. Pixels belonging to no mask get NULL_PATCH.
    """
    m = masks.masks
    n_masks, h, w = m.shape
    # (H*W, n_masks) per-pixel membership, packed so row uniqueness is cheap
    vec = np.ascontiguousarray(m.reshape(n_masks, -1).T)
    keys = np.packbits(vec, axis=1, bitorder="little")
    void = keys.view([("", keys.dtype)] * keys.shape[1]).ravel()
    _, first_idx, inverse = np.unique(void, return_index=True, return_inverse=True)

    covered_unique = vec[first_idx].any(axis=1)
    # rank unique classes by first pixel encountered, dropping the null class
    order = np.argsort(first_idx[covered_unique], kind="stable")
    ids = np.full(first_idx.shape[0], NULL_PATCH, dtype=np.int32)
    ids[np.flatnonzero(covered_unique)[order]] = np.arange(order.size, dtype=np.int32)

    patch_map = ids[inverse].reshape(h, w)
    membership = vec[first_idx[covered_unique][order]].copy()
    flat = patch_map.ravel()
    counts = np.bincount(flat[flat >= 0], minlength=order.size).astype(np.int64)
    return PatchPartition(patch_index_map=patch_map, membership=membership, pixel_counts=counts)


def build_correlation(partition: PatchPartition) -> CorrelationMatrix:
    """Vote on patch relatedness: votes = membership @ membership.T."""
    mem = partition.membership.astype(np.int64)
    return CorrelationMatrix(votes=mem @ mem.T)


def hierarchy_levels(correlation: CorrelationMatrix, anchor: int) -> HierLevels:
    """Group patches by vote count against the anchor, descending; ties share a level."""
    votes = correlation.votes
    if not 0 <= anchor < votes.shape[0]:
        raise IndexError(f"anchor {anchor} out of range [0, {votes.shape[0]})")
    row = votes[anchor]
    present = np.flatnonzero(row > 0)
    counts = row[present]
    order = np.lexsort((present, -counts))
    levels: list[tuple[int, ...]] = []
    level_votes: list[int] = []
    for idx in order:
        c = int(counts[idx])
        if not level_votes or c != level_votes[-1]:
            level_votes.append(c)
            levels.append([])
        levels[-1].append(int(present[idx]))
    return HierLevels(
        anchor=anchor,
        levels=tuple(tuple(lv) for lv in levels),
        vote_of_level=tuple(level_votes),
    )


def all_hierarchy_levels(rep: HierRep) -> dict[int, HierLevels]:
    """Hierarchy levels for every patch in the representation."""
    return {i: hierarchy_levels(rep.correlation, i) for i in range(rep.correlation.n_patches)}


# --- serialization -----------------------------------------------------------

def serialize_hierrep(rep: HierRep) -> bytes:
    part = rep.partition
    h, w = part.patch_index_map.shape
    n_p, n_m = part.membership.shape
    header = struct.pack("<IIII", h, w, n_p, n_m)
    idx = part.patch_index_map.astype("<i4").view("<u4")  # NULL_PATCH == 0xFFFFFFFF
    packed = np.packbits(part.membership, axis=1, bitorder="little")
    votes = rep.correlation.votes.astype("<u4")
    payload = idx.tobytes() + packed.tobytes() + votes.tobytes()
    return pack_container(_HIERREP_MAGIC, _HIERREP_VERSION, header, payload)


def deserialize_hierrep(blob: bytes) -> HierRep:
    header, payload = unpack_container(blob, _HIERREP_MAGIC, _HIERREP_VERSION)
    h, w, n_p, n_m = struct.unpack("<IIII", header)
    off = 0
    idx = np.frombuffer(payload, dtype="<u4", count=h * w, offset=off)
    off += idx.nbytes
    row_bytes = (n_m + 7) // 8
    packed = np.frombuffer(payload, dtype=np.uint8, count=n_p * row_bytes, offset=off)
    off += packed.nbytes
    votes = np.frombuffer(payload, dtype="<u4", count=n_p * n_p, offset=off)

    patch_map = idx.view("<i4").reshape(h, w).astype(np.int32)
    membership = np.unpackbits(
        packed.reshape(n_p, row_bytes), axis=1, count=n_m, bitorder="little"
    ).astype(bool)
    counts = np.bincount(patch_map.ravel()[patch_map.ravel() >= 0], minlength=n_p).astype(np.int64)
    part = PatchPartition(patch_index_map=patch_map, membership=membership, pixel_counts=counts)
    corr = CorrelationMatrix(votes=votes.reshape(n_p, n_p).astype(np.int64))
    return HierRep(partition=part, correlation=corr)


def save_hierrep(rep: HierRep, path, *, source_image: str = "", mask_provenance=()) -> None:
    """Write the binary representation plus a text metadata sidecar."""
    blob = serialize_hierrep(rep)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    lines = [f"source_image: {source_image}", f"n_masks: {rep.partition.n_masks}"]
    for k, prov in enumerate(mask_provenance):
        lines.append(f"mask {k}: {prov}")
    with open(f"{path}.meta", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_hierrep(path) -> HierRep:
    with open(path, "rb") as fh:
        return deserialize_hierrep(fh.read())
