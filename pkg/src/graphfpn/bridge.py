"""Feature mapping between rectangular CNN grids and superpixel graph nodes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ContractError, SegmentIndex, Tensor
from .segmentation import Partition


@dataclass(frozen=True)
class CellAssignment:
    """Exclusive ownership of one level's grid cells by superpixels.

    Every cell belongs to the superpixel of largest pixel overlap (ties to the
    lower id). `cells[k]` holds superpixel k's owned flat cell indices;
    superpixels that own nothing get `fallback[k]`, the cells they merely
    overlap, used for feature pooling only, never for ownership.
    """

    grid_h: int
    grid_w: int
    owner: np.ndarray  # (grid_h, grid_w) superpixel ids
    cells: list[np.ndarray]
    fallback: list[np.ndarray]

    def pooling_cells(self, k: int) -> np.ndarray:
        owned = self.cells[k]
        return owned if len(owned) else self.fallback[k]


def assign_cells(partition: Partition, grid_h: int, grid_w: int) -> CellAssignment:
    """Assign each grid cell to the superpixel covering most of its pixels."""
    img_h, img_w = partition.labels.shape
    if img_h % grid_h or img_w % grid_w:
        raise ContractError(
            f"grid {grid_h}x{grid_w} must divide the image {img_h}x{img_w}"
        )
    block_h, block_w = img_h // grid_h, img_w // grid_w
    count = partition.count
    owner = np.empty((grid_h, grid_w), dtype=np.int64)
    overlaps: list[set[int]] = [set() for _ in range(count)]
    for gy in range(grid_h):
        for gx in range(grid_w):
            block = partition.labels[
                gy * block_h : (gy + 1) * block_h, gx * block_w : (gx + 1) * block_w
            ]
            votes = np.bincount(block.reshape(-1), minlength=count)
            owner[gy, gx] = int(np.argmax(votes))  # first max = lowest id
            cell = gy * grid_w + gx
            for sp in np.unique(block):
                overlaps[int(sp)].add(cell)
    flat_owner = owner.reshape(-1)
    cells = [np.where(flat_owner == k)[0] for k in range(count)]
    fallback = [
        np.array(sorted(overlaps[k]), dtype=np.int64) if len(cells[k]) == 0 else np.empty(0, dtype=np.int64)
        for k in range(count)
    ]
    return CellAssignment(grid_h, grid_w, owner, cells, fallback)


def cnn_to_gnn(c_map: Tensor, asg: CellAssignment, w2: Tensor) -> Tensor:
    """Initial node features: ReLU(W2 [maxpool || minpool]) over each
    superpixel's cell collection (fallback cells when it owns none)."""
    c_ch, h, w = c_map.shape
    if (h, w) != (asg.grid_h, asg.grid_w):
        raise ContractError(f"feature map {h}x{w} vs assignment grid {asg.grid_h}x{asg.grid_w}")
    if w2.shape[1] != 2 * c_ch:
        raise ContractError(f"w2 expects {w2.shape[1] // 2} channels, map has {c_ch}")
    pools = [asg.pooling_cells(k) for k in range(len(asg.cells))]
    assert all(len(p) for p in pools), "pooling sets cannot be empty after fallback"
    flat_idx = np.concatenate(pools)
    lengths = [len(p) for p in pools]
    starts = np.cumsum([0] + lengths[:-1])
    seg = SegmentIndex(
        [range(int(s), int(s + n)) for s, n in zip(starts, lengths)], len(flat_idx)
    )
    grid_feats = nm.transpose2d(nm.reshape(c_map, (c_ch, h * w)))  # (cells, C)
    gathered = nm.gather_rows(grid_feats, flat_idx)
    pooled = nm.concat(
        [nm.segment_reduce(gathered, seg, "max"), nm.segment_reduce(gathered, seg, "min")],
        axis=-1,
    )
    return nm.relu(nm.linear(pooled, w2))


def gnn_to_cnn(
    node_feats: Tensor, asg: CellAssignment, p_map: Tensor, fuse_weight: Tensor
) -> Tensor:
    """Copy each superpixel's final feature onto its owned cells, concatenate
    with the FPN map, and fuse back to the FPN channel count with a 1x1 conv."""
    d_p, h, w = p_map.shape
    n_nodes, d = node_feats.shape
    if d != d_p:
        raise ContractError(f"node feature width {d} must equal FPN channels {d_p}")
    if (h, w) != (asg.grid_h, asg.grid_w):
        raise ContractError(f"FPN map {h}x{w} vs assignment grid {asg.grid_h}x{asg.grid_w}")
    if fuse_weight.shape != (d_p, 2 * d_p, 1, 1):
        raise ContractError(
            f"fuse kernel must be ({d_p}, {2 * d_p}, 1, 1), got {fuse_weight.shape}"
        )
    copied = nm.gather_rows(node_feats, asg.owner.reshape(-1))  # (cells, D)
    graph_map = nm.reshape(nm.transpose2d(copied), (d_p, h, w))
    stacked = nm.concat([p_map, graph_map], axis=0)
    return nm.conv2d(stacked, fuse_weight, stride=1)
