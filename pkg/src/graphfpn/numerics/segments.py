"""Grouped index sets used by neighborhood and cell-collection reductions."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import ContractError


class SegmentIndex:
    """A mapping from group id to the sorted element indices it owns.

    Groups are disjoint (an element belongs to at most one group) and indices
    are stored ascending, which pins the f64 reduction order. Groups may be
    empty at construction; reductions reject them with EmptyGroupError.
    """

    __slots__ = ("n_elements", "n_groups", "flat", "starts", "lengths", "_rounds_plan")

    def __init__(self, groups: Sequence[Iterable[int]], n_elements: int):
        flat: list[int] = []
        starts = np.zeros(len(groups), dtype=np.int64)
        lengths = np.zeros(len(groups), dtype=np.int64)
        for gi, members in enumerate(groups):
            idx = sorted(int(i) for i in members)
            starts[gi] = len(flat)
            lengths[gi] = len(idx)
            flat.extend(idx)
        arr = np.asarray(flat, dtype=np.int64)
        if arr.size:
            if arr.min() < 0 or arr.max() >= n_elements:
                raise ContractError(
                    f"segment index out of range: elements must lie in [0, {n_elements})"
                )
            if np.unique(arr).size != arr.size:
                raise ContractError("segment groups must be disjoint")
        self.n_elements = int(n_elements)
        self.n_groups = len(groups)
        self.flat = arr
        self.starts = starts
        self.lengths = lengths
        self._rounds_plan = None  # lazy cache for ops._rounds_sum

    def group(self, gi: int) -> np.ndarray:
        s = self.starts[gi]
        return self.flat[s : s + self.lengths[gi]]

    def __len__(self) -> int:
        return self.n_groups

    @staticmethod
    def from_sorted_runs(keys: np.ndarray, n_groups: int) -> "SegmentIndex":
        """Group positions 0..len(keys) by their key; keys must be sorted ascending.

        Every group in [0, n_groups) gets a (possibly empty) run. Used to
        bucket edge slots by destination node.
        """
        keys = np.asarray(keys, dtype=np.int64)
        if keys.size and np.any(np.diff(keys) < 0):
            raise ContractError("run keys must be sorted ascending")
        groups: list[range] = []
        bounds = np.searchsorted(keys, np.arange(n_groups + 1))
        for gi in range(n_groups):
            groups.append(range(int(bounds[gi]), int(bounds[gi + 1])))
        return SegmentIndex(groups, int(keys.size))
