"""Greedy pixel-merging segmentation and the five-level superpixel hierarchy.

The merge criterion ("COB-lite") is deterministic: mean-color distance plus a
Sobel boundary-strength term. It stands in for a learned boundary detector;
the rest of the system only needs some valid hierarchical segmentation.
"""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass, field
from math import sqrt
from pathlib import Path

import numpy as np

from .numerics import ContractError

SQRT3 = np.sqrt(3.0)
BOUNDARY_WEIGHT = 1.0  # lambda in the merge cost
NUM_LEVELS = 5
LEVEL_FACTOR = 4


@dataclass
class Image:
    """RGB image with float64 channels clamped to [0, 1]."""

    rgb: np.ndarray  # (H, W, 3)

    def __post_init__(self):
        arr = np.asarray(self.rgb, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ContractError(f"image must be (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractError("image must have at least one pixel")
        self.rgb = np.clip(arr, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass(frozen=True)
class MergeRecord:
    region_a: int  # smaller id
    region_b: int
    merged: int
    cost: float


@dataclass
class MergeTree:
    """Full greedy merge history: N0 single-pixel regions down to one region.

    The recorded order is the partition order; after t merges the partition
    has exactly N0 - t regions. Costs may fluctuate non-monotonically because
    region statistics are re-evaluated after every merge.
    """

    height: int
    width: int
    merges: list[MergeRecord] = field(default_factory=list)

    @property
    def n0(self) -> int:
        return self.height * self.width


@dataclass
class Partition:
    """Dense labeling of the pixel grid into 4-connected regions."""

    labels: np.ndarray  # (H, W) int64, values in [0, count)
    count: int
    pixels: list[np.ndarray]  # per region, ascending row-major flat indices

    def validate(self) -> None:
        seen = np.zeros(self.count, dtype=bool)
        flat = self.labels.reshape(-1)
        if flat.min() < 0 or flat.max() >= self.count:
            raise ContractError("partition labels out of range")
        seen[flat] = True
        if not seen.all():
            raise ContractError("partition labels not dense")
        total = sum(len(p) for p in self.pixels)
        if total != flat.size:
            raise ContractError("region pixel lists do not cover the image")


@dataclass
class SuperpixelHierarchy:
    """Five nested partitions with 4:1 count reduction and parent maps."""

    height: int
    width: int
    levels: list[Partition]  # finest first
    parents: list[np.ndarray]  # parents[i][r] = region at level i+1 containing r
    adjacencies: list[list[set[int]]]

    @property
    def level_counts(self) -> list[int]:
        return [p.count for p in self.levels]


def sobel_magnitude(rgb: np.ndarray) -> np.ndarray:
    """Gradient magnitude of the channel-mean image, replicate-padded Sobel."""
    gray = rgb.mean(axis=2)
    p = np.pad(gray, 1, mode="edge")
    gx = (
        (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    return np.hypot(gx, gy)


def merge_cost(color_dist: float, boundary_mean: float) -> float:
    return color_dist / SQRT3 + BOUNDARY_WEIGHT * boundary_mean


class _RegionState:
    """Shared scaffolding for the two merge-tree builders."""

    def __init__(self, img: Image):
        self.h, self.w = img.height, img.width
        n0 = self.h * self.w
        self.n0 = n0
        capacity = 2 * n0 - 1
        flat_rgb = img.rgb.reshape(-1, 3)
        pad = [0.0] * (capacity - n0)
        # cached per-region mean colors (regions start as single pixels)
        self.mean_r = flat_rgb[:, 0].tolist() + pad
        self.mean_g = flat_rgb[:, 1].tolist() + pad
        self.mean_b = flat_rgb[:, 2].tolist() + pad
        self.npix = [1] * n0 + [0] * (capacity - n0)
        self.alive = bytearray([1] * n0 + [0] * (capacity - n0))
        # adjacency with per-pair boundary stats (strength sum, pair count)
        self.neighbors: list[dict[int, tuple[float, int]]] = [dict() for _ in range(capacity)]
        flat_grad = sobel_magnitude(img.rgb).reshape(-1).tolist()
        for y in range(self.h):
            base = y * self.w
            for x in range(self.w):
                p = base + x
                if x + 1 < self.w:
                    s = 0.5 * (flat_grad[p] + flat_grad[p + 1])
                    self.neighbors[p][p + 1] = self.neighbors[p + 1][p] = (s, 1)
                if y + 1 < self.h:
                    s = 0.5 * (flat_grad[p] + flat_grad[p + self.w])
                    self.neighbors[p][p + self.w] = self.neighbors[p + self.w][p] = (s, 1)

    def pair_cost(self, a: int, b: int, strength: float, pairs: int) -> float:
        dr = self.mean_r[a] - self.mean_r[b]
        dg = self.mean_g[a] - self.mean_g[b]
        db = self.mean_b[a] - self.mean_b[b]
        return sqrt(dr * dr + dg * dg + db * db) * _INV_SQRT3 + (
            BOUNDARY_WEIGHT * strength / pairs
        )

    def merge(self, a: int, b: int, m: int) -> dict[int, tuple[float, int]]:
        """Contract regions a and b into fresh region m; returns m's adjacency."""
        alive, npix = self.alive, self.npix
        alive[a] = alive[b] = 0
        alive[m] = 1
        total = npix[a] + npix[b]
        npix[m] = total
        wa, wb = npix[a] / total, npix[b] / total
        self.mean_r[m] = self.mean_r[a] * wa + self.mean_r[b] * wb
        self.mean_g[m] = self.mean_g[a] * wa + self.mean_g[b] * wb
        self.mean_b[m] = self.mean_b[a] * wa + self.mean_b[b] * wb
        neighbors = self.neighbors
        merged = neighbors[a]
        merged.pop(b)
        for n, (s, c) in neighbors[b].items():
            if n == a:
                continue
            cur = merged.get(n)
            merged[n] = (cur[0] + s, cur[1] + c) if cur else (s, c)
        neighbors[m] = merged
        neighbors[a] = neighbors[b] = {}
        for n, stats in merged.items():
            nb = neighbors[n]
            nb.pop(a, None)
            nb.pop(b, None)
            nb[m] = stats
        return merged


_INV_SQRT3 = 1.0 / SQRT3


def build_merge_tree(img: Image) -> MergeTree:
    """Agglomerate single pixels into one region over the 4-connected RAG.

    At each step the adjacent pair with minimal cost merges, where
    cost = |mean color difference| / sqrt(3) + mean Sobel strength along the
    shared boundary. Ties break on (cost, smaller id, larger id). Each merge
    creates a fresh region id, which doubles as the staleness stamp for lazy
    heap invalidation.

    The heap holds one entry per region: its current best pair under the
    global (cost, lo, hi) order. Any pair's key is bounded below by both
    endpoints' entries, so the popped valid entry is always the global
    minimum and the merge sequence matches the exhaustive reference builder
    (see tests). Entries whose partner died are refreshed lazily on pop.
    """
    st = _RegionState(img)
    n0 = st.n0

    def best_entry(r: int):
        best = None
        for n, (s, c) in st.neighbors[r].items():
            cost = st.pair_cost(r, n, s, c)
            key = (cost, r, n) if r < n else (cost, n, r)
            if best is None or key < best:
                best = key
        return best

    heap = [e for e in (best_entry(r) for r in range(n0)) if e is not None]
    heapq.heapify(heap)
    push, pop = heapq.heappush, heapq.heappop
    alive = st.alive
    merges: list[MergeRecord] = []
    next_id = n0
    while len(merges) < n0 - 1:
        cost, a, b = pop(heap)
        alive_a, alive_b = alive[a], alive[b]
        if not (alive_a and alive_b):
            # lazy refresh: a surviving endpoint re-nominates its best pair
            survivor = a if alive_a else (b if alive_b else -1)
            if survivor >= 0:
                entry = best_entry(survivor)
                if entry is not None:
                    push(heap, entry)
            continue
        m = next_id
        next_id += 1
        st.merge(a, b, m)
        merges.append(MergeRecord(a, b, m, cost))
        entry = best_entry(m)
        if entry is not None:
            push(heap, entry)
    return MergeTree(st.h, st.w, merges)


def build_merge_tree_reference(img: Image) -> MergeTree:
    """Exhaustive-heap builder: every candidate pair lives in the queue.

    Slower but directly mirrors the stated algorithm; the fast builder is
    cross-checked against it.
    """
    st = _RegionState(img)
    n0 = st.n0
    heap: list[tuple[float, int, int]] = []
    for a in range(n0):
        for b, (s, c) in st.neighbors[a].items():
            if a < b:
                heap.append((st.pair_cost(a, b, s, c), a, b))
    heapq.heapify(heap)
    push, pop = heapq.heappush, heapq.heappop
    alive = st.alive
    merges: list[MergeRecord] = []
    next_id = n0
    while len(merges) < n0 - 1:
        cost, a, b = pop(heap)
        if not (alive[a] and alive[b]):
            continue
        m = next_id
        next_id += 1
        merged = st.merge(a, b, m)
        for n, (s, c) in merged.items():
            if n < m:
                push(heap, (st.pair_cost(n, m, s, c), n, m))
            else:
                push(heap, (st.pair_cost(m, n, s, c), m, n))
        merges.append(MergeRecord(a, b, m, cost))
    return MergeTree(st.h, st.w, merges)


class _MergeForest:
    """Replays merge records, resolving pixels to their current region."""

    def __init__(self, tree: MergeTree):
        self.parent = np.arange(2 * tree.n0 - 1, dtype=np.int64)
        self.tree = tree
        self.step = 0

    def advance_to(self, step: int) -> None:
        while self.step < step:
            rec = self.tree.merges[self.step]
            self.parent[rec.region_a] = rec.merged
            self.parent[rec.region_b] = rec.merged
            self.step += 1

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:  # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def label_map(self, height: int, width: int) -> Partition:
        """Dense labels ordered by first row-major appearance."""
        labels = np.empty(height * width, dtype=np.int64)
        ids: dict[int, int] = {}
        for p in range(height * width):
            root = self.find(p)
            if root not in ids:
                ids[root] = len(ids)
            labels[p] = ids[root]
        count = len(ids)
        pixels = [np.where(labels == r)[0] for r in range(count)]
        return Partition(labels.reshape(height, width), count, pixels)


def level_counts_for(n: int) -> list[int]:
    counts = [n]
    for _ in range(NUM_LEVELS - 1):
        counts.append(-(-counts[-1] // LEVEL_FACTOR))
    return counts


def extract_hierarchy(tree: MergeTree, n: int) -> SuperpixelHierarchy:
    """Pick the five partitions with ceil(n / 4^i) regions out of the tree."""
    if not 1 <= n <= tree.n0:
        raise ContractError(f"finest superpixel count {n} outside [1, {tree.n0}]")
    counts = level_counts_for(n)
    forest = _MergeForest(tree)
    levels: list[Partition] = []
    for target in counts:
        forest.advance_to(tree.n0 - target)
        part = forest.label_map(tree.height, tree.width)
        assert part.count == target, "merge tree must realize every region count"
        levels.append(part)
    parents = []
    for i in range(NUM_LEVELS - 1):
        fine, coarse = levels[i], levels[i + 1]
        pmap = np.empty(fine.count, dtype=np.int64)
        flat_coarse = coarse.labels.reshape(-1)
        for r in range(fine.count):
            pmap[r] = flat_coarse[fine.pixels[r][0]]
        parents.append(pmap)
    adjacencies = [adjacency(p) for p in levels]
    return SuperpixelHierarchy(tree.height, tree.width, levels, parents, adjacencies)


def adjacency(p: Partition) -> list[set[int]]:
    """Neighbor sets over shared 4-connected pixel edges; symmetric, irreflexive."""
    nbrs: list[set[int]] = [set() for _ in range(p.count)]
    lab = p.labels
    horiz = lab[:, :-1] != lab[:, 1:]
    for a, b in zip(lab[:, :-1][horiz], lab[:, 1:][horiz]):
        nbrs[a].add(int(b))
        nbrs[b].add(int(a))
    vert = lab[:-1, :] != lab[1:, :]
    for a, b in zip(lab[:-1, :][vert], lab[1:, :][vert]):
        nbrs[a].add(int(b))
        nbrs[b].add(int(a))
    return nbrs


# ---------------------------------------------------------------------------
# external interfaces: binary PPM in, hierarchy JSON out

MIN_LOAD_SIDE = 8


def load_ppm(path: str | Path) -> Image:
    """Read a binary (P6) 8-bit PPM; sides must be at least 8 pixels."""
    raw = Path(path).read_bytes()
    header: list[int] = []
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(raw):
            if raw[pos : pos + 1].isspace():
                pos += 1
            elif raw[pos : pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        return raw[start:pos]

    magic = next_token()
    if magic != b"P6":
        raise ContractError(f"expected binary PPM magic P6, got {magic!r}")
    for _ in range(3):
        tok = next_token()
        if not re.fullmatch(rb"\d+", tok):
            raise ContractError(f"malformed PPM header token {tok!r}")
        header.append(int(tok))
    width, height, maxval = header
    if maxval != 255:
        raise ContractError(f"only 8-bit PPM supported (maxval 255), got {maxval}")
    if height < MIN_LOAD_SIDE or width < MIN_LOAD_SIDE:
        raise ContractError(f"loaded images must be at least {MIN_LOAD_SIDE}px per side")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=height * width * 3, offset=pos)
    if pixels.size != height * width * 3:
        raise ContractError("PPM payload truncated")
    return Image(pixels.reshape(height, width, 3).astype(np.float64) / 255.0)


def save_ppm(img: Image, path: str | Path) -> None:
    data = np.round(np.clip(img.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode())
        fh.write(data.tobytes())


def hierarchy_to_json(h: SuperpixelHierarchy) -> dict:
    return {
        "height": h.height,
        "width": h.width,
        "levels": [
            {"count": p.count, "labels": p.labels.reshape(-1).tolist()} for p in h.levels
        ],
        "parents": [pm.tolist() for pm in h.parents],
    }


def hierarchy_from_json(doc: dict) -> SuperpixelHierarchy:
    height, width = int(doc["height"]), int(doc["width"])
    levels = []
    for entry in doc["levels"]:
        labels = np.asarray(entry["labels"], dtype=np.int64).reshape(height, width)
        count = int(entry["count"])
        pixels = [np.where(labels.reshape(-1) == r)[0] for r in range(count)]
        part = Partition(labels, count, pixels)
        part.validate()
        levels.append(part)
    parents = [np.asarray(pm, dtype=np.int64) for pm in doc["parents"]]
    adjacencies = [adjacency(p) for p in levels]
    return SuperpixelHierarchy(height, width, levels, parents, adjacencies)


def save_hierarchy(h: SuperpixelHierarchy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(hierarchy_to_json(h), sort_keys=True))


def load_hierarchy(path: str | Path) -> SuperpixelHierarchy:
    return hierarchy_from_json(json.loads(Path(path).read_text()))
