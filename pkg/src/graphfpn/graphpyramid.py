"""Multi-scale graph over the superpixel hierarchy: contextual + hierarchical edges."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import ContractError, Tensor
from .segmentation import NUM_LEVELS, SuperpixelHierarchy

# instrumentation: how many graphs have been constructed (the FPN-only
# baseline must never touch this)
_build_calls = 0


def build_call_count() -> int:
    return _build_calls


def reset_build_call_count() -> None:
    global _build_calls
    _build_calls = 0


@dataclass(frozen=True)
class GraphPyramid:
    """Nodes at five levels plus contextual and hierarchical edge lists.

    Node ids are global: level i occupies [offset[i], offset[i] + count[i]).
    Hierarchical edges store (descendant, ancestor); `kept` and `similarity`
    are filled by pruning and frozen afterwards.
    """

    level_counts: tuple[int, ...]
    level_offsets: tuple[int, ...]
    contextual_edges: np.ndarray  # (Ec, 2), u < v, same level
    hierarchical_edges: np.ndarray  # (Eh, 2), lower-level node first
    kept: np.ndarray  # (Eh,) bool
    similarity: np.ndarray  # (Eh,) float, NaN until pruned

    @property
    def n_nodes(self) -> int:
        return self.level_offsets[-1] + self.level_counts[-1]

    def node_id(self, level: int, region: int) -> int:
        return self.level_offsets[level] + region

    def node_level(self, node: int) -> int:
        for lv in range(NUM_LEVELS - 1, -1, -1):
            if node >= self.level_offsets[lv]:
                return lv
        raise ContractError(f"node id {node} out of range")

    def surviving_hierarchical(self) -> np.ndarray:
        return self.hierarchical_edges[self.kept]


def build_graph(h: SuperpixelHierarchy) -> GraphPyramid:
    """Contextual edges from same-level adjacency; hierarchical edges between
    every node and all of its ancestors and descendants."""
    global _build_calls
    _build_calls += 1

    counts = tuple(h.level_counts)
    offsets_list = [0]
    for c in counts[:-1]:
        offsets_list.append(offsets_list[-1] + c)
    offsets = tuple(offsets_list)

    contextual = []
    for lv, nbrs in enumerate(h.adjacencies):
        for u, peers in enumerate(nbrs):
            gu = offsets[lv] + u
            for v in peers:
                if u < v:
                    contextual.append((gu, offsets[lv] + v))

    hierarchical = []
    for lv in range(NUM_LEVELS):
        for r in range(counts[lv]):
            anc, anc_lv = r, lv
            while anc_lv < NUM_LEVELS - 1:
                anc = int(h.parents[anc_lv][anc])
                anc_lv += 1
                hierarchical.append((offsets[lv] + r, offsets[anc_lv] + anc))

    ctx = np.asarray(sorted(contextual), dtype=np.int64).reshape(-1, 2)
    hier = np.asarray(sorted(hierarchical), dtype=np.int64).reshape(-1, 2)
    return GraphPyramid(
        counts,
        offsets,
        ctx,
        hier,
        kept=np.ones(len(hier), dtype=bool),
        similarity=np.full(len(hier), np.nan),
    )


def cosine_similarity(u, v) -> float:
    """u.v / (|u||v|); 0 whenever either norm falls below 1e-12."""
    ud = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    vd = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if ud.shape != vd.shape or ud.ndim != 1:
        raise ContractError(f"cosine_similarity needs equal vectors, got {ud.shape}, {vd.shape}")
    nu = float(np.sqrt(np.dot(ud, ud)))
    nv = float(np.sqrt(np.dot(vd, vd)))
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(np.dot(ud, vd) / (nu * nv))


def prune_hierarchical(g: GraphPyramid, feats, rule: str = "union") -> GraphPyramid:
    """Drop each node's bottom-half hierarchical edges by cosine similarity.

    Every node ranks its incident hierarchical edges (descending similarity,
    ties to the lower peer id) and nominates its top ceil(m/2). Under the
    default "union" rule an edge survives if either endpoint nominates it;
    "intersection" requires both. Contextual edges are untouched. Pruning is
    computed once on the mapped features and the topology then stays fixed
    across all GNN layers.
    """
    if rule not in ("union", "intersection"):
        raise ContractError(f"unknown prune rule {rule!r}")
    fd = feats.data if isinstance(feats, Tensor) else np.asarray(feats, dtype=np.float64)
    if fd.ndim != 2 or fd.shape[0] != g.n_nodes:
        raise ContractError(f"need one feature row per node ({g.n_nodes}), got {fd.shape}")

    edges = g.hierarchical_edges
    sims = np.empty(len(edges))
    for e, (u, v) in enumerate(edges):
        sims[e] = cosine_similarity(fd[u], fd[v])

    incident: list[list[int]] = [[] for _ in range(g.n_nodes)]
    for e, (u, v) in enumerate(edges):
        incident[int(u)].append(e)
        incident[int(v)].append(e)

    nominated = np.zeros(len(edges), dtype=np.int64)
    for node, edge_ids in enumerate(incident):
        if not edge_ids:
            continue
        ranked = sorted(
            edge_ids,
            key=lambda e: (-sims[e], int(edges[e][0] if edges[e][1] == node else edges[e][1])),
        )
        keep_n = -(-len(ranked) // 2)  # ceil(m / 2)
        for e in ranked[:keep_n]:
            nominated[e] += 1
    kept = nominated >= 1 if rule == "union" else nominated == 2
    return replace(g, kept=kept, similarity=sims)


def graph_to_json(g: GraphPyramid) -> dict:
    return {
        "level_counts": list(g.level_counts),
        "level_offsets": list(g.level_offsets),
        "contextual_edges": g.contextual_edges.tolist(),
        "hierarchical_edges": [
            {
                "u": int(u),
                "v": int(v),
                "kept": bool(k),
                "similarity": None if np.isnan(s) else float(s),
            }
            for (u, v), k, s in zip(g.hierarchical_edges, g.kept, g.similarity)
        ],
    }
