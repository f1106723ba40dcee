"""Visibility graph matching between a query and a gallery descriptor.

Node ``i`` of the graph is part ``i`` (global, head, torso, leg). The adjacency
row of node ``i`` is driven by the visibility the two images share on that part:

    A[i, i] = 1
    A[i, j] = phi_i + [phi_i > gamma] * (1 - cos(f_i^q, f_i^g))   (j != i)
    phi_i   = min(v_i^q, v_i^g)

Â is the row-stochastic normalisation of A. One GCN layer maps each stream
``X`` (4 x c) to ``X + [X, relu(Â X W_m)] W_r``; both streams share Â and weights.
All functions broadcast over leading (pair) axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .descriptor import N_PARTS, DescriptorSet, PersonDescriptor

DEFAULT_GAMMA = 0.5


@dataclass(frozen=True)
class VisibilityGraph:
    adjacency: np.ndarray  # (4, 4)
    shared_vis: np.ndarray  # (4,)
    gamma: float

    def normalized(self) -> np.ndarray:
        return normalize(self.adjacency)


def shared_visibility(vq, vg) -> np.ndarray:
    return np.minimum(np.asarray(vq, dtype=np.float64), np.asarray(vg, dtype=np.float64))


def part_cosines(fq: np.ndarray, fg: np.ndarray) -> np.ndarray:
    return ng.cosine(fq, fg).value


def adjacency_matrix(fq, fg, vq, vg, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Raw adjacency for (broadcast) pairs; inputs ``(..., 4, c)`` and ``(..., 4)``."""
    fq = np.asarray(fq, dtype=np.float64)
    fg = np.asarray(fg, dtype=np.float64)
    if fq.shape[-1] != fg.shape[-1] or fq.shape[-2] != N_PARTS or fg.shape[-2] != N_PARTS:
        raise ng.ShapeError(f"adjacency: incompatible part arrays {fq.shape} and {fg.shape}")
    phi = shared_visibility(vq, vg)
    cos = part_cosines(fq, fg)
    phi, cos = np.broadcast_arrays(phi, cos)
    row = phi + np.where(phi > gamma, 1.0 - cos, 0.0)
    A = np.broadcast_to(row[..., :, None], row.shape + (N_PARTS,)).copy()
    idx = np.arange(N_PARTS)
    A[..., idx, idx] = 1.0
    return A


def adjacency(dq: PersonDescriptor, dg: PersonDescriptor, gamma: float = DEFAULT_GAMMA) -> VisibilityGraph:
    if dq.parts.shape != dg.parts.shape:
        raise ng.ShapeError(f"descriptor shapes differ: {dq.parts.shape} vs {dg.parts.shape}")
    A = adjacency_matrix(dq.parts, dg.parts, dq.vis, dg.vis, gamma)
    return VisibilityGraph(A, shared_visibility(dq.vis, dg.vis), gamma)


def normalize(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    return A / A.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# parameters

def gcn_layers(params) -> int:
    n = 0
    while f"gcn.W_m.{n}" in params:
        n += 1
    return n


def init_gcn(params: ng.ParamSet, c: int, rng: np.random.Generator, layers: int = 1) -> None:
    """Message weights get a small random init; W_r starts at zero (graph == identity)."""
    for l in range(layers):
        params.add(f"gcn.W_m.{l}", rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, c)))
        params.add(f"gcn.W_r.{l}", np.zeros((2 * c, c)))


def _broadcast(x: ng.Var, shape) -> ng.Var:
    if x.value.shape == tuple(shape):
        return x
    return ng.add(x, np.zeros(shape))


def gcn_forward(Fq, Fg, A_hat, params, layers: int = None):
    """Run the GCN on both streams with a shared normalised adjacency.

    ``params`` maps names to arrays or Vars. Returns the updated (Fq, Fg) as Vars.
    """
    Fq, Fg = ng.as_var(Fq), ng.as_var(Fg)
    A_hat = np.asarray(A_hat, dtype=np.float64)
    if Fq.value.shape[-1] != Fg.value.shape[-1]:
        raise ng.ShapeError("query and gallery channel dimensions differ")
    if layers is None:
        layers = gcn_layers(params)
    out_shape = np.broadcast_shapes(Fq.value.shape, Fg.value.shape, A_hat.shape[:-1] + (Fq.value.shape[-1],))
    streams = [_broadcast(Fq, out_shape), _broadcast(Fg, out_shape)]
    for l in range(layers):
        W_m = ng.as_var(params[f"gcn.W_m.{l}"])
        W_r = ng.as_var(params[f"gcn.W_r.{l}"])
        for s, X in enumerate(streams):
            M = ng.relu(ng.matmul(ng.matmul(A_hat, X), W_m))
            streams[s] = ng.add(X, ng.matmul(ng.concat([X, M], axis=-1), W_r))
    return streams[0], streams[1]


def graph_similarity(fq, fg, vq, vg, params, gamma: float = DEFAULT_GAMMA) -> ng.Var:
    """Cosine of the flattened updated part stacks for (broadcast) pairs."""
    fq_v, fg_v = ng.as_var(fq), ng.as_var(fg)
    A_hat = normalize(adjacency_matrix(fq_v.value, fg_v.value, vq, vg, gamma))
    Xq, Xg = gcn_forward(fq_v, fg_v, A_hat, params)
    flat = Xq.value.shape[:-2] + (-1,)
    return ng.cosine(ng.reshape(Xq, flat), ng.reshape(Xg, flat))


def pair_similarity(dq: PersonDescriptor, dg: PersonDescriptor, params, gamma: float = DEFAULT_GAMMA) -> float:
    if dq.parts.shape != dg.parts.shape:
        raise ng.ShapeError(f"descriptor shapes differ: {dq.parts.shape} vs {dg.parts.shape}")
    return float(graph_similarity(dq.parts, dg.parts, dq.vis, dg.vis, params, gamma).value)


def self_graph_features(parts, vis, params, gamma: float = DEFAULT_GAMMA) -> ng.Var:
    """Updated features of each descriptor matched against itself, flattened to (N, 4c)."""
    pv = ng.as_var(parts)
    A_hat = normalize(adjacency_matrix(pv.value, pv.value, vis, vis, gamma))
    Xq, _ = gcn_forward(pv, pv, A_hat, params)
    return ng.reshape(Xq, Xq.value.shape[:-2] + (-1,))


def pairwise_similarity(parts, vis, params, gamma: float = DEFAULT_GAMMA) -> ng.Var:
    """All-pairs graph similarity within one set, as an (N, N) Var."""
    pv = ng.as_var(parts)
    vis = np.asarray(vis)
    n, _, c = pv.value.shape
    fq = ng.reshape(pv, (n, 1, N_PARTS, c))
    fg = ng.reshape(pv, (1, n, N_PARTS, c))
    return graph_similarity(fq, fg, vis[:, None, :], vis[None, :, :], params, gamma)


def score_matrix(queries: DescriptorSet, gallery: DescriptorSet, params, gamma: float = DEFAULT_GAMMA,
                 chunk_pairs: int = 20000) -> np.ndarray:
    if len(queries) == 0 or len(gallery) == 0:
        raise ValueError("score_matrix needs non-empty query and gallery sets")
    if queries.c != gallery.c:
        raise ng.ShapeError(f"channel mismatch: {queries.c} vs {gallery.c}")
    plain = {n: np.asarray(ng.value_of(params[n])) for n in params if str(n).startswith("gcn.")}
    nq, ngal = len(queries), len(gallery)
    out = np.empty((nq, ngal))
    rows = max(1, chunk_pairs // ngal)
    fg = gallery.parts[None]
    vg = gallery.vis[None]
    for s in range(0, nq, rows):
        e = min(nq, s + rows)
        fq = queries.parts[s:e, None]
        vq = queries.vis[s:e, None]
        out[s:e] = graph_similarity(fq, fg, vq, vg, plain, gamma).value
    return out
