"""Attention-based recovery of query part features from gallery neighbours.

Tokens are part features. Every token first gets a local-information embedding
``f + MLP(onehot(p), cos, v)``. Each recovery step runs ``L`` attention layers in
which the 4 query tokens attend over the ``4k`` neighbour tokens, then applies
a linear projection. Neighbour tokens are read-only.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import numgrad as ng
from .descriptor import N_PARTS, DescriptorSet, PersonDescriptor

SIDE_DIM = N_PARTS + 2
DEFAULT_STEPS = 3
DEFAULT_K = 5


@dataclass(frozen=True)
class RecoveryContext:
    query: PersonDescriptor
    neighbors: Sequence[PersonDescriptor]
    neighbor_cos: Sequence[float]
    query_cos: float = 1.0

    def __post_init__(self):
        if len(self.neighbors) < 1:
            raise ng.ContractError("recovery needs at least one neighbour")
        if len(self.neighbor_cos) != len(self.neighbors):
            raise ValueError("one similarity per neighbour is required")
        c = self.query.c
        if any(n.c != c for n in self.neighbors):
            raise ng.ShapeError("neighbours must share the query channel dimension")

    @property
    def k(self) -> int:
        return len(self.neighbors)


@dataclass
class AttentionReport:
    contributions: np.ndarray  # (k,)
    part_attention: np.ndarray  # (4, k, 4): query part x neighbour x neighbour part


def side_info(cos, vis) -> np.ndarray:
    """(…,) similarities and (…, 4) visibilities -> (…, 4, 6) token side information."""
    cos = np.asarray(cos, dtype=np.float64)
    vis = np.asarray(vis, dtype=np.float64)
    onehot = np.broadcast_to(np.eye(N_PARTS), vis.shape + (N_PARTS,))
    cos_col = np.broadcast_to(cos[..., None, None], vis.shape + (1,))
    return np.concatenate([onehot, cos_col, vis[..., None]], axis=-1)


# ---------------------------------------------------------------------------
# parameters

def frt_shape(params):
    """(steps, layers) present in a parameter collection."""
    s = 0
    while f"frt.s{s}.W_final" in params:
        s += 1
    layers = 0
    while f"frt.s0.l{layers}.Wq" in params:
        layers += 1
    return s, layers


def init_frt(params: ng.ParamSet, c: int, rng: np.random.Generator, steps: int = DEFAULT_STEPS,
             layers: int = 1, hidden: int = None) -> None:
    """Random projections; zero MLP output layers and identity final maps (identity at init)."""
    h = hidden or c
    sd = 1.0 / np.sqrt(c)
    params.add("frt.embed.W1", rng.normal(0.0, 1.0 / np.sqrt(SIDE_DIM), size=(SIDE_DIM, h)))
    params.add("frt.embed.b1", np.zeros(h))
    params.add("frt.embed.W2", np.zeros((h, c)))
    params.add("frt.embed.b2", np.zeros(c))
    for t in range(steps):
        for l in range(layers):
            p = f"frt.s{t}.l{l}."
            params.add(p + "Wq", rng.normal(0.0, sd, size=(c, c)))
            params.add(p + "bq", np.zeros(c))
            params.add(p + "Wk", rng.normal(0.0, sd, size=(c, c)))
            params.add(p + "bk", np.zeros(c))
            params.add(p + "Wv", rng.normal(0.0, sd, size=(c, c)))
            params.add(p + "bv", np.zeros(c))
            params.add(p + "U1", rng.normal(0.0, 1.0 / np.sqrt(2 * c), size=(2 * c, h)))
            params.add(p + "u1", np.zeros(h))
            params.add(p + "U2", np.zeros((h, c)))
            params.add(p + "u2", np.zeros(c))
        params.add(f"frt.s{t}.W_final", np.eye(c))
        params.add(f"frt.s{t}.b_final", np.zeros(c))


def is_inert(name: str) -> bool:
    """Key biases shift every logit of a query row equally; softmax ignores them."""
    return name.startswith("frt.") and name.endswith(".bk")


# ---------------------------------------------------------------------------
# forward

def embed_local_info(f, side, params) -> ng.Var:
    """f + MLP(side); side is (..., 6) = onehot(p) | cos | v."""
    h = ng.relu(ng.add(ng.matmul(side, params["frt.embed.W1"]), params["frt.embed.b1"]))
    return ng.add(f, ng.add(ng.matmul(h, params["frt.embed.W2"]), params["frt.embed.b2"]))


def transformer_layer(fq, fk, params, prefix: str, scaled: bool = False):
    """One attention layer: query tokens (..., 4, c) attend over neighbour tokens (..., n, c).

    Returns the updated query tokens and the attention weights (..., 4, n).
    """
    fq, fk = ng.as_var(fq), ng.as_var(fk)
    if fq.value.shape[-1] != fk.value.shape[-1]:
        raise ng.ShapeError("query and neighbour tokens differ in channel dimension")
    q = ng.add(ng.matmul(fq, params[prefix + "Wq"]), params[prefix + "bq"])
    k = ng.add(ng.matmul(fk, params[prefix + "Wk"]), params[prefix + "bk"])
    s = ng.add(ng.matmul(fk, params[prefix + "Wv"]), params[prefix + "bv"])
    logits = ng.matmul(q, ng.swapaxes(k))
    if scaled:
        logits = ng.mul(logits, 1.0 / np.sqrt(fq.value.shape[-1]))
    attn = ng.softmax(logits, axis=-1)
    m = ng.matmul(attn, s)
    hid = ng.relu(ng.add(ng.matmul(ng.concat([fq, m], axis=-1), params[prefix + "U1"]), params[prefix + "u1"]))
    upd = ng.add(ng.matmul(hid, params[prefix + "U2"]), params[prefix + "u2"])
    return ng.add(fq, upd), attn.value


def recover_tokens(q_parts, q_side, n_parts, n_side, params, steps: int = None, layers: int = None,
                   scaled: bool = False):
    """Batched recovery.

    q_parts (B, 4, c), q_side (B, 4, 6), n_parts (B, k, 4, c), n_side (B, k, 4, 6).
    Returns recovered query parts (B, 4, c) as a Var and a list of attention arrays
    (B, 4, 4k), one per (step, layer).
    """
    n_val = ng.value_of(n_parts)
    if n_val.ndim != 4 or n_val.shape[1] < 1:
        raise ng.ContractError("recovery needs at least one neighbour per query")
    s_have, l_have = frt_shape(params)
    steps = s_have if steps is None else steps
    layers = l_have if layers is None else layers
    if steps < 1 or steps > s_have or layers < 1 or layers > l_have:
        raise ng.ContractError(f"requested {steps} steps x {layers} layers, parameters hold {s_have} x {l_have}")
    b, k, _, c = n_val.shape
    fq = embed_local_info(q_parts, q_side, params)
    fk = embed_local_info(ng.reshape(n_parts, (b, k * N_PARTS, c)),
                          np.asarray(n_side).reshape(b, k * N_PARTS, SIDE_DIM), params)
    attns = []
    for t in range(steps):
        for l in range(layers):
            fq, a = transformer_layer(fq, fk, params, f"frt.s{t}.l{l}.", scaled)
            attns.append(a)
        fq = ng.add(ng.matmul(fq, params[f"frt.s{t}.W_final"]), params[f"frt.s{t}.b_final"])
    return fq, attns


def summarize_attention(attns: List[np.ndarray], k: int):
    """Average attention over (step, layer); returns contributions (B, k), part matrix (B, 4, k, 4)."""
    mean_attn = np.mean(np.stack(attns), axis=0)
    part = mean_attn.reshape(mean_attn.shape[:-1] + (k, N_PARTS))
    contrib = part.sum(axis=-1).mean(axis=-2)
    contrib = contrib / contrib.sum(axis=-1, keepdims=True)
    return contrib, part


def recover(ctx: RecoveryContext, params, steps: int = None, scaled: bool = False):
    """Recover one query; returns (parts (4, c), AttentionReport)."""
    q_side = side_info(ctx.query_cos, ctx.query.vis)
    n_parts = np.stack([n.parts for n in ctx.neighbors])
    n_side = side_info(np.asarray(ctx.neighbor_cos), np.stack([n.vis for n in ctx.neighbors]))
    out, attns = recover_tokens(ctx.query.parts[None], q_side[None], n_parts[None], n_side[None],
                                params, steps=steps, scaled=scaled)
    contrib, part = summarize_attention(attns, ctx.k)
    return out.value[0], AttentionReport(contrib[0], part[0])


def attention_report(ctx: RecoveryContext, params, steps: int = None, scaled: bool = False) -> AttentionReport:
    return recover(ctx, params, steps, scaled)[1]


def neighbor_batch(queries: DescriptorSet, gallery: DescriptorSet, nbr_idx, nbr_cos, query_cos=1.0):
    nbr_idx = np.asarray(nbr_idx)
    q_side = side_info(np.broadcast_to(np.asarray(query_cos, dtype=np.float64), (len(queries),)), queries.vis)
    n_parts = gallery.parts[nbr_idx]
    n_side = side_info(np.asarray(nbr_cos), gallery.vis[nbr_idx])
    return q_side, n_parts, n_side


def recover_set(queries: DescriptorSet, gallery: DescriptorSet, nbr_idx, nbr_cos, params,
                steps: int = None, scaled: bool = False, chunk: int = 256):
    """Recover every query; returns (recovered DescriptorSet, contributions (Q, k))."""
    q_side, n_parts, n_side = neighbor_batch(queries, gallery, nbr_idx, nbr_cos)
    k = n_parts.shape[1]
    plain = {n: np.asarray(ng.value_of(params[n])) for n in params if str(n).startswith("frt.")}
    outs, contribs = [], []
    for s in range(0, len(queries), chunk):
        sl = slice(s, s + chunk)
        out, attns = recover_tokens(queries.parts[sl], q_side[sl], n_parts[sl], n_side[sl], plain,
                                    steps=steps, scaled=scaled)
        outs.append(out.value)
        contribs.append(summarize_attention(attns, k)[0])
    return queries.with_parts(np.concatenate(outs)), np.concatenate(contribs)


def top_k_neighbors(scores: np.ndarray, k: int, exclude_self: bool = False):
    """Indices (descending score, ties by index) and scores of the k best columns per row."""
    scores = np.asarray(scores, dtype=np.float64)
    if exclude_self:
        scores = scores.copy()
        np.fill_diagonal(scores, -np.inf)
    n_cols = scores.shape[1] - (1 if exclude_self else 0)
    if k < 1 or k > n_cols:
        raise ValueError(f"k={k} neighbours requested but only {n_cols} candidates")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(scores, order, axis=1)


def write_attention_csv(path, contributions: np.ndarray, nbr_idx: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "neighbor_rank", "neighbor_id", "contribution"])
        for q in range(contributions.shape[0]):
            for r in range(contributions.shape[1]):
                w.writerow([q, r + 1, int(nbr_idx[q, r]), repr(float(contributions[q, r]))])
