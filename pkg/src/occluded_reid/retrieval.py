"""Rank lists, CMC/mAP, k-reciprocal re-ranking and average query expansion."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Sequence

import numpy as np

from . import numgrad as ng

CMC_RANKS = (1, 3, 5, 10)


@dataclass
class RankList:
    query_index: int
    query_id: int
    query_cam: int
    order: np.ndarray  # gallery indices, best first, junk removed
    scores: np.ndarray  # scores aligned with order


@dataclass
class EvalReport:
    cmc: Dict[int, float]
    mAP: float
    n_queries: int
    n_skipped: int
    config: Dict[str, str] = field(default_factory=dict)
    parts: Dict[str, "EvalReport"] = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return self.cmc[1]

    def rows(self):
        out = [(f"rank{r}", v) for r, v in self.cmc.items()]
        out += [("mAP", self.mAP), ("n_queries", self.n_queries), ("n_skipped", self.n_skipped)]
        return out


def rank(scores, q_ids, q_cams, g_ids, g_cams, exclude_junk: bool = True) -> List[RankList]:
    """Sort gallery by descending score (ties: lower gallery index first).

    Gallery items sharing both identity and camera with the query are dropped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("score matrix must be finite")
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    order = np.argsort(-scores, axis=1, kind="stable")
    out = []
    for qi in range(scores.shape[0]):
        o = order[qi]
        if exclude_junk:
            junk = (g_ids[o] == q_ids[qi]) & (g_cams[o] == q_cams[qi])
            o = o[~junk]
        out.append(RankList(qi, int(q_ids[qi]), int(q_cams[qi]), o, scores[qi, o]))
    return out


def _ap_exact(hits) -> Fraction:
    pos = np.nonzero(hits)[0]
    if len(pos) == 0:
        return Fraction(0)
    return sum(Fraction(i + 1, int(p) + 1) for i, p in enumerate(pos)) / len(pos)


def average_precision(hits: np.ndarray) -> float:
    """AP of a boolean hit vector over a ranked list (all positives are inside it)."""
    return float(_ap_exact(hits))


def cmc_map(ranklists: Sequence[RankList], g_ids, ranks=CMC_RANKS) -> EvalReport:
    """Single-query CMC at ``ranks`` and mAP; queries without a correct match are skipped."""
    g_ids = np.asarray(g_ids)
    max_r = max(ranks)
    hits_at = np.zeros(max_r)
    aps = []
    skipped = 0
    for rl in ranklists:
        hits = g_ids[rl.order] == rl.query_id
        if not hits.any():
            skipped += 1
            continue
        first = int(np.argmax(hits))
        if first < max_r:
            hits_at[first:] += 1
        aps.append(_ap_exact(hits))
    n = len(aps)
    if n == 0:
        return EvalReport({r: 0.0 for r in ranks}, 0.0, 0, skipped)
    # rational accumulation keeps mAP independent of summation order
    return EvalReport({r: float(hits_at[r - 1] / n) for r in ranks}, float(sum(aps) / n), n, skipped)


def evaluate_scores(scores, query, gallery, config=None) -> EvalReport:
    rl = rank(scores, query.ids, query.cams, gallery.ids, gallery.cams)
    rep = cmc_map(rl, gallery.ids)
    rep.config = dict(config or {})
    return rep


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking

def _k_reciprocal(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, :k + 1]
    backward = initial_rank[forward, :k + 1]
    return forward[np.any(backward == i, axis=1)]


def rerank_k_reciprocal(q_g, q_q, g_g, k1: int = 20, k2: int = 6, lam: float = 0.3) -> np.ndarray:
    """k-reciprocal re-ranking of query-gallery distances.

    Inputs are distance matrices (lower = closer). The returned (Q, G) matrix is
    ``(1 - lam) * jaccard + lam * original``.
    """
    q_g, q_q, g_g = (np.asarray(x, dtype=np.float64) for x in (q_g, q_q, g_g))
    if not (k1 > k2 >= 1):
        raise ValueError("need k1 > k2 >= 1")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    nq, ngal = q_g.shape
    if ngal < k1:
        raise ValueError(f"gallery of {ngal} is smaller than k1={k1}")
    n_all = nq + ngal
    dist = np.block([[q_q, q_g], [q_g.T, g_g]])
    initial_rank = np.argsort(dist, axis=1, kind="stable")
    half = int(np.around(k1 / 2.0))
    V = np.zeros((n_all, n_all))
    for i in range(n_all):
        recip = _k_reciprocal(initial_rank, i, k1)
        expansion = recip
        for cand in recip:
            cand_recip = _k_reciprocal(initial_rank, cand, half)
            if len(np.intersect1d(cand_recip, recip)) > 2.0 / 3.0 * len(cand_recip):
                expansion = np.append(expansion, cand_recip)
        expansion = np.unique(expansion)
        w = np.exp(-dist[i, expansion])
        V[i, expansion] = w / w.sum()
    if k2 != 1:
        V = np.stack([V[initial_rank[i, :k2]].mean(axis=0) for i in range(n_all)])
    jaccard = np.empty((nq, n_all))
    for i in range(nq):
        mins = np.minimum(V[i][None, :], V).sum(axis=1)
        jaccard[i] = 1.0 - mins / (2.0 - mins)
    final = (1.0 - lam) * jaccard[:, nq:] + lam * q_g
    return final


# ---------------------------------------------------------------------------
# average query expansion

def aqe(query_feats, gallery_feats, ranklists: Sequence[RankList], top_m: int = 2) -> np.ndarray:
    """Replace each query by the mean of itself and its top-m ranked gallery features."""
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    if top_m <= 0:
        return q.copy()
    out = np.empty_like(q)
    for rl in ranklists:
        top = rl.order[:top_m]
        out[rl.query_index] = np.concatenate([q[rl.query_index][None], g[top]]).mean(axis=0)
    return out


def cosine_scores(query_feats, gallery_feats) -> np.ndarray:
    q = np.asarray(query_feats, dtype=np.float64)[:, None, :]
    g = np.asarray(gallery_feats, dtype=np.float64)[None, :, :]
    return ng.cosine(q, g).value


# ---------------------------------------------------------------------------
# CSV output

def write_report_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, val in report.rows():
            w.writerow([name, repr(val)])
        for part, sub in report.parts.items():
            for name, val in sub.rows():
                w.writerow([f"{part}.{name}", repr(val)])
        w.writerow([])
        w.writerow(["config", "value"])
        for k, v in report.config.items():
            w.writerow([k, v])


def write_ranklists_csv(path, ranklists: Sequence[RankList], max_rank: int = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "rank", "gallery_id", "score"])
        for rl in ranklists:
            n = len(rl.order) if max_rank is None else min(max_rank, len(rl.order))
            for r in range(n):
                w.writerow([rl.query_index, r + 1, int(rl.order[r]), repr(float(rl.scores[r]))])
