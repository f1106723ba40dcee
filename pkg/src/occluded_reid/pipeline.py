"""End-to-end evaluation: encoding, graph scoring, recovery, baselines and studies."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import recovery, retrieval, visgraph
from .config import RunConfig, substream
from .descriptor import PART_NAMES, DescriptorSet
from .objective import Model, encode

BASELINES = ("none", "aqe", "rerank")


class MissingStageError(RuntimeError):
    pass


@dataclass
class EvalOutcome:
    report: retrieval.EvalReport
    scores: np.ndarray
    ranklists: List[retrieval.RankList]
    query: DescriptorSet  # encoded queries, recovered when recovery ran
    nbr_idx: Optional[np.ndarray] = None
    contributions: Optional[np.ndarray] = None
    extras: Dict[str, object] = field(default_factory=dict)


def graph_params(model: Model, graph: bool = True) -> dict:
    p = {n: model.params[n] for n in model.params.names("gcn.")}
    if not graph:
        p = {n: (np.zeros_like(v) if ".W_r." in n else v) for n, v in p.items()}
    return p


def require_stages(model: Model, stages) -> None:
    missing = [s for s in stages if s not in model.stages]
    if missing:
        raise MissingStageError(f"checkpoint lacks completed stage(s) {','.join(missing)}")


def config_echo(cfg: RunConfig, **kw) -> Dict[str, str]:
    echo = {k: str(v) for k, v in cfg.items()}
    echo.update({k: str(v) for k, v in kw.items()})
    return echo


def recover_queries(model: Model, q: DescriptorSet, g: DescriptorSet, scores: np.ndarray, cfg: RunConfig,
                    k: int = None, steps: int = None):
    k = cfg.k_neighbors if k is None else k
    steps = cfg.steps if steps is None else steps
    have, _ = recovery.frt_shape(model.params)
    if steps > have:
        raise MissingStageError(f"checkpoint holds recovery parameters for {have} steps, {steps} requested")
    nbr_idx, nbr_cos = recovery.top_k_neighbors(scores, k)
    rec, contrib = recovery.recover_set(q, g, nbr_idx, nbr_cos, model.params, steps=steps,
                                        scaled=cfg.scaled_attention)
    return rec, nbr_idx, contrib


def run_eval(model: Model, query_raw: DescriptorSet, gallery_raw: DescriptorSet, cfg: RunConfig,
             recover: bool = True, baseline: str = "none", graph: bool = True,
             k: int = None, steps: int = None, delta: float = None) -> EvalOutcome:
    if baseline not in BASELINES:
        raise ValueError(f"baseline must be one of {BASELINES}")
    require_stages(model, ("E", "G", "T") if recover else (("E", "G") if graph else ("E",)))
    delta = cfg.delta if delta is None else delta
    q = encode(query_raw, model.params, delta)
    g = encode(gallery_raw, model.params, delta)
    gp = graph_params(model, graph)
    scores = visgraph.score_matrix(q, g, gp, cfg.gamma)
    nbr_idx = contrib = None
    if recover:
        q, nbr_idx, contrib = recover_queries(model, q, g, scores, cfg, k, steps)
        scores = visgraph.score_matrix(q, g, gp, cfg.gamma)
    extras = {}
    if baseline == "aqe":
        plain = retrieval.rank(scores, q.ids, q.cams, g.ids, g.cams, exclude_junk=False)
        expanded = retrieval.aqe(q.concat_features(), g.concat_features(), plain, cfg.aqe_top_m)
        scores = retrieval.cosine_scores(expanded, g.concat_features())
    elif baseline == "rerank":
        q_q = visgraph.score_matrix(q, q, gp, cfg.gamma)
        g_g = visgraph.score_matrix(g, g, gp, cfg.gamma)
        dist = retrieval.rerank_k_reciprocal(1.0 - scores, 1.0 - q_q, 1.0 - g_g,
                                             cfg.rerank_k1, cfg.rerank_k2, cfg.rerank_lambda)
        extras["distances"] = dist
        scores = -dist
    rl = retrieval.rank(scores, q.ids, q.cams, g.ids, g.cams)
    rep = retrieval.cmc_map(rl, g.ids)
    rep.config = config_echo(cfg, recover=recover, baseline=baseline, graph=graph,
                             k=k or cfg.k_neighbors, steps=steps or cfg.steps, delta=delta)
    return EvalOutcome(rep, scores, rl, q, nbr_idx, contrib, extras)


def per_part_eval(model: Model, query_raw: DescriptorSet, gallery_raw: DescriptorSet, cfg: RunConfig,
                  recovered: bool) -> Dict[str, retrieval.EvalReport]:
    """Retrieval on each part alone (cosine) and on the full graph pipeline ("concat")."""
    out = run_eval(model, query_raw, gallery_raw, cfg, recover=recovered)
    g = encode(gallery_raw, model.params, cfg.delta)
    reports = {}
    for i, name in enumerate(PART_NAMES):
        s = retrieval.cosine_scores(out.query.parts[:, i], g.parts[:, i])
        reports[name] = retrieval.evaluate_scores(s, out.query, g, config_echo(cfg, part=name, recovered=recovered))
    reports["concat"] = out.report
    return reports


def subsample_gallery(gallery: DescriptorSet, per_id: int, seed: int) -> DescriptorSet:
    """Keep ``per_id`` images of every identity (seeded), preserving the original order."""
    if per_id < 1:
        raise ValueError("gallery size per identity must be >= 1")
    rng = substream(seed, f"gallery.{per_id}")
    keep = []
    for pid in np.unique(gallery.ids):
        idx = np.nonzero(gallery.ids == pid)[0]
        if per_id > len(idx):
            raise ValueError(f"identity {pid} has {len(idx)} gallery images, {per_id} requested")
        keep.extend(idx if per_id == len(idx) else rng.choice(idx, size=per_id, replace=False))
    return gallery.take(np.sort(np.asarray(keep)))


def gallery_size_sweep(model: Model, query_raw: DescriptorSet, gallery_raw: DescriptorSet, cfg: RunConfig,
                       sizes, recover: bool = True) -> List[tuple]:
    rows = []
    for n in sizes:
        g = subsample_gallery(gallery_raw, n, cfg.seed)
        rows.append((n, run_eval(model, query_raw, g, cfg, recover=recover).report))
    return rows


ABLATION_ROWS = (
    ("E", False, False),
    ("E+G", True, False),
    ("E+T", False, True),
    ("E+G+T", True, True),
)


def ablation(model: Model, query_raw: DescriptorSet, gallery_raw: DescriptorSet, cfg: RunConfig):
    """Module ablation: graph matching on/off crossed with recovery on/off."""
    return [(name, run_eval(model, query_raw, gallery_raw, cfg, recover=rec, graph=gr).report)
            for name, gr, rec in ABLATION_ROWS]


def sweep(model: Model, query_raw: DescriptorSet, gallery_raw: DescriptorSet, cfg: RunConfig,
          param: str, values) -> List[tuple]:
    """(value, report) per setting of k, s, delta or gallery_size."""
    rows = []
    for v in values:
        if param == "k":
            rep = run_eval(model, query_raw, gallery_raw, cfg, k=int(v)).report
        elif param == "s":
            rep = run_eval(model, query_raw, gallery_raw, cfg, steps=int(v)).report
        elif param == "delta":
            d = float(v)
            if not 0.0 <= d <= 1.0:
                raise ValueError(f"delta {v} outside [0, 1]")
            rep = run_eval(model, query_raw, gallery_raw, cfg, delta=d).report
        elif param == "gallery_size":
            rep = gallery_size_sweep(model, query_raw, gallery_raw, cfg, [int(v)])[0][1]
        else:
            raise ValueError(f"unknown sweep parameter {param!r}")
        rows.append((v, rep))
    return rows
