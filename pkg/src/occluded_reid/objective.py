"""Losses for the three model stages and the staged training loop.

Stage E trains a per-part encoder (a linear+ReLU stand-in for the image
backbone) with per-part identity classifiers. Stage G trains the graph
matcher on frozen E features. Stage T trains the recovery transformer with the
stage-E classifiers frozen so recovered queries stay in the gallery's space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from . import numgrad as ng
from . import recovery, visgraph
from .config import RunConfig, substream
from .descriptor import N_PARTS, DescriptorSet, threshold_mask

log = logging.getLogger(__name__)

STAGES = ("E", "G", "T")
STAGE_PREFIXES = {"E": ("enc.", "cls_E."), "G": ("gcn.", "cls_G."), "T": ("frt.",)}


class StageOrderError(RuntimeError):
    pass


class TripletInfeasible(ValueError):
    pass


# ---------------------------------------------------------------------------
# model container

@dataclass
class Model:
    params: ng.ParamSet
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def stages(self) -> List[str]:
        s = self.meta.get("stages", "")
        return [x for x in s.split(",") if x]

    def mark_stage(self, stage: str) -> None:
        done = self.stages
        if stage not in done:
            done.append(stage)
        self.meta["stages"] = ",".join(done)

    def copy(self) -> "Model":
        return Model(self.params.copy(), dict(self.meta))


def init_model(c_raw: int, n_classes: int, cfg: RunConfig) -> Model:
    rng = substream(cfg.seed, "init")
    c = cfg.c
    p = ng.ParamSet()
    for i in range(N_PARTS):
        p.add(f"enc.W.{i}", rng.normal(0.0, np.sqrt(2.0 / c_raw), size=(c_raw, c)))
        p.add(f"enc.b.{i}", np.zeros(c))
    for i in range(N_PARTS):
        p.add(f"cls_E.W.{i}", rng.normal(0.0, 0.01, size=(c, n_classes)))
        p.add(f"cls_E.b.{i}", np.zeros(n_classes))
    visgraph.init_gcn(p, c, rng, cfg.gcn_layers)
    p.add("cls_G.W", rng.normal(0.0, 0.01, size=(N_PARTS * c, n_classes)))
    p.add("cls_G.b", np.zeros(n_classes))
    recovery.init_frt(p, c, rng, steps=cfg.steps, layers=cfg.frt_layers, hidden=cfg.frt_hidden)
    meta = {"c": str(c), "c_raw": str(c_raw), "n_classes": str(n_classes), "gcn_layers": str(cfg.gcn_layers),
            "steps": str(cfg.steps), "frt_layers": str(cfg.frt_layers), "frt_hidden": str(cfg.frt_hidden),
            "seed": str(cfg.seed), "stages": ""}
    return Model(p, meta)


def encode_parts(raw_parts, params, c_out: int = None) -> ng.Var:
    """Per-part linear+ReLU encoder: (N, 4, c_raw) -> (N, 4, c)."""
    raw = ng.as_var(raw_parts)
    outs = []
    for i in range(N_PARTS):
        x = ng.getitem(raw, (slice(None), i))
        h = ng.relu(ng.add(ng.matmul(x, params[f"enc.W.{i}"]), params[f"enc.b.{i}"]))
        outs.append(ng.reshape(h, (h.value.shape[0], 1, h.value.shape[1])))
    return ng.concat(outs, axis=1)


def encode(raw: DescriptorSet, params, delta: float) -> DescriptorSet:
    """Encode raw descriptors and zero every part whose visibility is below delta."""
    feats = encode_parts(raw.parts, {n: params[n] for n in params if str(n).startswith("enc.")}).value
    feats = feats * threshold_mask(raw.vis, delta)[..., None]
    return raw.with_parts(feats)


# ---------------------------------------------------------------------------
# losses

def cross_entropy(features, labels, W, b, weights=None) -> ng.Var:
    """-sum_j w_j log softmax(f_j W + b)[y_j]."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = ng.value_of(W).shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label outside [0, {n_classes})")
    logp = ng.log_softmax(ng.add(ng.matmul(features, W), b), axis=-1)
    picked = ng.getitem(logp, (np.arange(len(labels)), labels))
    if weights is not None:
        picked = ng.mul(picked, np.asarray(weights, dtype=np.float64))
    return ng.mul(ng.sum_(picked), -1.0)


def triplet(anchor, positive, negative, theta: float) -> ng.Var:
    """max(0, theta + |a - p| - |a - n|) for single vectors or stacked rows (summed)."""
    d_ap = ng.norm(ng.sub(anchor, positive))
    d_an = ng.norm(ng.sub(anchor, negative))
    return ng.sum_(ng.hinge(ng.add(ng.sub(d_ap, d_an), theta)))


def hardest_pairs(dist: np.ndarray, labels, valid=None):
    """Batch-hard mining on a distance matrix.

    Returns (anchors, positives, negatives) index arrays over anchors that have at
    least one valid positive and one valid negative. Ties resolve to the lowest index.
    """
    labels = np.asarray(labels)
    n = len(labels)
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    same = labels[:, None] == labels[None, :]
    cand = valid[None, :] & valid[:, None]
    pos_mask = same & cand & ~np.eye(n, dtype=bool)
    neg_mask = ~same & cand
    ok = pos_mask.any(1) & neg_mask.any(1)
    a = np.nonzero(ok)[0]
    p = np.argmax(np.where(pos_mask, dist, -np.inf)[a], axis=1)
    q = np.argmin(np.where(neg_mask, dist, np.inf)[a], axis=1)
    return a, p, q


def _euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sa = (a * a).sum(1)
    sb = (b * b).sum(1)
    return np.sqrt(np.maximum(sa[:, None] + sb[None, :] - 2.0 * a @ b.T, 0.0))


def batch_hard_triplet(features, labels, theta: float, valid=None, reference=None) -> ng.Var:
    """Sum over anchors of the Euclidean triplet loss with hardest positive/negative.

    With ``reference`` (same rows and labels as ``features``), positives and
    negatives are mined among the reference rows instead; row j of the reference
    is never paired with anchor j.
    """
    x = ng.as_var(features)
    cand = x if reference is None else ng.as_var(reference)
    dist = _euclidean(x.value, cand.value)
    a, p, q = hardest_pairs(dist, labels, valid)
    if len(a) == 0:
        return ng.Var(0.0)
    return triplet(ng.getitem(x, a), ng.getitem(cand, p), ng.getitem(cand, q), theta)


def similarity_triplet(sim: ng.Var, labels, theta: float) -> ng.Var:
    """Batch-hard triplet on a similarity matrix with distance 1 - s."""
    dist = ng.sub(1.0, sim)
    a, p, q = hardest_pairs(dist.value, labels)
    if len(a) == 0:
        return ng.Var(0.0)
    d_ap = ng.getitem(dist, (a, p))
    d_an = ng.getitem(dist, (a, q))
    return ng.sum_(ng.hinge(ng.add(ng.sub(d_ap, d_an), theta)))


def check_triplet_feasible(labels) -> None:
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    if (counts >= 2).sum() < 2:
        raise TripletInfeasible("batch needs at least 2 identities with 2 samples each")


def loss_E(raw_parts, vis, labels, params, delta: float, theta: float) -> ng.Var:
    """Per-part CE + triplet, skipping every (sample, part) zeroed by the delta rule."""
    keep = threshold_mask(vis, delta)
    feats = encode_parts(raw_parts, params)
    feats = ng.mul(feats, keep[..., None].astype(np.float64))
    total = ng.Var(0.0)
    for i in range(N_PARTS):
        fi = ng.getitem(feats, (slice(None), i))
        ce = cross_entropy(fi, labels, params[f"cls_E.W.{i}"], params[f"cls_E.b.{i}"], weights=keep[:, i])
        tri = batch_hard_triplet(fi, labels, theta, valid=keep[:, i])
        total = ng.add(total, ng.add(ce, tri))
    return total


def loss_G(parts, vis, labels, params, gamma: float, theta: float) -> ng.Var:
    """CE on self-matched graph features + batch-hard triplet on pairwise graph similarity."""
    check_triplet_feasible(labels)
    sim = visgraph.pairwise_similarity(parts, vis, params, gamma)
    tri = similarity_triplet(sim, labels, theta)
    feats = visgraph.self_graph_features(parts, vis, params, gamma)
    ce = cross_entropy(feats, labels, params["cls_G.W"], params["cls_G.b"])
    return ng.add(ce, tri)


def loss_T(recovered, labels, classifier, theta: float, reference=None) -> ng.Var:
    """CE under the frozen stage-E classifiers + triplet over recovered queries.

    ``classifier`` maps ``cls_E.*`` names to Vars; any that tracks gradients is refused.
    ``reference`` holds the unrecovered (N, 4, c) features of the same samples; when
    given, recovered anchors are mined against them so recovery is trained to match
    the gallery's feature space.
    """
    for name in (f"cls_E.{w}.{i}" for w in "Wb" for i in range(N_PARTS)):
        v = classifier[name]
        if isinstance(v, ng.Var) and v.requires_grad:
            raise ng.ContractError(f"stage-E classifier {name} must be frozen during stage T")
    rec = ng.as_var(recovered)
    total = ng.Var(0.0)
    for i in range(N_PARTS):
        fi = ng.getitem(rec, (slice(None), i))
        total = ng.add(total, cross_entropy(fi, labels, classifier[f"cls_E.W.{i}"], classifier[f"cls_E.b.{i}"]))
    flat = ng.reshape(rec, (rec.value.shape[0], -1))
    ref = None if reference is None else np.asarray(reference).reshape(rec.value.shape[0], -1)
    return ng.add(total, batch_hard_triplet(flat, labels, theta, reference=ref))


# ---------------------------------------------------------------------------
# training

def pk_batches(labels, batch_size: int, per_id: int, rng: np.random.Generator):
    """Identity-balanced batches: batch_size // per_id identities, per_id samples each."""
    labels = np.asarray(labels)
    ids = np.unique(labels)
    n_ids = max(2, batch_size // per_id)
    by_id = {i: np.nonzero(labels == i)[0] for i in ids}
    ids = rng.permutation(ids)
    batches = []
    for s in range(0, len(ids), n_ids):
        chunk = ids[s:s + n_ids]
        if len(chunk) < 2:
            continue
        idx = []
        for i in chunk:
            pool = by_id[i]
            take = min(per_id, len(pool))
            idx.extend(rng.choice(pool, size=take, replace=False).tolist())
        batches.append(np.array(idx))
    return batches


class _Optimizer:
    def __init__(self, cfg: RunConfig, lr: float):
        self.kind = cfg.optimizer
        self.lr = lr
        self.momentum = cfg.momentum
        self.state: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ng.ParamSet, grads: Dict[str, np.ndarray], names: Sequence[str]) -> None:
        self.t += 1
        for n in names:
            g = grads[n]
            p = params.params[n]
            if self.kind == "sgd":
                if self.momentum:
                    buf = self.state.get(n)
                    buf = g.copy() if buf is None else self.momentum * buf + g
                    self.state[n] = buf
                    g = buf
                p.value = p.value - self.lr * g
            elif self.kind == "adam":
                m, v = self.state.get(n + ".m", 0.0), self.state.get(n + ".v", 0.0)
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                self.state[n + ".m"], self.state[n + ".v"] = m, v
                mh = m / (1 - 0.9 ** self.t)
                vh = v / (1 - 0.999 ** self.t)
                p.value = p.value - self.lr * mh / (np.sqrt(vh) + 1e-8)
            else:
                raise ValueError(f"unknown optimizer {self.kind!r}")


@dataclass
class TrainResult:
    model: Model
    curve: List[tuple]  # (stage, epoch, mean batch loss)


def _require_order(model: Model, stage: str) -> None:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    need = STAGES[:STAGES.index(stage)]
    missing = [s for s in need if s not in model.stages]
    if missing:
        raise StageOrderError(f"stage {stage} requires completed stage(s) {','.join(missing)}")


def train_neighbors(feats: DescriptorSet, params, cfg: RunConfig):
    """k nearest training samples (graph similarity, self excluded) for every training sample."""
    scores = visgraph.score_matrix(feats, feats, params, cfg.gamma)
    return recovery.top_k_neighbors(scores, cfg.k_neighbors, exclude_self=True)


def train_stage(stage: str, model: Model, train: DescriptorSet, cfg: RunConfig) -> TrainResult:
    """Run one training stage in place on a copy of ``model``; returns the new model and loss curve."""
    _require_order(model, stage)
    model = model.copy()
    params = model.params
    prefixes = STAGE_PREFIXES[stage]
    for n, p in params.params.items():
        p.trainable = any(n.startswith(pre) for pre in prefixes) and not recovery.is_inert(n)
    names = [n for n, p in params.params.items() if p.trainable]
    labels = np.unique(train.ids, return_inverse=True)[1]
    epochs = {"E": cfg.epochs_E, "G": cfg.epochs_G, "T": cfg.epochs_T}[stage]
    opt = _Optimizer(cfg, {"E": cfg.lr_E, "G": cfg.lr_G, "T": cfg.lr_T}[stage])
    rng = substream(cfg.seed, f"batch.{stage}")

    if stage == "E":
        def make_loss(idx):
            return lambda vs: loss_E(train.parts[idx], train.vis[idx], labels[idx], vs, cfg.delta, cfg.theta_E)
    else:
        feats = encode(train, params, cfg.delta)
        if stage == "G":
            def make_loss(idx):
                return lambda vs: loss_G(feats.parts[idx], feats.vis[idx], labels[idx], vs, cfg.gamma, cfg.theta_G)
        else:
            nbr_idx, nbr_cos = train_neighbors(feats, params, cfg)
            q_side, n_parts, n_side = recovery.neighbor_batch(feats, feats, nbr_idx, nbr_cos)

            def make_loss(idx):
                def fn(vs):
                    rec, _ = recovery.recover_tokens(feats.parts[idx], q_side[idx], n_parts[idx], n_side[idx],
                                                     vs, steps=cfg.steps, scaled=cfg.scaled_attention)
                    ref = feats.parts[idx] if cfg.t_triplet == "cross" else None
                    return loss_T(rec, labels[idx], vs, cfg.theta_T, reference=ref)
                return fn

    curve = []
    for epoch in range(epochs):
        losses = []
        for idx in pk_batches(labels, cfg.batch_size, cfg.per_id, rng):
            loss, grads = ng.gradients(make_loss(idx), params)
            if not np.isfinite(loss):
                raise FloatingPointError(f"stage {stage}: non-finite loss at epoch {epoch}")
            opt.step(params, grads, names)
            losses.append(loss / len(idx))
        curve.append((stage, epoch, float(np.mean(losses)) if losses else 0.0))
        log.debug("stage %s epoch %d loss %.5f", stage, epoch, curve[-1][2])
    for p in params.params.values():
        p.trainable = True
    model.mark_stage(stage)
    return TrainResult(model, curve)


def train_all(model: Model, train: DescriptorSet, cfg: RunConfig, stages=STAGES) -> TrainResult:
    curve = []
    for s in stages:
        res = train_stage(s, model, train, cfg)
        model = res.model
        curve += res.curve
    return TrainResult(model, curve)


def write_curve_csv(path, curve) -> None:
    with open(path, "w") as fh:
        fh.write("stage,epoch,loss\n")
        for stage, epoch, loss in curve:
            fh.write(f"{stage},{epoch},{loss!r}\n")
