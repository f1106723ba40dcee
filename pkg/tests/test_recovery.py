import copy

import numpy as np
import pytest

from occluded_reid import numgrad as ng
from occluded_reid import recovery as rc
from occluded_reid.descriptor import PersonDescriptor

from conftest import randomize


def frt(rng, c=8, steps=2, layers=1, hidden=None, random=True):
    ps = ng.ParamSet()
    rc.init_frt(ps, c, rng, steps=steps, layers=layers, hidden=hidden)
    return randomize(ps, rng) if random else ps


def person(rng, c, vis=None, pid=0):
    vis = rng.random(4) if vis is None else np.asarray(vis, float)
    return PersonDescriptor(pid, 0, rng.random(12), rng.normal(size=(4, c)), vis)


def ctx(rng, c=8, k=3):
    return rc.RecoveryContext(person(rng, c), [person(rng, c, pid=i + 1) for i in range(k)], list(rng.random(k)))


def attention_oracle(fq, fk, P, pre):
    """Explicit loops over query tokens and neighbour tokens."""
    out = np.empty_like(fq)
    weights = np.empty((fq.shape[0], fk.shape[0]))
    for i in range(fq.shape[0]):
        q = fq[i] @ P[pre + "Wq"] + P[pre + "bq"]
        logits = []
        for j in range(fk.shape[0]):
            k = fk[j] @ P[pre + "Wk"] + P[pre + "bk"]
            logits.append(sum(q[t] * k[t] for t in range(len(q))))
        logits = np.array(logits)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        weights[i] = w
        m = np.zeros(fq.shape[1])
        for j in range(fk.shape[0]):
            m += w[j] * (fk[j] @ P[pre + "Wv"] + P[pre + "bv"])
        h = np.maximum(np.concatenate([fq[i], m]) @ P[pre + "U1"] + P[pre + "u1"], 0.0)
        out[i] = fq[i] + h @ P[pre + "U2"] + P[pre + "u2"]
    return out, weights


def test_embedding_identity_at_init(rng):
    ps = frt(rng, random=False)
    f = rng.normal(size=(4, 8))
    side = rc.side_info(0.7, rng.random(4))
    assert np.array_equal(rc.embed_local_info(f, side, ps).value, f)


def test_embedding_depends_on_position(rng):
    ps = frt(rng)
    f = rng.normal(size=8)
    side = rc.side_info(0.7, np.full(4, 0.6))
    out = rc.embed_local_info(np.stack([f, f]), side[:2], ps).value
    assert not np.allclose(out[0], out[1])


def test_embedding_additive(rng):
    ps = frt(rng)
    side = rc.side_info(0.3, rng.random(4))
    f = rng.normal(size=(4, 8))
    zero = rc.embed_local_info(np.zeros((4, 8)), side, ps).value
    assert np.allclose(rc.embed_local_info(f, side, ps).value, f + zero, atol=1e-14)


def test_layer_identity_at_init(rng):
    ps = frt(rng, random=False)
    fq, fk = rng.normal(size=(4, 8)), rng.normal(size=(8, 8))
    out, attn = rc.transformer_layer(fq, fk, ps, "frt.s0.l0.")
    assert np.array_equal(out.value, fq)


def test_layer_convexity_collapse(rng):
    ps = frt(rng)
    pre = "frt.s0.l0."
    tok = rng.normal(size=8)
    fk = np.tile(tok, (4, 1))
    fq = rng.normal(size=(4, 8))
    out, _ = rc.transformer_layer(fq, fk, ps, pre)
    m = tok @ ps[pre + "Wv"] + ps[pre + "bv"]
    h = np.maximum(np.concatenate([fq, np.tile(m, (4, 1))], axis=1) @ ps[pre + "U1"] + ps[pre + "u1"], 0)
    assert np.allclose(out.value, fq + h @ ps[pre + "U2"] + ps[pre + "u2"], atol=1e-12)


def test_layer_matches_loop_oracle(rng):
    ps = frt(rng, c=8)
    fq, fk = rng.normal(size=(4, 8)), rng.normal(size=(8, 8))  # k = 2 neighbours
    out, attn = rc.transformer_layer(fq, fk, ps, "frt.s1.l0.")
    ref, w = attention_oracle(fq, fk, ps, "frt.s1.l0.")
    assert np.max(np.abs(out.value - ref)) < 1e-12
    assert np.max(np.abs(attn - w)) < 1e-12


def test_layer_shape_error(rng):
    with pytest.raises(ng.ShapeError):
        rc.transformer_layer(np.ones((4, 8)), np.ones((4, 6)), frt(rng), "frt.s0.l0.")


def test_scaled_attention_flag(rng):
    ps = frt(rng)
    fq, fk = rng.normal(size=(4, 8)), rng.normal(size=(8, 8))
    _, a = rc.transformer_layer(fq, fk, ps, "frt.s0.l0.")
    _, b = rc.transformer_layer(fq, fk, ps, "frt.s0.l0.", scaled=True)
    logits = (fq @ ps["frt.s0.l0.Wq"] + ps["frt.s0.l0.bq"]) @ (fk @ ps["frt.s0.l0.Wk"] + ps["frt.s0.l0.bk"]).T
    assert np.allclose(b, ng.softmax_np(logits / np.sqrt(8)), atol=1e-12)
    assert not np.allclose(a, b)


def test_recover_identity_at_init(rng):
    c = ctx(rng)
    out, _ = rc.recover(c, frt(rng, random=False))
    assert np.array_equal(out, c.query.parts)


def test_neighbours_untouched(rng):
    c = ctx(rng)
    before = copy.deepcopy([(n.parts, n.vis) for n in c.neighbors])
    rc.recover(c, frt(rng))
    for (p, v), n in zip(before, c.neighbors):
        assert np.array_equal(p, n.parts) and np.array_equal(v, n.vis)


def test_steps_compose(rng):
    ps = frt(rng, steps=3)
    c = ctx(rng)
    assert not np.allclose(rc.recover(c, ps, steps=1)[0], rc.recover(c, ps, steps=3)[0])


def test_too_many_steps_refused(rng):
    with pytest.raises(ng.ContractError):
        rc.recover(ctx(rng), frt(rng, steps=2), steps=3)


def test_empty_neighbours():
    with pytest.raises(ng.ContractError):
        rc.RecoveryContext(PersonDescriptor(0, 0, np.zeros(12), np.zeros((4, 2)), np.zeros(4)), [], [])


def test_report_k1(rng):
    rep = rc.attention_report(ctx(rng, k=1), frt(rng))
    assert rep.contributions.tolist() == [1.0]


def test_report_identical_neighbours(rng):
    n = person(rng, 8)
    c = rc.RecoveryContext(person(rng, 8), [n, n], [0.4, 0.4])
    assert np.allclose(rc.attention_report(c, frt(rng)).contributions, [0.5, 0.5], atol=1e-12)


def test_report_sums_and_rows(rng):
    ps = frt(rng, steps=3, layers=2)
    c = ctx(rng, k=5)
    rep = rc.attention_report(c, ps)
    assert abs(rep.contributions.sum() - 1) < 1e-9 and np.all(rep.contributions >= 0)
    assert np.max(np.abs(rep.part_attention.sum(axis=(1, 2)) - 1)) < 1e-9


def test_report_permutation_equivariant(rng):
    ps = frt(rng)
    c = ctx(rng, k=4)
    perm = [2, 0, 3, 1]
    c2 = rc.RecoveryContext(c.query, [c.neighbors[i] for i in perm], [c.neighbor_cos[i] for i in perm])
    a = rc.attention_report(c, ps).contributions
    b = rc.attention_report(c2, ps).contributions
    assert np.allclose(b, a[perm], atol=1e-12)


def test_key_bias_is_inert(rng):
    ps = frt(rng)
    c = ctx(rng)
    before = rc.recover(c, ps)[0]
    ps.params["frt.s0.l0.bk"].value = ps["frt.s0.l0.bk"] + rng.normal(size=8) * 5
    assert np.max(np.abs(rc.recover(c, ps)[0] - before)) < 1e-12
    assert rc.is_inert("frt.s0.l0.bk") and not rc.is_inert("frt.s0.l0.bq")


def test_recover_set_matches_single(rng):
    from conftest import random_set
    ps = frt(rng)
    q, g = random_set(rng, 6, 8, occlude=0.5), random_set(rng, 10, 8)
    idx, cos = rc.top_k_neighbors(rng.random((6, 10)), 3)
    rec, contrib = rc.recover_set(q, g, idx, cos, ps, chunk=4)
    for i in range(6):
        c = rc.RecoveryContext(q[i], [g[j] for j in idx[i]], cos[i])
        one, rep = rc.recover(c, ps)
        assert np.allclose(rec.parts[i], one, atol=1e-12)
        assert np.allclose(contrib[i], rep.contributions, atol=1e-12)


def test_top_k_neighbors():
    s = np.array([[0.1, 0.5, 0.5, 0.9], [0.3, 0.2, 0.1, 0.0]])
    idx, val = rc.top_k_neighbors(s, 3)
    assert idx.tolist() == [[3, 1, 2], [0, 1, 2]]
    assert val[0].tolist() == [0.9, 0.5, 0.5]
    sq = np.array([[1.0, 0.2, 0.3], [0.2, 1.0, 0.1], [0.3, 0.1, 1.0]])
    assert rc.top_k_neighbors(sq, 1, exclude_self=True)[0].ravel().tolist() == [2, 0, 0]
    with pytest.raises(ValueError):
        rc.top_k_neighbors(sq, 3, exclude_self=True)


def test_attention_csv(tmp_path):
    p = tmp_path / "att.csv"
    rc.write_attention_csv(p, np.array([[0.75, 0.25]]), np.array([[4, 9]]))
    assert p.read_text().splitlines() == [
        "query_id,neighbor_rank,neighbor_id,contribution", "0,1,4,0.75", "0,2,9,0.25"]
