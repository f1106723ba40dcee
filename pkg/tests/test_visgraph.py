import numpy as np
import pytest

from occluded_reid import numgrad as ng
from occluded_reid import visgraph as vg
from occluded_reid.descriptor import DescriptorSet, PersonDescriptor

from conftest import random_set, randomize


def cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na < 1e-12 or nb < 1e-12 else float(a @ b / (na * nb))


def adjacency_oracle(fq, fg, vq, vg_, gamma):
    A = np.empty((4, 4))
    for i in range(4):
        phi = min(vq[i], vg_[i])
        for j in range(4):
            A[i, j] = 1.0 if i == j else phi + (1.0 - cos(fq[i], fg[i]) if phi > gamma else 0.0)
    return A


def gcn_oracle(X, A_hat, W_m, W_r):
    c = X.shape[1]
    M = np.zeros_like(X)
    for i in range(4):
        agg = sum(A_hat[i, j] * X[j] for j in range(4))
        M[i] = np.maximum(agg @ W_m, 0.0)
    out = X.copy()
    for i in range(4):
        out[i] = X[i] + X[i] @ W_r[:c] + M[i] @ W_r[c:]
    return out


def desc(parts, vis, pid=0, cam=0):
    return PersonDescriptor(pid, cam, np.full(12, 0.5), np.asarray(parts, float), np.asarray(vis, float))


def gcn_params(rng, c, layers=1):
    ps = ng.ParamSet()
    vg.init_gcn(ps, c, rng, layers)
    return randomize(ps, rng, "gcn.W_r")


def test_shared_visibility():
    assert vg.shared_visibility([0.3], [0.9]).tolist() == [0.3]
    v = np.array([0.2, 0.5, 0.0, 1.0])
    assert np.array_equal(vg.shared_visibility(v, v), v)
    assert vg.shared_visibility([0.0, 0.7], [0.8, 0.9])[0] == 0.0


def test_adjacency_substitution():
    # phi = 0.5, gamma = 0.4, cosine 0.2 on part 0
    fq = np.zeros((4, 2))
    fg = np.zeros((4, 2))
    fq[0] = [1.0, 0.0]
    fg[0] = [0.2, np.sqrt(1 - 0.04)]
    A = vg.adjacency(desc(fq, [0.5, 0.1, 0.1, 0.1]), desc(fg, [0.9, 0.9, 0.9, 0.9]), gamma=0.4).adjacency
    assert A[0, 1] == pytest.approx(1.3, abs=1e-12)
    assert np.all(A[1, [0, 2, 3]] == 0.1)
    assert np.array_equal(np.diag(A), np.ones(4))


def test_adjacency_matches_formula(rng):
    for _ in range(1000):
        c = int(rng.integers(1, 6))
        fq, fg = rng.normal(size=(4, c)), rng.normal(size=(4, c))
        fq[rng.random(4) < 0.2] = 0.0
        vq, vg_ = rng.random(4), rng.random(4)
        gamma = rng.random()
        got = vg.adjacency_matrix(fq, fg, vq, vg_, gamma)
        assert np.max(np.abs(got - adjacency_oracle(fq, fg, vq, vg_, gamma))) <= 1e-12


def test_adjacency_rows_constant_and_monotone(rng):
    fq, fg = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    vq = np.array([0.1, 0.3, 0.6, 0.9])
    A = vg.adjacency_matrix(fq, fg, vq, np.ones(4), 0.5)
    for i in range(4):
        off = np.delete(A[i], i)
        assert np.all(off == off[0])
    A2 = vg.adjacency_matrix(fq, fg, vq + 0.05, np.ones(4), 0.5)
    off_mask = ~np.eye(4, dtype=bool)
    assert np.all(A2[off_mask] >= A[off_mask])


def test_adjacency_shape_error():
    with pytest.raises(ng.ShapeError):
        vg.adjacency(desc(np.ones((4, 2)), np.ones(4)), desc(np.ones((4, 3)), np.ones(4)))


def test_normalize():
    assert np.array_equal(vg.normalize(np.eye(4)), np.eye(4))
    A = np.eye(4)
    A[0] = [1, 2, 1, 0]
    assert vg.normalize(A)[0].tolist() == [0.25, 0.5, 0.25, 0.0]


def test_normalized_rows_sum_to_one(rng):
    A = vg.adjacency_matrix(rng.normal(size=(50, 4, 6)), rng.normal(size=(50, 4, 6)),
                            rng.random((50, 4)), rng.random((50, 4)), 0.3)
    assert np.max(np.abs(vg.normalize(A).sum(-1) - 1)) < 1e-12


def test_gcn_zero_residual_is_identity(rng):
    ps = ng.ParamSet()
    vg.init_gcn(ps, 5, rng)
    X, Y = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    a, b = vg.gcn_forward(X, Y, vg.normalize(rng.random((4, 4)) + np.eye(4)), ps)
    assert np.array_equal(a.value, X) and np.array_equal(b.value, Y)


def test_gcn_locality(rng):
    c = 4
    ps = gcn_params(rng, c)
    X = np.zeros((4, c))
    X[2] = rng.normal(size=c)
    out, _ = vg.gcn_forward(X, X, np.eye(4), ps)
    assert not out.value[[0, 1, 3]].any()


def test_gcn_matches_oracle(rng):
    c = 8
    ps = gcn_params(rng, c, layers=2)
    Fq, Fg = rng.normal(size=(4, c)), rng.normal(size=(4, c))
    A_hat = vg.normalize(vg.adjacency_matrix(Fq, Fg, rng.random(4), rng.random(4), 0.4))
    got_q, got_g = vg.gcn_forward(Fq, Fg, A_hat, ps)
    ref_q, ref_g = Fq, Fg
    for l in range(2):
        ref_q = gcn_oracle(ref_q, A_hat, ps[f"gcn.W_m.{l}"], ps[f"gcn.W_r.{l}"])
        ref_g = gcn_oracle(ref_g, A_hat, ps[f"gcn.W_m.{l}"], ps[f"gcn.W_r.{l}"])
    assert np.max(np.abs(got_q.value - ref_q)) < 1e-12
    assert np.max(np.abs(got_g.value - ref_g)) < 1e-12


def test_pair_similarity_cases(rng):
    ps = gcn_params(rng, 6)
    d = desc(rng.normal(size=(4, 6)), rng.random(4))
    assert vg.pair_similarity(d, d, ps) == pytest.approx(1.0, abs=1e-12)
    z = desc(np.zeros((4, 6)), np.zeros(4))
    assert vg.pair_similarity(z, z, ps) == 0.0


def test_pair_similarity_symmetric(rng):
    ps = gcn_params(rng, 6)
    for _ in range(100):
        a = desc(rng.normal(size=(4, 6)), rng.random(4))
        b = desc(rng.normal(size=(4, 6)), rng.random(4))
        assert abs(vg.pair_similarity(a, b, ps) - vg.pair_similarity(b, a, ps)) <= 1e-12


def test_zero_residual_reduces_to_concat_cosine(rng):
    ps = ng.ParamSet()
    vg.init_gcn(ps, 6, rng)
    a = desc(rng.normal(size=(4, 6)), rng.random(4))
    b = desc(rng.normal(size=(4, 6)), rng.random(4))
    assert vg.pair_similarity(a, b, ps) == pytest.approx(cos(a.parts.ravel(), b.parts.ravel()), abs=1e-12)


def test_score_matrix_small_cases(rng):
    ps = gcn_params(rng, 3)
    q = random_set(rng, 2, 3)
    assert vg.score_matrix(q.take([0]), q.take([0]), ps)[0, 0] == pytest.approx(1.0, abs=1e-12)
    g = DescriptorSet(q.ids[[1, 0]], q.cams[[1, 0]], q.kp_conf[[1, 0]], q.parts[[1, 0]], q.vis[[1, 0]])
    S = vg.score_matrix(q, g, ps)
    assert np.argmax(S[0]) == 1 and np.argmax(S[1]) == 0


def test_score_matrix_loop_oracle(rng):
    ps = gcn_params(rng, 4)
    q, g = random_set(rng, 5, 4, occlude=0.5), random_set(rng, 20, 4, occlude=0.5)
    S = vg.score_matrix(q, g, ps, chunk_pairs=7)
    ref = np.array([[vg.pair_similarity(q[i], g[j], ps) for j in range(20)] for i in range(5)])
    assert np.max(np.abs(S - ref)) < 1e-12


def test_score_matrix_errors(rng):
    ps = gcn_params(rng, 4)
    with pytest.raises(ng.ShapeError):
        vg.score_matrix(random_set(rng, 2, 4), random_set(rng, 2, 3), ps)
    with pytest.raises(ValueError):
        vg.score_matrix(random_set(rng, 2, 4).take([]), random_set(rng, 2, 4), ps)
