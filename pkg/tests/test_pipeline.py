import numpy as np
import pytest

from occluded_reid import objective as ob
from occluded_reid import pipeline, synth
from occluded_reid.config import RunConfig

CFG = RunConfig(c=8, frt_hidden=8, k_neighbors=3, epochs_E=3, epochs_G=1, epochs_T=1, batch_size=16,
                rerank_k1=8, rerank_k2=3)
DATA = synth.SynthConfig(n_ids=10, train_per_id=4, gallery_per_id=6, c_raw=12, proto_rank=6)


@pytest.fixture(scope="module")
def trained():
    sets = synth.generate_sets(DATA)
    model = ob.train_all(ob.init_model(DATA.c_raw, DATA.n_ids, CFG), sets["train"], CFG).model
    return model, sets


def test_missing_stage(trained):
    model, sets = trained
    e_only = model.copy()
    e_only.meta["stages"] = "E"
    with pytest.raises(pipeline.MissingStageError):
        pipeline.run_eval(e_only, sets["query"], sets["gallery"], CFG)
    pipeline.run_eval(e_only, sets["query"], sets["gallery"], CFG, recover=False, graph=False)


def test_graph_off_zeroes_residual(trained):
    model, _ = trained
    p = pipeline.graph_params(model, graph=False)
    assert not p["gcn.W_r.0"].any() and np.array_equal(p["gcn.W_m.0"], model.params["gcn.W_m.0"])


def test_report_echoes_config(trained):
    model, sets = trained
    rep = pipeline.run_eval(model, sets["query"], sets["gallery"], CFG, baseline="aqe").report
    assert rep.config["baseline"] == "aqe" and rep.config["k_neighbors"] == "3"
    with pytest.raises(ValueError):
        pipeline.run_eval(model, sets["query"], sets["gallery"], CFG, baseline="bogus")


def test_recovery_with_rerank_runs(trained):
    model, sets = trained
    out = pipeline.run_eval(model, sets["query"], sets["gallery"], CFG, baseline="rerank")
    assert out.contributions is not None and out.extras["distances"].shape == out.scores.shape
    assert 0.0 <= out.report.mAP <= 1.0


def test_subsample_gallery(trained):
    _, sets = trained
    g = sets["gallery"]
    sub = pipeline.subsample_gallery(g, 2, seed=4)
    assert len(sub) == 2 * DATA.n_ids
    assert sub.equals(pipeline.subsample_gallery(g, 2, seed=4))
    assert pipeline.subsample_gallery(g, DATA.gallery_per_id, seed=4).equals(g)
    with pytest.raises(ValueError):
        pipeline.subsample_gallery(g, DATA.gallery_per_id + 1, seed=0)


def test_gallery_sweep_full_size_matches_standard(trained):
    model, sets = trained
    rows = pipeline.gallery_size_sweep(model, sets["query"], sets["gallery"], CFG, [1, DATA.gallery_per_id])
    full = pipeline.run_eval(model, sets["query"], sets["gallery"], CFG).report
    assert rows[1][1].mAP == full.mAP and rows[1][1].cmc == full.cmc
    assert rows[0][1].n_queries + rows[0][1].n_skipped == len(sets["query"])


def test_per_part_eval(trained):
    model, sets = trained
    reps = pipeline.per_part_eval(model, sets["query"], sets["gallery"], CFG, recovered=True)
    assert list(reps) == ["global", "head", "torso", "leg", "concat"]


def test_sweeps(trained):
    model, sets = trained
    rows = pipeline.sweep(model, sets["query"], sets["gallery"], CFG, "delta", ["0.0", "0.5"])
    assert len(rows) == 2
    with pytest.raises(ValueError):
        pipeline.sweep(model, sets["query"], sets["gallery"], CFG, "gamma", ["1"])
    with pytest.raises(pipeline.MissingStageError):
        pipeline.sweep(model, sets["query"], sets["gallery"], CFG, "s", ["5"])


def test_ablation_rows(trained):
    model, sets = trained
    rows = pipeline.ablation(model, sets["query"], sets["gallery"], CFG)
    assert [r[0] for r in rows] == ["E", "E+G", "E+T", "E+G+T"]
