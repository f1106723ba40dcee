import numpy as np
import pytest

from occluded_reid import synth
from occluded_reid.descriptor import read_pfv

SMALL = synth.SynthConfig(n_ids=10, train_per_id=4, query_per_id=2, gallery_per_id=4, c_raw=8, proto_rank=4)


def test_files_and_determinism(tmp_path):
    a = synth.generate(SMALL, tmp_path / "a")
    b = synth.generate(SMALL, tmp_path / "b" / "nested")
    for split in synth.SPLITS:
        assert a[split].read_bytes() == b[split].read_bytes()
    assert synth.read_manifest(a["manifest"]) == SMALL


def test_seed_changes_output():
    x = synth.generate_sets(SMALL)["train"]
    y = synth.generate_sets(SMALL.replace(seed=1))["train"]
    assert not np.array_equal(x.parts, y.parts)


def test_no_occlusion_gives_clean_visibility():
    cfg = SMALL.replace(p_torso=0.0, p_leg=0.0, train_per_id=200)
    vis = synth.generate_sets(cfg)["train"].vis
    assert np.all((vis >= cfg.conf_low) & (vis <= cfg.conf_high))
    assert abs(vis[:, 0].mean() - cfg.clean_conf_mean) < 0.01


def test_full_leg_occlusion():
    sets = synth.generate_sets(SMALL.replace(p_leg=1.0, severity=1.0))
    for d in sets.values():
        assert np.all(d.vis[:, 3] < 0.2)


def test_confidences_in_unit_interval():
    for d in synth.generate_sets(SMALL.replace(p_torso=0.7, severity=0.5)).values():
        assert d.kp_conf.min() >= 0.0 and d.kp_conf.max() <= 1.0


def test_every_query_has_a_match():
    sets = synth.generate_sets(SMALL)
    q, g = sets["query"], sets["gallery"]
    for pid, cam in zip(q.ids, q.cams):
        assert np.any((g.ids == pid) & (g.cams != cam))


def test_disjoint_protocol():
    sets = synth.generate_sets(SMALL.replace(shared_ids=False))
    assert not set(sets["train"].ids) & set(sets["query"].ids)
    assert set(sets["query"].ids) == set(sets["gallery"].ids)


def test_low_rank_prototypes():
    cfg = SMALL.replace(sigma_within=1e-9, camera_scale=0.0, p_torso=0.0, p_leg=0.0, c_raw=12, proto_rank=3)
    parts = synth.generate_sets(cfg)["train"].parts
    assert np.linalg.matrix_rank(parts[:, 2], tol=1e-6) == 3


@pytest.mark.parametrize("field, value", [("n_ids", 0), ("p_leg", 1.5), ("sigma_within", 0.0), ("proto_rank", -1)])
def test_invalid_config(field, value):
    with pytest.raises(ValueError):
        SMALL.replace(**{field: value}).validate()


def test_written_files_parse(tmp_path):
    paths = synth.generate(SMALL, tmp_path)
    assert len(read_pfv(paths["gallery"])) == SMALL.n_ids * SMALL.gallery_per_id
