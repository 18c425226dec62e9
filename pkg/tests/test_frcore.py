import math

import numpy as np
import pytest

from idcloak import frcore, imaging


def test_training_is_deterministic(tiny):
    a = frcore.train_pool_model(tiny, "conv5", 4, 0.8, epochs=2)
    b = frcore.train_pool_model(tiny, "conv5", 4, 0.8, epochs=2)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert all(np.all(np.isfinite(p)) for p in a.params)


def test_subset_fraction_range(tiny):
    with pytest.raises(ValueError):
        frcore.train_pool_model(tiny, "conv5", 0, 0.5, epochs=1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_seed_and_step(tiny):
    with pytest.raises(frcore.TrainingDiverged, match=r"seed=9, step=\d+"):
        frcore.train_pool_model(tiny, "conv5", 9, 1.0, epochs=3, lr=1e200)


def test_embeddings_unit_norm_and_pure(tiny_pool):
    rng = np.random.default_rng(0)
    for model in tiny_pool:
        x = rng.uniform(size=(16, 16, 3))
        e = model.embed(x)
        assert abs(np.linalg.norm(e) - 1.0) <= 1e-9
        assert np.array_equal(e, model.embed(x.copy()))
        # resized inputs go through the same path
        assert model.embed(rng.uniform(size=(24, 24, 3))).shape == (model.embedding_dim,)


def test_same_identity_closer_than_other(tiny, tiny_pool):
    recs = tiny.select()
    for model in tiny_pool:
        e = np.stack([model.embed(imaging.face_crop(tiny.image(r))) for r in recs])
        labels = np.array([r.identity for r in recs])
        ang = np.arccos(np.clip(e @ e.T, -1, 1))
        same = labels[:, None] == labels[None]
        np.fill_diagonal(same, False)
        assert ang[same].mean() < ang[labels[:, None] != labels[None]].mean()


def test_tiny_pool_learns(tiny, tiny_pool):
    for model in tiny_pool:
        assert frcore.probe_accuracy(model, tiny) >= 87.5


def test_pool_admission(tiny):
    pool = frcore.build_pool(tiny, [("conv5", 2, 0.8)], epochs=15, min_accuracy=90.0)
    assert [m.model_id for m in pool] == ["conv5-0"]
    with pytest.raises(frcore.TrainingDiverged, match="no candidate"):
        frcore.build_pool(tiny, [("conv5", 1, 1.0)], epochs=0, min_accuracy=101.0, attempts=2)


def test_arccos_dist_cases():
    e = np.eye(3)
    assert frcore.arccos_dist(e[0], e[0]) == pytest.approx(0.0, abs=5e-4)
    assert frcore.arccos_dist(e[0], e[1]) == pytest.approx(math.pi / 2, abs=1e-15)
    assert frcore.arccos_dist(e[0], -e[0]) == pytest.approx(math.pi, abs=5e-4)
    with pytest.raises(ValueError, match="unit"):
        frcore.arccos_dist([2.0, 0.0, 0.0], e[0])


def test_arccos_order_matches_euclidean_order():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(200, 8))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    p = v[0]
    ang = [frcore.arccos_dist(p, u) for u in v[1:]]
    euc = np.linalg.norm(v[1:] - p, axis=1)
    assert np.array_equal(np.argsort(ang, kind="stable"), np.argsort(euc, kind="stable"))


class Fixed:
    """Stub model returning preset embeddings keyed by the first pixel."""

    def __init__(self, table):
        self.table = table

    def embed(self, face):
        return self.table[float(face[0, 0, 0])]

    def embed_many(self, faces):
        return np.stack([self.embed(f) for f in faces])


def face(v):
    return np.full((8, 8, 3), v)


def test_identify_tie_rule_and_single_entry():
    e = np.eye(2)
    model = Fixed({0.1: e[0], 0.2: e[0], 0.3: e[1], 0.4: e[1]})
    g = frcore.Gallery([face(0.1), face(0.2)], ["b", "a"], ["seen", "seen"])
    assert frcore.fr_identify(face(0.3), model, g) == "b"  # lower index wins exact ties
    single = frcore.Gallery([face(0.3)], ["z"], ["seen"])
    assert frcore.fr_identify(face(0.1), model, single) == "z"
    with pytest.raises(ValueError):
        frcore.fr_identify(face(0.1), model, frcore.Gallery([], [], []))


def test_fr_accuracy_extremes():
    e = np.eye(2)
    model = Fixed({0.1: e[0], 0.2: e[1]})
    g = frcore.Gallery([face(0.1), face(0.2)], ["a", "b"], ["seen", "seen"])
    assert frcore.fr_accuracy([face(0.1), face(0.2)], ["a", "b"], model, g) == 100.0
    assert frcore.fr_accuracy([face(0.1), face(0.2)], ["b", "a"], model, g) == 0.0


def test_identical_probe_is_found(tiny, tiny_pool):
    g = frcore.gallery_from_manifest(tiny)
    for i in (0, 5, 11):
        assert frcore.fr_identify(g.faces[i], tiny_pool[0], g) == g.labels[i]


def test_checkpoint_roundtrip_and_corruption(tiny_pool, tmp_path):
    m = tiny_pool[1]
    path = tmp_path / "m.p3fm"
    frcore.save_model(m, path)
    back = frcore.load_model(path)
    assert back.model_id == m.model_id and back.arch == m.arch
    assert all(np.array_equal(p, q) for p, q in zip(back.params, m.params))
    buf = bytearray(path.read_bytes())
    buf[20] ^= 1
    path.write_bytes(bytes(buf))
    with pytest.raises(frcore.CheckpointError, match="CRC"):
        frcore.load_model(path)
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(frcore.CheckpointError, match="magic"):
        frcore.load_model(path)
