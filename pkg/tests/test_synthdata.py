import itertools

import numpy as np
import pytest

from idcloak import imaging, synthdata


def tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_split_counts():
    assert synthdata.split_counts(20) == {"probe": 2, "seen": 14, "unseen": 4}
    assert synthdata.split_counts(10) == {"probe": 1, "seen": 7, "unseen": 2}


def test_generation_is_byte_identical(tmp_path):
    a = synthdata.gen_dataset(tmp_path / "a", 8, 20, 32, seed=7)
    b = synthdata.gen_dataset(tmp_path / "b", 8, 20, 32, seed=7)
    assert tree(a.root) == tree(b.root)
    counts = {}
    for r in a.records:
        counts[(r.identity, r.role)] = counts.get((r.identity, r.role), 0) + 1
    for ident in a.identities:
        assert [counts[(ident, role)] for role in ("probe", "seen", "unseen")] == [2, 14, 4]
    assert len({r.path for r in a.records}) == len(a.records)


def test_manifest_roundtrip(tiny):
    again = synthdata.Manifest.load(tiny.root)
    assert again.to_json() == tiny.to_json()
    assert again.select("id1", "probe")[0].identity == "id1"


def test_manifest_rejects_foreign_json(tmp_path):
    (tmp_path / "manifest.json").write_text('{"format": "other", "version": 1}')
    with pytest.raises(ValueError, match="not a dataset manifest"):
        synthdata.Manifest.load(tmp_path)


@pytest.mark.parametrize("kw", [dict(n_identities=3), dict(images_per_identity=9), dict(size=15)])
def test_preconditions(tmp_path, kw):
    with pytest.raises(ValueError):
        synthdata.gen_dataset(tmp_path, **kw)


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="not writable"):
        synthdata.gen_dataset(blocker / "sub")


def test_params_deterministic_and_sized():
    p = synthdata.identity_params(3, 2)
    assert p.shape == (synthdata.N_PARAMS,)
    assert np.array_equal(p, synthdata.identity_params(3, 2))


def test_base_patterns_differ_on_average():
    # mean over all identity pairs of the mean per-pixel |difference|, per seed
    means = []
    for seed in range(100):
        bases = [synthdata.render(synthdata.identity_params(seed, i), 32) for i in range(8)]
        means.append(np.mean([np.abs(a - b).mean() for a, b in itertools.combinations(bases, 2)]))
    assert min(means) > 0.05


def test_intra_identity_closer_than_inter(tiny):
    imgs = {i: [tiny.image(r) for r in tiny.select(i)] for i in tiny.identities}
    intra, inter = [], []
    for i, j in itertools.combinations_with_replacement(tiny.identities, 2):
        for a, b in itertools.product(imgs[i], imgs[j]):
            if a is not b:
                (intra if i == j else inter).append(np.linalg.norm(a - b))
    assert np.mean(intra) < np.mean(inter)


def test_images_are_8bit_and_valid(tiny):
    x = tiny.image(tiny.records[0])
    imaging.validate(x)
    assert np.array_equal(imaging.quantize(x), x)
