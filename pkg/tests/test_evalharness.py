from fractions import Fraction

import numpy as np
import pytest

from idcloak import evalharness as ev
from idcloak import maskgen, protect


@pytest.fixture(scope="module")
def masks(tiny, tiny_pool):
    team = [tiny_pool[0].model_id, tiny_pool[1].model_id]
    cfg = maskgen.TrainConfig(epochs=3, eta=0.004, mask_size=16, team=team)
    return {i: maskgen.train_mask(tiny, i, cfg, tiny_pool) for i in ("id0", "id1")}


TEAM = ("conv3-0", "conv5-1")


def test_cell_psr_is_exact_complement():
    c = ev.Cell("s", "m", True, "*", 1, 3)
    assert c.accuracy == Fraction(100, 3)
    assert c.psr + c.accuracy == 100


def test_rounding_is_half_up_and_rows_sum_to_100():
    assert ev._fmt(Fraction(1, 8)) == "0.13"
    assert ev._fmt(Fraction(200, 3)) == "66.67"
    rep = ev.EvalReport("x", cells=[ev.Cell("x", "m", None, "*", h, 7) for h in range(8)])
    for row in ev._rows([rep]):
        acc, psr = Fraction(row[5]), Fraction(row[6])
        assert acc + psr == 100


def test_no_protection_baseline(tiny, tiny_pool):
    rep = ev.run_protection_eval(tiny, {}, tiny_pool)
    for m in tiny_pool:
        assert rep.psr(m.model_id) <= 12.5
    assert rep.ssim == {}
    assert all(c.known is None for c in rep.cells)


def test_protection_eval_cells(tiny, tiny_pool, masks):
    rep = ev.run_protection_eval(tiny, masks, tiny_pool, team=TEAM)
    agg = [c for c in rep.cells if c.identity == "*"]
    assert [c.model_id for c in agg] == [m.model_id for m in tiny_pool]
    assert [c.known for c in agg] == [True, True, False]
    assert all(c.total == 4 for c in agg)
    assert rep.ssim["n"] == 2 * 18 and 0 < rep.ssim["mean"] <= 1
    with pytest.raises(ValueError, match="no mask"):
        ev.run_protection_eval(tiny, masks, tiny_pool, protected=["id2"])
    with pytest.raises(ValueError, match="unknown identities"):
        ev.run_protection_eval(tiny, {"ghost": masks["id0"]}, tiny_pool)


def test_each_protectee_scored_against_clean_noise(tiny, tiny_pool, masks):
    rep = ev.run_protection_eval(tiny, masks, tiny_pool, team=TEAM)
    for ident in masks:
        alone = ev.run_protection_eval(tiny, masks, tiny_pool, team=TEAM, protected=[ident])
        for m in tiny_pool:
            assert rep.cell(m.model_id, identity=ident) == alone.cell(m.model_id, identity=ident)
    edit = lambda r, x: protect.mask_apply(x, masks[r.identity], r.crop)
    rounds = ev._rounds(tiny, ["id0", "id1"], edit)
    assert [sorted(set(labels)) for _, _, labels in rounds] == [["id0"], ["id1"]]
    (gallery, _, labels), = ev._rounds(tiny, ["id0", "id1"], edit, joint=True)
    assert sorted(set(labels)) == ["id0", "id1"]
    clean = ev._gallery(tiny, set(), lambda r, x: x)
    edited = {lab for lab, a, b in zip(clean.labels, clean.faces, gallery.faces)
              if not np.array_equal(a, b)}
    assert edited == {"id0", "id1"}
    joint = ev.run_protection_eval(tiny, masks, tiny_pool, team=TEAM, joint=True)
    assert joint.config["joint"] is True and rep.config["joint"] is False


def test_noise_identities_untouched(tiny, masks):
    g0 = ev._gallery(tiny, set(), lambda r, x: x)
    g1 = ev._gallery(tiny, set(masks), lambda r, x: protect.mask_apply(x, masks[r.identity], r.crop))
    for label, a, b in zip(g0.labels, g0.faces, g1.faces):
        assert np.array_equal(a, b) == (label not in masks)


def test_identity_filter_equals_protection_eval(tiny, tiny_pool, masks):
    plain = ev.run_protection_eval(tiny, masks, tiny_pool, team=TEAM)
    adapt = ev.run_adaptive_eval(tiny, masks, tiny_pool, ["identity"], team=TEAM)
    got = [(c.model_id, c.identity, c.hits, c.total) for c in adapt.cells if c.scenario == "identity"]
    want = [(c.model_id, c.identity, c.hits, c.total) for c in plain.cells]
    assert got == want
    assert set(adapt.notes["gate"]) == {"identity"}


def test_adaptive_gate_records(tiny, tiny_pool, masks):
    rep = ev.run_adaptive_eval(tiny, masks, tiny_pool, ["gaussian:0.5", ("median", 3)])
    assert set(rep.notes["gate"]) == {"gaussian:0.5", "median:3"}
    scen = {c.scenario for c in rep.cells}
    assert scen == {"clean+gaussian:0.5", "gaussian:0.5", "clean+median:3", "median:3"}


@pytest.mark.parametrize("spec", ["blur:1", "jpeg:0", "median:4", "gaussian:-1", "jpeg"])
def test_bad_filters(spec):
    with pytest.raises(ValueError):
        ev.parse_filter(spec)


def test_unmask_eval(tiny, tiny_pool, masks):
    rep = ev.run_unmask_eval(tiny, masks, tiny_pool, team=TEAM)
    for m in tiny_pool:
        assert rep.cell(m.model_id, "c-unmasked").hits == rep.cell(m.model_id, "a-clean").hits
    assert 0 <= rep.notes["saturation_rate"] < 0.1
    with pytest.raises(ValueError, match="need ≥ 2 masks"):
        ev.run_unmask_eval(tiny, {"id0": masks["id0"]}, tiny_pool)


def test_report_bytes_deterministic(tiny, tiny_pool, masks, tmp_path):
    reports = [ev.run_protection_eval(tiny, masks, tiny_pool, team=TEAM),
               ev.run_unmask_eval(tiny, masks, tiny_pool, team=TEAM)]
    again = [ev.run_protection_eval(tiny, masks, tiny_pool, team=TEAM),
             ev.run_unmask_eval(tiny, masks, tiny_pool, team=TEAM)]
    for fmt in ("table-text", "delimited-values"):
        a = ev.emit_report(reports, tmp_path / f"a.{fmt}", fmt).read_bytes()
        b = ev.emit_report(again, tmp_path / f"b.{fmt}", fmt).read_bytes()
        assert a == b
        assert b"# report protection config " in a
    rows = [ln.split("\t") for ln in ev.render_report(reports, "delimited-values").splitlines()
            if not ln.startswith("#")][1:]
    assert rows and all(Fraction(r[5]) + Fraction(r[6]) == 100 for r in rows)


def test_empty_report_is_header_only(tmp_path):
    text = ev.emit_report([], tmp_path / "e.tsv", "delimited-values").read_text()
    assert text == "\t".join(ev.COLUMNS) + "\n"
    with pytest.raises(ValueError):
        ev.render_report([], "xml")
    with pytest.raises(OSError):
        ev.emit_report([], tmp_path / "missing" / "e.tsv")


def test_per_image_baseline(tiny, tiny_pool):
    r = tiny.select("id2", "seen")[0]
    x = tiny.image(r)
    cfg = maskgen.TrainConfig(epochs=2, mask_size=16)
    team = tiny_pool[:1]
    assert np.array_equal(ev.per_image_baseline(x, "id2", team, cfg, steps=0), x)
    m = ev.per_image_mask(x, "id2", team, cfg, steps=5)
    assert 0 < np.abs(m.values).max() <= 0.063
    assert ev.baseline_steps(cfg, 14) == 8
    assert ev.baseline_steps(maskgen.TrainConfig(), 14) == 200


def test_config_hash_stable():
    assert ev.config_hash({"b": 1, "a": [1, 2]}) == ev.config_hash({"a": [1, 2], "b": 1})
    assert ev.config_hash({"a": 1}) != ev.config_hash({"a": 2})
