import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanlab import calibrations as cb
from scanlab import intervals as iv
from scanlab import local_stats as ls
from scanlab import null_models as nm
from scanlab import numerics


def normal_isf_oracle(level):
    mpmath.mp.dps = 40
    return float(-mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(level) - 1))


@pytest.fixture(scope="module")
def small():
    stat = ls.GaussKnown()
    src = cb.make_source("approx", 200)
    rec = cb.simulate_null_maxima(stat, src, nm.Gaussian(), 400, seed=3)
    return stat, src, rec


def tables_for(stat, src, rec, alpha=0.1):
    return {v: cb.build_crit_table(cb.Calibration(v, src.name, alpha, rec.n_sims, 3), rec, stat, src) for v in cb.CALIBRATIONS}


# ---- penalties


def test_penalty_examples():
    assert cb.penalty_ds(10**4, 1) == pytest.approx(math.sqrt(2 * (1 + 4 * math.log(10))), abs=1e-12)
    assert cb.penalty_ds(10**4, 1) == pytest.approx(4.5189, abs=1e-4)
    assert cb.penalty_sac(10**4, 100) == pytest.approx(4.2550, abs=1e-4)
    for n in (10, 1000, 10**6):
        assert cb.penalty_sac(n, 1) == pytest.approx(cb.penalty_ds(n, 1), abs=1e-15)


def test_penalties_vectorised_and_monotone():
    w = np.arange(1, 2501)
    ds = cb.penalty_ds(10**4, w)
    assert np.all(np.diff(ds) < 0)
    assert np.all(cb.penalty_sac(10**4, w) >= ds)


def test_harmonic():
    assert cb.harmonic(1) == 1.0
    assert cb.harmonic(2) == 1.5
    assert cb.harmonic(8) == pytest.approx(sum(1 / i for i in range(1, 9)))


# ---- simulation


def test_simulation_shape(small):
    stat, src, rec = small
    assert rec.global_max.shape == (400,)
    assert rec.block_max.shape == (400, src.n_blocks)
    assert np.allclose(rec.block_max.max(axis=1), rec.global_max)
    assert np.all(rec.ds_max <= rec.global_max) and np.all(rec.sac_max <= rec.ds_max + 1e-12)


def test_simulation_matches_brute_force_maxima():
    stat = ls.GaussKnown()
    src = cb.make_source("full", 60)
    rec = cb.simulate_null_maxima(stat, src, nm.Gaussian(), 5, seed=9)
    for r in range(5):
        y = nm.Gaussian().sample(60, nm.RngStream(9, r))
        T = np.array([ls.t_gauss_known(numerics.build_prefix(y), I) for I in iv.enumerate_full(60, 15)])
        w = np.array([I.length for I in iv.enumerate_full(60, 15)])
        assert rec.global_max[r] == pytest.approx(T.max(), abs=1e-12)
        assert rec.ds_max[r] == pytest.approx(np.max(T - cb.penalty_ds(60, w)), abs=1e-12)
        assert rec.sac_max[r] == pytest.approx(np.max(T - cb.penalty_sac(60, w)), abs=1e-12)


def test_zero_model_records():
    src = cb.make_source("approx", 128)
    rec = cb.simulate_null_maxima(ls.GaussKnown(), src, nm.Zero(), 7, seed=0)
    assert np.all(rec.global_max == 0.0) and np.all(rec.block_max == 0.0)
    # penalised maxima sit at minus the smallest penalty, attained at the longest grid length
    longest = src.grid()[0].max()
    assert np.allclose(rec.ds_max, -cb.penalty_ds(128, longest))
    assert np.allclose(rec.sac_max, -cb.penalty_sac(128, longest))


def test_simulation_worker_independent():
    stat = ls.GaussKnown()
    src = cb.make_source("approx", 150)
    a = cb.simulate_null_maxima(stat, src, nm.Gaussian(), 60, seed=5, workers=1, chunk=7)
    b = cb.simulate_null_maxima(stat, src, nm.Gaussian(), 60, seed=5, workers=2, chunk=13)
    assert np.array_equal(a.global_max, b.global_max) and np.array_equal(a.block_max, b.block_max)


def test_simulation_rejects_unsimulable():
    with pytest.raises(ValueError):
        cb.simulate_null_maxima(ls.SelfNormalized(), cb.make_source("approx", 100), nm.Gaussian(), 5, 0)


# ---- tables


def test_order_statistic_rule(small):
    stat, src, rec = small
    tab = cb.build_crit_table(cb.Calibration("scan", "approx", 1e-6, 400, 3), rec, stat, src)
    assert tab.thresholds([1])[0] == rec.global_max.max()
    tab = cb.build_crit_table(cb.Calibration("scan", "approx", 0.1, 400, 3), rec, stat, src)
    assert tab.thresholds([1])[0] == np.sort(rec.global_max)[math.ceil(0.9 * 400) - 1]


def test_ds_effective_threshold_decreasing(small):
    stat, src, rec = small
    tabs = tables_for(stat, src, rec)
    L = np.arange(1, src.max_window + 1)
    assert np.all(np.diff(tabs["ds"].thresholds(L)) < 0)
    for t in tabs.values():
        c = t.thresholds(L, stat, src)
        assert np.all(np.isfinite(c)) and np.all(c > 0)


def test_metadata_mismatch(small):
    stat, src, rec = small
    with pytest.raises(ValueError):
        cb.build_crit_table(cb.Calibration("scan"), rec, stat, cb.make_source("approx", 300))
    with pytest.raises(ValueError):
        cb.build_crit_table(cb.Calibration("scan"), rec, ls.GaussBaseline(), src)
    with pytest.raises(ValueError):
        cb.build_crit_table(cb.Calibration("scan"), None, stat, src)


def test_json_roundtrip(small, tmp_path):
    stat, src, rec = small
    for v, t in tables_for(stat, src, rec).items():
        d = json.loads(t.to_json())
        assert d["schema_version"] == 1 and d["calibration"] == v
        for key in ("n", "model", "alpha", "n_sims", "seed", "max_window", "source", "entries"):
            assert key in d
        back = cb.CritTable.load(t.save(tmp_path / f"{v}.json"))
        assert back.to_dict() == t.to_dict() and back.hash == t.hash
    bad = json.loads(t.to_json())
    bad["schema_version"] = 99
    with pytest.raises(ValueError):
        cb.CritTable.from_dict(bad)


# ---- blocked calibration


def crafted_records():
    r = np.arange(1, 11, dtype=float)
    return np.column_stack([r, 11 - r])


def brute_alpha_tilde(block_max, alpha):
    M = block_max.shape[0]
    cols = np.sort(block_max, axis=0)
    best = None
    for i in range(1, 1001):
        a = i / 1000
        thr = np.array([cols[math.ceil((1 - a / (b + 1)) * M - 1e-9) - 1, b] for b in range(block_max.shape[1])])
        lev = np.mean(np.any(block_max > thr, axis=1))
        if lev <= alpha:
            best = (a, lev)
    return best


def test_blocked_crafted_example():
    bc = cb.calibrate_blocked_alpha(crafted_records(), 0.2)
    assert bc.feasible
    assert bc.alpha_tilde == pytest.approx(0.199)
    assert bc.achieved == pytest.approx(0.1)
    assert (bc.alpha_tilde, bc.achieved) == pytest.approx(brute_alpha_tilde(crafted_records(), 0.2))


def test_blocked_single_block():
    x = np.random.default_rng(0).normal(size=(500, 1))
    bc = cb.calibrate_blocked_alpha(x, 0.1)
    assert bc.alpha_tilde == 0.1


def test_blocked_matches_grid_brute_force(rng):
    x = rng.normal(size=(300, 3)) + np.array([0.0, 0.3, 0.6])
    bc = cb.calibrate_blocked_alpha(x, 0.1)
    assert (bc.alpha_tilde, bc.achieved) == pytest.approx(brute_alpha_tilde(x, 0.1))


def test_blocked_infeasible_warns():
    x = np.random.default_rng(1).normal(size=(20_000, 2))
    with pytest.warns(UserWarning):
        bc = cb.calibrate_blocked_alpha(x, 1e-5)
    assert not bc.feasible and bc.alpha_tilde == 0.001


def test_blocked_level_monotone_in_alpha_tilde(rng):
    x = rng.normal(size=(400, 4))
    cols = np.sort(x, axis=0)
    levels = [cb.achieved_level(x, cb._block_thresholds(cols, a)) for a in np.linspace(0.001, 1, 200)]
    assert np.all(np.diff(levels) >= 0)


# ---- Bonferroni


def test_bonferroni_single_block():
    assert cb.bonferroni_threshold(1, 1, 1, 0.1, ls.GaussKnown()) == pytest.approx(1.28155, abs=1e-5)
    with pytest.raises(ValueError):
        cb.bonferroni_threshold(1, 10**300, 1, 1e-30, ls.GaussKnown())


def test_bonferroni_n64():
    src = cb.make_source("approx", 64)
    assert src.block_sizes().tolist() == [250, 29] and src.n_blocks == 2
    tab = cb.bonferroni_table(cb.Calibration("bonferroni"), ls.GaussKnown(), src)
    thr = [e["threshold"] for e in tab.entries]
    assert [e["level"] for e in tab.entries] == pytest.approx([0.1 / 375, 0.1 / 87], rel=1e-15)
    assert thr == pytest.approx([normal_isf_oracle(0.1 / 375), normal_isf_oracle(0.1 / 87)], abs=1e-10)
    assert thr == pytest.approx([3.463431, 3.048634], abs=1e-6)


@pytest.mark.parametrize("n", [64, 1000, 10**4])
def test_bonferroni_union_bound_identity(n):
    src = cb.make_source("approx", n)
    sizes = src.block_sizes()
    tot = math.fsum(s * cb.bonferroni_level(B, s, src.n_blocks, 0.1) for B, s in enumerate(sizes, start=1))
    assert tot == pytest.approx(0.1, rel=1e-12)
    assert tot <= 0.1 * (1 + 1e-12)


@pytest.mark.parametrize("n", [100, 1000, 10**4, 10**5])
def test_bonferroni_chain_inequality(n):
    src = cb.make_source("approx", n)
    part = iv.blocks(n)
    tab = cb.bonferroni_table(cb.Calibration("bonferroni"), ls.GaussKnown(), src)
    for e in tab.entries:
        w_B = 2 ** (e["block"] - 1 + part.s_n)
        rhs = math.sqrt(
            2 * math.log(n / w_B)
            + 2 * math.log(12 * math.log(math.e * n) ** 3 * (math.log(math.log(n)) + 1.5) / 0.1)
        )
        assert e["threshold"] <= rhs


def test_bonferroni_length_dependent_thresholds():
    src = cb.make_source("approx", 300)
    s = ls.WilcoxonRank()
    tab = cb.bonferroni_table(cb.Calibration("bonferroni"), s, src)
    L, _ = src.grid()
    c = tab.thresholds(L, s, src)
    blk = np.asarray(src.block_of_length(L))
    for w, b, cw in zip(L, blk, c):
        level = tab.entries[b - 1]["level"]
        assert ls.wilcoxon_tail_bound(cw, w, 300) == pytest.approx(level, rel=1e-9)


def test_bonferroni_level_control_small_n():
    stat = ls.GaussKnown()
    src = cb.make_source("approx", 200)
    tab = cb.bonferroni_table(cb.Calibration("bonferroni"), stat, src)
    R = 2000
    rej = sum(cb.run_test(nm.Gaussian().sample(200, nm.RngStream(41, r)), stat, tab, src).reject for r in range(R))
    assert rej / R <= 0.1 + 3 * math.sqrt(0.09 / R)


# ---- rejection engine


def test_zero_data_no_rejection(small):
    stat, src, rec = small
    for t in tables_for(stat, src, rec).values():
        d = cb.run_test(np.zeros(200), stat, t, src)
        assert not d.reject and d.n_exceeding == 0


def test_spike_is_found(small):
    stat = ls.GaussKnown()
    src = cb.make_source("approx", 1000)
    rec = cb.simulate_null_maxima(stat, src, nm.Gaussian(), 200, seed=1)
    y = nm.Gaussian().sample(1000, nm.RngStream(2))
    y[321] = 10.0
    for v in cb.CALIBRATIONS:
        t = cb.build_crit_table(cb.Calibration(v, "approx", 0.1, 200, 1), rec, stat, src)
        d = cb.run_test(y, stat, t, src)
        assert d.reject and d.n_exceeding > 0
        assert d.argmax == (321, 322)
        assert d.argmax_stat > d.argmax_threshold


def test_run_test_input_checks(small):
    stat, src, rec = small
    t = tables_for(stat, src, rec)["scan"]
    with pytest.raises(ValueError):
        cb.run_test(np.zeros(199), stat, t, src)
    with pytest.raises(ValueError):
        cb.run_test(np.zeros(200), ls.GaussBaseline(), t, src)


def test_decision_list_matches_flag(small, rng):
    stat, src, rec = small
    for t in tables_for(stat, src, rec).values():
        for _ in range(10):
            d = cb.run_test(rng.normal(size=200) + 0.2, stat, t, src)
            assert d.reject == (d.n_exceeding > 0)
            assert np.all(d.exceed_stat > d.exceed_threshold)
            assert len(d.to_dict(limit=3)["exceeding"]) == min(3, d.n_exceeding)


@settings(max_examples=25)
@given(seed=st.integers(0, 2**31), idx=st.integers(0, 199), bump=st.floats(0.0, 3.0))
def test_rejection_monotone(small, seed, idx, bump):
    stat, src, rec = small
    tabs = tables_for(stat, src, rec)
    y = np.random.default_rng(seed).normal(size=200) + 0.25
    z = y.copy()
    z[idx] += bump
    for t in tabs.values():
        if cb.run_test(y, stat, t, src).reject:
            assert cb.run_test(z, stat, t, src).reject


@given(seed=st.integers(0, 2**31))
@settings(max_examples=20)
def test_approx_maximum_below_full(seed):
    n = 150
    y = np.random.default_rng(seed).normal(size=n)
    stat = ls.GaussKnown()
    out = []
    for kind in ("approx", "full"):
        src = cb.make_source(kind, n)
        L, d = src.grid()
        out.append(cb.per_length_max(stat, stat.prepare(y), L, d).max())
    assert out[0] <= out[1] + 1e-12


# ---- cache


def test_get_tables_cache_and_force(tmp_path, monkeypatch):
    stat = ls.GaussKnown()
    src = cb.make_source("approx", 128)
    kw = dict(alpha=0.1, n_sims=50, seed=4, cache_dir=tmp_path)
    first = cb.get_tables(cb.CALIBRATIONS, stat, nm.Gaussian(), src, **kw)
    assert len(list(tmp_path.glob("*.json"))) == 5

    def boom(*a, **k):
        raise AssertionError("should have used the cache")

    monkeypatch.setattr(cb, "simulate_null_maxima", boom)
    again = cb.get_tables(cb.CALIBRATIONS, stat, nm.Gaussian(), src, **kw)
    assert all(again[v].to_dict() == first[v].to_dict() for v in first)
    with pytest.raises(AssertionError):
        cb.get_tables(["scan"], stat, nm.Gaussian(), src, force=True, **kw)
    monkeypatch.undo()
    other = cb.get_tables(["scan"], stat, nm.Gaussian(), src, **{**kw, "seed": 5})
    assert other["scan"].hash != first["scan"].hash
    with pytest.raises(ValueError):
        cb.get_tables(["scan"], stat, nm.Gaussian(), src, alpha=0.1, n_sims=0, seed=4)
    assert cb.get_tables(["bonferroni"], stat, nm.Gaussian(), src, n_sims=0)["bonferroni"].entries


def test_critical_value_curve(small):
    stat, src, rec = small
    curves = cb.critical_value_curve(tables_for(stat, src, rec), [1, 2, 10], stat)
    assert set(curves) == set(cb.CALIBRATIONS)
    assert all(len(v) == 3 for v in curves.values())
