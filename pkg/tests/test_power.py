import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scanlab import calibrations as cb
from scanlab import local_stats as ls
from scanlab import null_models as nm
from scanlab import power as pw


@given(st.integers(1, 10_000), st.floats(0.5, 50.0))
def test_bisection_stub(length, c):
    res = pw.min_mu(lambda mu: math.sqrt(length) * mu >= c)
    target = c / math.sqrt(length)
    assert res.lo <= target <= res.hi
    assert res.hi - res.lo <= 1e-3 * max(1.0, 2 * res.hi)
    assert abs(res.mu - target) <= res.hi - res.lo
    assert res.monotone_ok


def test_bisection_always_rejects():
    assert pw.min_mu(lambda mu: True).mu == 0.0


def test_bisection_bracket_cap():
    with pytest.raises(pw.BracketError):
        pw.min_mu(lambda mu: False)


def test_bisection_flags_non_monotone():
    res = pw.min_mu(lambda mu: 1.0 <= mu < 1.5)
    assert not res.monotone_ok


def test_exponent_examples():
    assert pw.realized_exponent_value(10**4, 1, math.sqrt(2 * math.log(math.e * 10**4))) == pytest.approx(1.0, rel=1e-14)
    for n, L in [(10**4, 1), (10**4, 100), (10**6, 10**5)]:
        mu = math.sqrt(2 * math.log(math.e * n / L) / L)
        assert pw.realized_exponent_value(n, L, mu) == pytest.approx(1.0, rel=1e-14)
        assert pw.realized_exponent_value(n, L, 0.0) == 0.0
        mu = 1.7
        assert math.sqrt(L) * mu == pytest.approx(math.sqrt(2 * pw.realized_exponent_value(n, L, mu) * math.log(math.e * n / L)))


@pytest.fixture(scope="module")
def setup100():
    stat = ls.GaussKnown()
    src = cb.make_source("full", 100)
    tables = cb.get_tables(cb.CALIBRATIONS, stat, nm.Gaussian(), src, n_sims=300, seed=8)
    return stat, src, tables


def closed_form_mu(y, planted, c_of_len, max_len):
    """min over intervals I with |I & planted| > 0 of (c(|I|) sqrt|I| - S_I) / |I & planted|."""
    n = y.size
    a, b = planted
    best = math.inf
    for w in range(1, max_len + 1):
        for j in range(0, n - w + 1):
            ov = min(j + w, b) - max(j, a)
            if ov > 0:
                best = min(best, (c_of_len(w) * math.sqrt(w) - y[j : j + w].sum()) / ov)
    return max(best, 0.0)


@pytest.mark.parametrize("length", [1, 4])
def test_gauss_known_closed_form(setup100, length):
    stat, src, tables = setup100
    grid_thr, len_index = pw._grid_thresholds(tables, stat, src)
    for r in range(15):
        stream = pw.replicate_stream(12, r, length)
        y = nm.Gaussian().sample(100, stream)
        I = tuple(nm.random_signal_placement(100, length, stream))
        prob = pw.ReplicateProblem(stat, nm.Gaussian(), src, grid_thr, len_index, y, I, stream)
        for cal, tab in tables.items():
            if prob.null_reject[cal]:
                continue
            c = lambda w, tab=tab: float(tab.thresholds([w], stat, src)[0])  # noqa: E731
            want = closed_form_mu(y, I, c, src.max_window)
            assert prob.exact_linear(cal) == pytest.approx(want, abs=1e-9)
            res = pw.min_mu(lambda mu, cal=cal: prob.rejects(cal, mu))
            assert res.lo <= want + 1e-12 and want <= res.hi + 1e-12


def test_scan_singleton_equals_threshold_minus_noise(setup100):
    # Scan, |I_n| = 1: when the planted index gives the argmax, mu* = c - Z_j
    stat, src, tables = setup100
    c = float(tables["scan"].thresholds([1])[0])
    grid_thr, len_index = pw._grid_thresholds({"scan": tables["scan"]}, stat, src)
    hits = 0
    for r in range(40):
        stream = pw.replicate_stream(3, r, 1)
        y = nm.Gaussian().sample(100, stream)
        I = tuple(nm.random_signal_placement(100, 1, stream))
        prob = pw.ReplicateProblem(stat, nm.Gaussian(), src, grid_thr, len_index, y, I, stream)
        if prob.null_reject["scan"]:
            continue
        mu = prob.exact_linear("scan")
        if math.isclose(mu, c - y[I[0]], abs_tol=1e-12):
            hits += 1
        assert mu <= c - y[I[0]] + 1e-12
    assert hits > 20


def rejects_via_engine(stat, model, tab, src, y, I, stream):
    at = model.injector(y, I, stream)
    return lambda mu: cb.run_test(at(mu), stat, tab, src).reject


@pytest.mark.parametrize("kind", ["gaussian", "poisson"])
def test_study_matches_engine_bisection(kind):
    if kind == "gaussian":
        stat, model = ls.GaussBaseline(), nm.Gaussian()
    else:
        stat, model = ls.SignedRootLR("poisson"), nm.Poisson(1.0)
    src = cb.make_source("approx", 128)
    tables = cb.get_tables(["scan", "ds", "bonferroni"], stat, model, src, n_sims=200, seed=2)
    res = pw.run_power_study(stat, model, src, tables, [3], replicates=6, seed=19)
    for out in res:
        for r in range(6):
            stream = pw.replicate_stream(19, r, 3)
            y = model.sample(128, stream)
            I = tuple(nm.random_signal_placement(128, 3, stream))
            b = pw.min_mu(rejects_via_engine(stat, model, tables[out.calibration], src, y, I, stream))
            assert out.per_replicate[r] * model.noise_scale() == pytest.approx(b.mu, abs=1e-12)


def test_study_result_fields(setup100):
    stat, src, tables = setup100
    res = pw.run_power_study(stat, nm.Gaussian(), src, tables, [1, 5], replicates=20, seed=4)
    assert len(res) == 10
    for r in res:
        assert r.e_n >= 0 and r.replicates == 20 and r.n == 100
        col = np.sort(r.per_replicate)
        assert r.mu_min == col[math.ceil(0.8 * 20) - 1]
        assert r.e_n == pytest.approx(pw.realized_exponent_value(100, r.signal_length, r.mu_min))
    with pytest.raises(ValueError):
        pw.run_power_study(stat, nm.Gaussian(), src, tables, [26], replicates=5, seed=4)
    with pytest.raises(ValueError):
        pw.run_power_study(stat, nm.Gaussian(), src, tables, [1], replicates=0, seed=4)


def test_study_worker_independent(setup100):
    stat, src, tables = setup100
    a = pw.run_power_study(stat, nm.Gaussian(), src, tables, [2], replicates=30, seed=4, workers=1, chunk=7)
    b = pw.run_power_study(stat, nm.Gaussian(), src, tables, [2], replicates=30, seed=4, workers=2, chunk=11)
    assert all(np.array_equal(x.per_replicate, y.per_replicate) for x, y in zip(a, b))


def test_partial_results_on_failure(setup100, monkeypatch):
    stat, src, tables = setup100
    real = pw._run_range

    def flaky(stat, model, source, tables, length, *a):
        if length == 5:
            raise RuntimeError("boom")
        return real(stat, model, source, tables, length, *a)

    monkeypatch.setattr(pw, "_run_range", flaky)
    with pytest.raises(pw.PowerStudyError) as err:
        pw.run_power_study(stat, nm.Gaussian(), src, tables, [1, 5], replicates=5, seed=1)
    assert {r.signal_length for r in err.value.partial} == {1}


@pytest.mark.parametrize("sigma", [0.25, 3.0])
def test_sigma_scaling_invariance(sigma):
    src = cb.make_source("approx", 128)
    s1, s2 = ls.GaussKnown(1.0), ls.GaussKnown(sigma)
    t1 = cb.get_tables(["scan", "bonferroni"], s1, nm.Gaussian(1.0), src, n_sims=200, seed=6)
    t2 = cb.get_tables(["scan", "bonferroni"], s2, nm.Gaussian(sigma), src, n_sims=200, seed=6)
    for v in t1:
        assert t1[v].thresholds([1, 7]) == pytest.approx(t2[v].thresholds([1, 7]), rel=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(30):
        y = rng.normal(size=128) + 0.4
        for v in t1:
            assert cb.run_test(y, s1, t1[v], src).reject == cb.run_test(sigma * y, s2, t2[v], src).reject
    r1 = pw.run_power_study(s1, nm.Gaussian(1.0), src, t1, [4], replicates=25, seed=9)
    r2 = pw.run_power_study(s2, nm.Gaussian(sigma), src, t2, [4], replicates=25, seed=9)
    for a, b in zip(r1, r2):
        assert b.e_n == pytest.approx(a.e_n, rel=3e-3)


def test_emit_table_layout():
    def fake(cal, L, e, n=10**4, model="gaussian"):
        return pw.PowerResult(n, L, cal, model, 100, 1.0, e, 0)

    one = pw.emit_table([fake("scan", 1, 1.234)])
    assert one.splitlines() == ["calibration,1", "scan,1.23"]
    rows = [fake(c, L, 1.0) for c in cb.CALIBRATIONS for L in pw.LENGTHS_N1E4]
    out = list(csv.reader(io.StringIO(pw.emit_table(rows))))
    assert out[0] == ["calibration", "1", "5", "10", "15", "50", "100", "500", "1000"]
    assert [r[0] for r in out[1:]] == list(cb.CALIBRATIONS)
    rows2 = [fake("scan", L, 1.0, n=10**6) for L in pw.LENGTHS_N1E6]
    assert "100000" in pw.emit_table(rows2).splitlines()[0].split(",")
    with pytest.raises(ValueError):
        pw.emit_table([fake("scan", 1, 1.0), fake("scan", 5, 1.0, n=10)])
    with pytest.raises(ValueError):
        pw.emit_table([fake("scan", 1, 1.0), fake("ds", 1, 1.0, model="poisson")])
    with pytest.raises(ValueError):
        pw.emit_table([])


def test_power_csv_columns():
    r = pw.PowerResult(100, 5, "scan", "gaussian", 10, 1.5, 0.9, 3)
    lines = pw.power_csv([r]).splitlines()
    assert lines[0] == "calibration,signal_length,mu_min,e_n,replicates,seed"
    assert lines[1].startswith("scan,5,1.5")
