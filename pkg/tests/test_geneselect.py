import numpy as np
import pytest
from scipy import special as spsp
from scipy import stats as sps

from histodistill.errors import ConfigError
from histodistill.geneselect import (CategorySelection, GeneSelection,
                                     RiskGroups, bh_adjust, betainc_reg,
                                     differential_select, split_risk_groups,
                                     student_t_two_sided_p, welch_t,
                                     write_selection_report)


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

def test_betainc_against_scipy_grid():
    for a in (0.5, 1.0, 2.5, 10.0, 40.0):
        for b in (0.5, 1.0, 3.0, 25.0):
            for x in (0.0, 0.01, 0.2, 0.5, 0.8, 0.99, 1.0):
                np.testing.assert_allclose(
                    betainc_reg(a, b, x), spsp.betainc(a, b, x),
                    atol=1e-12, err_msg=f"a={a} b={b} x={x}")


def test_betainc_symmetry():
    assert betainc_reg(2.0, 3.0, 0.4) == pytest.approx(
        1.0 - betainc_reg(3.0, 2.0, 0.6), abs=1e-13)


def test_t_tail_against_scipy():
    for t in (-6.0, -1.3, 0.0, 0.7, 2.1, 9.0):
        for df in (1.0, 2.5, 10.0, 100.0):
            np.testing.assert_allclose(
                student_t_two_sided_p(t, df),
                2.0 * sps.t.sf(abs(t), df),
                atol=1e-12, err_msg=f"t={t} df={df}")


# ---------------------------------------------------------------------------
# Welch's test
# ---------------------------------------------------------------------------

def test_welch_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(40):
        x = rng.normal(0.0, 1.0, size=int(rng.integers(2, 30)))
        y = rng.normal(0.4, 1.7, size=int(rng.integers(2, 30)))
        t, p = welch_t(x, y)
        ref = sps.ttest_ind(x, y, equal_var=False)
        np.testing.assert_allclose(t, ref.statistic, atol=1e-10)
        np.testing.assert_allclose(p, ref.pvalue, atol=1e-10)


def test_welch_both_constant_is_null():
    assert welch_t([3.0, 3.0, 3.0], [3.0, 3.0]) == (0.0, 1.0)


def test_welch_one_constant_sample():
    t, p = welch_t([5.0, 5.0, 5.0], [1.0, 2.0, 3.0])
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ref = sps.ttest_ind([5.0, 5.0, 5.0], [1.0, 2.0, 3.0], equal_var=False)
    np.testing.assert_allclose(t, ref.statistic, atol=1e-10)
    np.testing.assert_allclose(p, ref.pvalue, atol=1e-10)


def test_welch_rejects_tiny_samples():
    with pytest.raises(ConfigError):
        welch_t([1.0], [2.0, 3.0])


# ---------------------------------------------------------------------------
# Benjamini-Hochberg
# ---------------------------------------------------------------------------

def test_bh_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = rng.uniform(size=int(rng.integers(1, 60)))
        np.testing.assert_allclose(bh_adjust(p),
                                   sps.false_discovery_control(p, method="bh"),
                                   atol=1e-12)


def test_bh_hand_example():
    np.testing.assert_allclose(bh_adjust([0.01, 0.04, 0.03, 0.005]),
                               [0.02, 0.04, 0.04, 0.02], atol=1e-12)


def test_bh_preserves_order_and_bounds():
    rng = np.random.default_rng(2)
    p = rng.uniform(size=50)
    adj = bh_adjust(p)
    assert (adj >= p - 1e-15).all()
    assert (adj <= 1.0).all()
    order = np.argsort(p)
    assert (np.diff(adj[order]) >= -1e-15).all()


def test_bh_empty_and_bad_input():
    assert bh_adjust([]).size == 0
    with pytest.raises(ConfigError):
        bh_adjust([0.5, 1.5])
    with pytest.raises(ConfigError):
        bh_adjust([0.5, np.nan])


# ---------------------------------------------------------------------------
# risk-group split
# ---------------------------------------------------------------------------

def test_split_risk_groups_hand_case():
    times = np.array([1.0, 2.0, 3.0, 4.0])
    censor = np.array([0, 1, 0, 0])
    groups = split_risk_groups(times, censor)
    assert groups.midpoint_time == 2.5
    np.testing.assert_array_equal(groups.high_risk, [0])
    np.testing.assert_array_equal(groups.low_risk, [2, 3])


def test_split_risk_groups_excludes_early_censored():
    times = np.array([1.0, 1.0, 10.0, 10.0])
    censor = np.array([1, 1, 0, 0])
    groups = split_risk_groups(times, censor)
    assert groups.high_risk.size == 0
    np.testing.assert_array_equal(groups.low_risk, [2, 3])


def test_split_risk_groups_needs_two_patients():
    with pytest.raises(ConfigError):
        split_risk_groups(np.array([1.0]), np.array([0]))


# ---------------------------------------------------------------------------
# differential selection
# ---------------------------------------------------------------------------

def planted_expression(rng, n_high, n_low, driven, flat):
    """One category matrix: `driven` genes shifted between groups, `flat`
    genes pure noise. Columns are high-risk patients then low-risk."""
    shifted = np.concatenate([
        rng.normal(6.0, 0.3, size=(driven, n_high)),
        rng.normal(1.0, 0.3, size=(driven, n_low)),
    ], axis=1)
    noise = rng.normal(3.0, 0.3, size=(flat, n_high + n_low))
    return np.abs(np.concatenate([shifted, noise], axis=0))


def test_differential_select_recovers_planted_genes():
    rng = np.random.default_rng(3)
    n_high, n_low = 20, 20
    groups = RiskGroups(np.arange(n_high), np.arange(n_high, n_high + n_low),
                        10.0)
    expr = [planted_expression(rng, n_high, n_low, driven=3, flat=9),
            planted_expression(rng, n_high, n_low, driven=2, flat=6)]
    sel = differential_select(expr, groups, alpha=0.05)
    assert not sel.skipped
    np.testing.assert_array_equal(sel.categories[0].retained, [0, 1, 2])
    np.testing.assert_array_equal(sel.categories[1].retained, [0, 1])
    assert sel.retained_sizes() == (3, 2)


def test_differential_select_adjusts_jointly():
    rng = np.random.default_rng(4)
    groups = RiskGroups(np.arange(10), np.arange(10, 20), 5.0)
    expr = [planted_expression(rng, 10, 10, driven=2, flat=3),
            planted_expression(rng, 10, 10, driven=1, flat=4)]
    sel = differential_select(expr, groups)
    raw = np.concatenate([c.p_raw for c in sel.categories])
    joint = sps.false_discovery_control(raw, method="bh")
    got = np.concatenate([c.p_adj for c in sel.categories])
    np.testing.assert_allclose(got, joint, atol=1e-12)


def test_differential_select_drops_constant_genes():
    rng = np.random.default_rng(5)
    groups = RiskGroups(np.arange(12), np.arange(12, 24), 5.0)
    matrix = planted_expression(rng, 12, 12, driven=2, flat=2)
    matrix[2:] = 1.0     # flat genes literally constant, p becomes 1
    sel = differential_select([matrix], groups)
    np.testing.assert_array_equal(sel.categories[0].retained, [0, 1])
    np.testing.assert_array_equal(sel.categories[0].p_raw[2:], [1.0, 1.0])


def test_differential_select_floor_keeps_best_genes():
    rng = np.random.default_rng(6)
    groups = RiskGroups(np.arange(8), np.arange(8, 16), 5.0)
    matrix = np.abs(rng.normal(3.0, 0.3, size=(5, 16)))   # no real signal
    sel = differential_select([matrix], groups, alpha=1e-9,
                              min_per_category=2)
    cat = sel.categories[0]
    assert cat.retained.size == 2
    best = np.sort(np.argsort(cat.p_raw, kind="stable")[:2])
    np.testing.assert_array_equal(cat.retained, best)
    assert (np.diff(cat.retained) > 0).all()


def test_differential_select_degenerate_split_retains_all():
    groups = RiskGroups(np.array([0]), np.arange(1, 6), 2.0)
    expr = [np.abs(np.random.default_rng(7).normal(size=(4, 6)))]
    with pytest.warns(UserWarning):
        sel = differential_select(expr, groups)
    assert sel.skipped
    np.testing.assert_array_equal(sel.categories[0].retained, np.arange(4))


def test_differential_select_rejects_bad_alpha():
    groups = RiskGroups(np.arange(3), np.arange(3, 6), 1.0)
    with pytest.raises(ConfigError):
        differential_select([np.ones((2, 6))], groups, alpha=0.0)


def test_selection_report_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    groups = RiskGroups(np.arange(6), np.arange(6, 12), 3.0)
    expr = [planted_expression(rng, 6, 6, driven=1, flat=2)]
    sel = differential_select(expr, groups)
    path = tmp_path / "selection.tsv"
    write_selection_report(path, sel, [["g0", "g1", "g2"]], ["cat"])
    lines = path.read_text().strip().splitlines()
    assert lines[0].split("\t") == ["gene_id", "category", "t", "p",
                                    "p_adj", "retained"]
    assert len(lines) == 4
    rows = [ln.split("\t") for ln in lines[1:]]
    flags = {row[0]: row[5] for row in rows}
    kept = set(sel.categories[0].retained.tolist())
    for g, gene in enumerate(["g0", "g1", "g2"]):
        assert flags[gene] == ("1" if g in kept else "0")
    # stored p-values parse back exactly
    np.testing.assert_array_equal(
        [float(row[3]) for row in rows], sel.categories[0].p_raw)


def test_selection_report_mismatched_ids(tmp_path):
    sel = GeneSelection(
        (CategorySelection(np.arange(1), np.zeros(1), np.ones(1),
                           np.ones(1)),),
        1.0)
    with pytest.raises(ConfigError):
        write_selection_report(tmp_path / "x.tsv", sel, [["a"], ["b"]], ["c"])
