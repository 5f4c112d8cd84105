"""Weighted conformal calibration: exact threshold rule, schemes, formats."""

import json
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cduq.errors import FormatError
from cduq.mathcore import RngStream
from cduq.conformal import (
    CalibrationExample,
    CalibrationResult,
    WeightedScoreDistribution,
    calibrate,
    check_masses,
    decay_normalize,
    feature_weight,
    load_scores,
    membership,
    save_scores,
    uniform_weights,
    weighted_quantile,
)


def ref_threshold(scores, weights, q):
    """Independent rule: smallest score s with exact mass{x <= s} >= q."""
    best = math.inf
    for cand in scores:
        mass = sum((Fraction(w) for s, w in zip(scores, weights) if s <= cand),
                   Fraction(0))
        if mass >= q and cand < best:
            best = cand
    return best


def examples_from(scores, raw=None):
    return [
        CalibrationExample(episode_id=i, score=s,
                           raw_weight=None if raw is None else raw[i])
        for i, s in enumerate(scores)
    ]


def test_feature_weight_basics():
    assert feature_weight((1.0, 2.0), (1.0, 2.0), 1.0) == 1.0
    near = feature_weight((0.0, 0.0), (0.1, 0.0), 1.0)
    far = feature_weight((0.0, 0.0), (2.0, 0.0), 1.0)
    assert 0.0 < far < near < 1.0
    assert near == pytest.approx(math.exp(-0.01))
    # higher temperature flattens the kernel
    assert feature_weight((0.0,), (2.0,), 10.0) > feature_weight((0.0,), (2.0,), 1.0)
    # extreme distances clamp to the smallest positive double, not zero
    assert feature_weight((0.0,), (1e6,), 1.0) == 5e-324
    with pytest.raises(ValueError):
        feature_weight((1.0,), (1.0, 2.0), 1.0)
    with pytest.raises(ValueError):
        feature_weight((1.0,), (1.0,), 0.0)


def test_uniform_weights():
    w, t = uniform_weights(9)
    assert w == [0.1] * 9
    assert t == 0.1
    check_masses(w, t)
    with pytest.raises(ValueError):
        uniform_weights(0)


def test_decay_normalize_worked_example():
    weights, test_mass = decay_normalize([0.2, 0.9, 0.5], rho=0.5)
    assert weights[0] == pytest.approx(1.0 / 15.0)
    assert weights[1] == pytest.approx(4.0 / 15.0)
    assert weights[2] == pytest.approx(2.0 / 15.0)
    assert test_mass == pytest.approx(8.0 / 15.0)
    check_masses(weights, test_mass)


def test_decay_ties_break_toward_later_index():
    weights, _ = decay_normalize([0.4, 0.4, 0.4], rho=0.5)
    assert weights[0] < weights[1] < weights[2]


def test_decay_rho_one_is_uniform():
    weights, test_mass = decay_normalize([0.3, 0.9, 0.1, 0.5], rho=1.0)
    uw, ut = uniform_weights(4)
    assert weights == pytest.approx(uw)
    assert test_mass == pytest.approx(ut)


def test_decay_validation():
    with pytest.raises(ValueError):
        decay_normalize([], 0.5)
    with pytest.raises(ValueError):
        decay_normalize([0.5], 0.0)
    with pytest.raises(ValueError):
        decay_normalize([0.5], 1.5)
    with pytest.raises(ValueError):
        decay_normalize([-0.1], 0.5)
    with pytest.raises(ValueError):
        decay_normalize([math.inf], 0.5)


def test_check_masses_tolerance():
    check_masses([0.5, 0.25], 0.25)
    with pytest.raises(ValueError):
        check_masses([0.5, 0.25], 0.2501)


def test_distribution_build_sorts_and_validates():
    dist = WeightedScoreDistribution.build([3.0, 1.0, 2.0], [0.25] * 3, 0.25)
    assert [s for s, _ in dist.atoms] == [1.0, 2.0, 3.0]
    with pytest.raises(ValueError):
        WeightedScoreDistribution.build([1.0], [0.5, 0.5], 0.0)
    with pytest.raises(ValueError):
        WeightedScoreDistribution.build([math.inf], [0.5], 0.5)
    with pytest.raises(ValueError):
        WeightedScoreDistribution.build([1.0], [-0.5], 1.5)
    with pytest.raises(ValueError):
        WeightedScoreDistribution(atoms=((2.0, 0.5), (1.0, 0.5)),
                                  infinity_mass=0.0).validate()


def test_weighted_quantile_reaches_and_overflows():
    # dyadic masses are exact in binary, so the Fraction comparisons are
    # checking the stated rule and not float rounding
    dist = WeightedScoreDistribution.build(
        [1.0, 2.0, 3.0], [0.25, 0.25, 0.25], 0.25)
    assert weighted_quantile(dist, Fraction(1, 4)) == 1.0
    assert weighted_quantile(dist, Fraction(1, 2)) == 2.0
    assert weighted_quantile(dist, Fraction(3, 4)) == 3.0
    # only the infinity mass remains above 3/4
    assert weighted_quantile(dist, Fraction(76, 100)) == math.inf
    with pytest.raises(ValueError):
        weighted_quantile(dist, 0.0)
    with pytest.raises(ValueError):
        weighted_quantile(dist, 1.0)


def test_weighted_quantile_ties_share_mass():
    dist = WeightedScoreDistribution.build(
        [2.0, 2.0, 1.0], [0.2, 0.25, 0.25], 0.3)
    # mass at 1.0 is 0.25; mass at <= 2.0 is 0.7
    assert weighted_quantile(dist, Fraction(1, 4)) == 1.0
    assert weighted_quantile(dist, Fraction(26, 100)) == 2.0
    assert weighted_quantile(dist, Fraction(7, 10)) == 2.0
    assert weighted_quantile(dist, Fraction(71, 100)) == math.inf


@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=24),
    st.integers(1, 99),
)
@settings(max_examples=120, deadline=None)
def test_weighted_quantile_matches_reference(scores, qpct):
    n = len(scores)
    rng = RngStream(n * 1000 + qpct)
    raw = [0.05 + 0.95 * u for u in rng.uniforms(n)]
    weights, test_mass = decay_normalize(raw, rho=0.9)
    dist = WeightedScoreDistribution.build(scores, weights, test_mass)
    q = Fraction(qpct, 100)
    assert weighted_quantile(dist, q) == ref_threshold(scores, weights, q)


def test_calibrate_enumeration_example():
    scores = [round(0.1 * i, 1) for i in range(1, 11)]
    cal = calibrate(examples_from(scores), alpha=0.1)
    assert cal.tau_star == 1.0
    assert cal.scheme == "uniform"
    assert cal.rho == 1.0
    assert cal.n == 10


def test_calibrate_uniform_is_order_statistic():
    rng = RngStream(55)
    for trial in range(30):
        n = 1 + trial % 40
        scores = list(rng.gaussians(n))
        alpha = 0.05 + 0.4 * rng.uniform()
        cal = calibrate(examples_from(scores), alpha=alpha)
        rank = math.ceil((1.0 - alpha) * (n + 1))
        expected = sorted(scores)[rank - 1] if rank <= n else math.inf
        assert cal.tau_star == expected


def test_calibrate_uniform_permutation_invariant():
    scores = [5.0, -1.0, 3.5, 0.0, 2.0, 9.0, 4.4]
    perm = [scores[i] for i in (3, 0, 6, 2, 5, 1, 4)]
    a = calibrate(examples_from(scores), alpha=0.25)
    b = calibrate(examples_from(perm), alpha=0.25)
    assert a.tau_star == b.tau_star


def test_calibrate_feature_decay_recency():
    # constant raw weights reduce to recency decay: with rho small, the
    # most recent points dominate the quantile
    scores = [10.0] * 40 + [1.0] * 10
    raw = [0.5] * 50
    recency = calibrate(examples_from(scores, raw), alpha=0.2,
                        scheme="feature_decay", rho=0.05)
    unif = calibrate(examples_from(scores, raw), alpha=0.2)
    assert unif.tau_star == 10.0
    assert recency.tau_star == math.inf or recency.tau_star == 1.0
    # rho=1 keeps all calibration mass equal, matching uniform on the atoms
    flat = calibrate(examples_from(scores, raw), alpha=0.2,
                     scheme="feature_decay", rho=1.0)
    assert flat.tau_star == unif.tau_star


def test_calibrate_feature_decay_from_embeddings():
    exs = [
        CalibrationExample(episode_id=0, score=1.0,
                           phi_pred=(0.0, 0.0), phi_gt=(0.0, 0.0)),
        CalibrationExample(episode_id=1, score=2.0,
                           phi_pred=(0.0, 0.0), phi_gt=(3.0, 0.0)),
    ]
    cal = calibrate(exs, alpha=0.3, scheme="feature_decay", rho=0.5,
                    temperature=2.0)
    assert cal.scheme == "feature_decay"
    assert cal.temperature == 2.0
    # episode 0 is the better-conforming pair, so it outranks episode 1:
    # masses are rho^1=1/2 (ep 1), rho^... ep0 gets 1/4? ranks: ep1 rank 1,
    # ep0 rank 2 -> masses rho^2, rho^1 -> 0.25, 0.5 unnormalized
    weights, test_mass = decay_normalize(
        [feature_weight(e.phi_pred, e.phi_gt, 2.0) for e in exs], 0.5)
    assert weights[0] > weights[1]
    dist_q = Fraction(7, 10)
    total = Fraction(0)
    tau = None
    for s, m in sorted([(1.0, weights[0]), (2.0, weights[1])]):
        total += Fraction(m)
        if total >= dist_q:
            tau = s
            break
    assert cal.tau_star == (tau if tau is not None else math.inf)


def test_calibrate_validation():
    with pytest.raises(ValueError):
        calibrate([], alpha=0.1)
    with pytest.raises(ValueError):
        calibrate(examples_from([1.0]), alpha=0.0)
    with pytest.raises(ValueError):
        calibrate(examples_from([1.0]), alpha=1.0)
    with pytest.raises(ValueError):
        calibrate(examples_from([1.0]), scheme="nope")
    with pytest.raises(ValueError):
        calibrate(examples_from([math.nan]))
    with pytest.raises(ValueError):
        calibrate(examples_from([1.0]), scheme="feature_decay", rho=0.5)


def test_example_validation_and_resolution():
    with pytest.raises(ValueError):
        CalibrationExample(episode_id=0, score=1.0, raw_weight=0.0).validate()
    with pytest.raises(ValueError):
        CalibrationExample(episode_id=0, score=1.0, raw_weight=1.5).validate()
    ex = CalibrationExample(episode_id=0, score=1.0, raw_weight=0.7)
    assert ex.resolve_weight(1.0) == 0.7
    with pytest.raises(ValueError):
        CalibrationExample(episode_id=0, score=1.0).resolve_weight(1.0)


def test_membership_rule():
    assert membership(1.0, 1.0)
    assert not membership(1.0000001, 1.0)
    assert membership(1e300, math.inf)
    with pytest.raises(ValueError):
        membership(math.nan, 1.0)


def test_result_json_roundtrip(tmp_path):
    cal = calibrate(examples_from([1.0, 2.0, 3.0]), alpha=0.5, seed=7,
                    created_at="2024-05-01T00:00:00+00:00")
    path = tmp_path / "cal.json"
    cal.save(path)
    loaded = CalibrationResult.load(path)
    assert loaded == cal
    # writer is byte-stable
    loaded.save(tmp_path / "cal2.json")
    assert path.read_bytes() == (tmp_path / "cal2.json").read_bytes()


def test_result_infinity_sentinel():
    cal = calibrate(examples_from([1.0]), alpha=0.1)
    assert cal.tau_star == math.inf
    doc = json.loads(cal.to_json())
    assert doc["tau_star"] == "inf"
    assert CalibrationResult.from_json(cal.to_json()).tau_star == math.inf


def test_result_format_errors():
    with pytest.raises(FormatError):
        CalibrationResult.from_json("nope")
    good = calibrate(examples_from([1.0, 2.0]), alpha=0.5).to_json()
    doc = json.loads(good)
    for breakage in (
        {"scheme": "mystery"},
        {"alpha": 2.0},
        {"tau_star": "huge"},
    ):
        bad = dict(doc)
        bad.update(breakage)
        with pytest.raises(FormatError):
            CalibrationResult.from_json(json.dumps(bad))
    missing = dict(doc)
    del missing["rho"]
    with pytest.raises(FormatError):
        CalibrationResult.from_json(json.dumps(missing))


def test_scores_csv_roundtrip(tmp_path):
    exs = examples_from([0.5, 0.25, 0.75], raw=[0.9, 0.8, 0.7])
    path = tmp_path / "scores.csv"
    save_scores(path, exs)
    assert path.read_text().splitlines()[0] == "episode_id,score,raw_weight"
    loaded = load_scores(path)
    assert loaded == exs

    bare = examples_from([0.5, 0.25])
    path2 = tmp_path / "bare.csv"
    save_scores(path2, bare)
    assert path2.read_text().splitlines()[0] == "episode_id,score"
    assert load_scores(path2) == bare

    # a single missing raw weight drops the whole column
    mixed = examples_from([0.5, 0.25], raw=[0.9, None])
    path3 = tmp_path / "mixed.csv"
    save_scores(path3, mixed)
    assert path3.read_text().splitlines()[0] == "episode_id,score"


def test_scores_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("wrong,header\n")
    with pytest.raises(FormatError):
        load_scores(path)
    path.write_text("episode_id,score\n")
    with pytest.raises(FormatError):
        load_scores(path)
    path.write_text("episode_id,score\n0,1.0,0.5\n")
    with pytest.raises(FormatError):
        load_scores(path)
    path.write_text("episode_id,score\n0,abc\n")
    with pytest.raises(FormatError):
        load_scores(path)
    path.write_text("episode_id,score,raw_weight\n0,1.0,2.0\n")
    with pytest.raises(FormatError):
        load_scores(path)
    with pytest.raises(ValueError):
        save_scores(tmp_path / "none.csv", [])


def test_coverage_sanity_iid_scores():
    # pure score-level check: exchangeable gaussian scores, uniform weights
    rng = RngStream(2718)
    n_cal, n_test, alpha = 200, 2000, 0.1
    hits = 0
    cal_scores = list(rng.gaussians(n_cal))
    cal = calibrate(examples_from(cal_scores), alpha=alpha)
    for s in rng.gaussians(n_test):
        hits += membership(s, cal.tau_star)
    cov = hits / n_test
    assert cov > 1.0 - alpha - 0.04
    assert cov < 1.0


def test_quantile_mass_conservation_property():
    # whatever the weights, q below the finite mass always returns an atom
    rng = RngStream(17)
    for trial in range(25):
        n = 2 + trial
        scores = list(rng.gaussians(n))
        raw = [0.05 + 0.9 * u for u in rng.uniforms(n)]
        weights, test_mass = decay_normalize(raw, 0.8)
        dist = WeightedScoreDistribution.build(scores, weights, test_mass)
        finite_mass = sum(Fraction(w) for w in weights)
        tau = weighted_quantile(dist, finite_mass)
        assert tau == max(scores)
        just_over = finite_mass + Fraction(1, 10**12)
        if just_over < 1:
            assert weighted_quantile(dist, just_over) == math.inf
