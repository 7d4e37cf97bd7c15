import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demorph.evaluation import (DemorphResult, EvalConfig, EvaluationReport, build_report,
                                check_demorph_conditions, demorph_condition_values, genuine_impostor_scores,
                                image_metrics, morph_acceptance_rate, pair_from_scores, pair_outputs,
                                restoration_accuracy, tmr_at_fmr)
from demorph.matcher import ToyBackend, similarity, toy_embed
from demorph.morph_engine import ContractError, morph_pair

TOY = ToyBackend()


def brute_force_tmr(genuine, impostor, level):
    """Best TMR over every threshold (all scores, midpoints, and +/- infinity) with FMR <= level."""
    genuine, impostor = np.asarray(genuine), np.asarray(impostor)
    values = np.unique(np.concatenate([genuine, impostor]))
    candidates = list(values) + list((values[1:] + values[:-1]) / 2) + [values[-1] + 1, -np.inf, np.inf]
    best = 0.0
    for th in candidates:
        if np.mean(impostor >= th) <= level:
            best = max(best, float(np.mean(genuine >= th)))
    return best


def brute_force_pairing(s):
    # enumerate both assignments; ties resolve to the first (straight) one
    options = [((0, 1), s[0][0] + s[1][1]), ((1, 0), s[0][1] + s[1][0])]
    return max(options, key=lambda o: o[1])[0]


def test_pairing_examples():
    assert pair_from_scores([[0.9, 0.1], [0.2, 0.8]]).straight
    assert not pair_from_scores([[0.1, 0.9], [0.8, 0.2]]).straight
    tie = pair_from_scores([[0.5, 0.5], [0.5, 0.5]])
    assert tie.straight and tie.sum_straight == tie.sum_crossed


def test_pairing_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s = rng.uniform(-1, 1, size=(2, 2))
        assert pair_from_scores(s).assignment == brute_force_pairing(s)


def test_pair_outputs_with_images(faces64):
    i1, i2 = faces64[0][0], faces64[1][0]
    assert pair_outputs(i1, i2, i1, i2, TOY).straight
    assert not pair_outputs(i2, i1, i1, i2, TOY).straight


def test_tmr_examples():
    assert tmr_at_fmr([0.9, 0.8, 0.7], [0.1, 0.2, 0.3], 0.1) == 1.0
    assert tmr_at_fmr([0.0, 0.05], [0.1, 0.2, 0.3], 0.1) == 0.0
    # 10 impostors at 10% FMR: one impostor may pass, so the threshold sits above the second largest
    imp = [0.1 * k for k in range(10)]
    assert tmr_at_fmr([0.75, 0.85, 0.95], imp, 0.1) == pytest.approx(2 / 3)


def test_tmr_brute_force():
    rng = np.random.default_rng(1)
    for k in range(1000):
        n_g, n_i = rng.integers(1, 30, size=2)
        genuine = rng.normal(0.5, 0.2, n_g)
        impostor = rng.normal(0.2, 0.2, n_i)
        level = rng.choice([0.01, 0.05, 0.1, 0.3, 0.5])
        assert tmr_at_fmr(genuine, impostor, level) == brute_force_tmr(genuine, impostor, level)


def test_tmr_brute_force_200_scores():
    rng = np.random.default_rng(2)
    genuine, impostor = rng.uniform(0, 1, 200), rng.uniform(0, 0.8, 200)
    for level in (0.01, 0.05, 0.1):
        assert tmr_at_fmr(genuine, impostor, level) == brute_force_tmr(genuine, impostor, level)


def test_tmr_with_ties():
    genuine = [0.5, 0.5, 0.7]
    impostor = [0.5, 0.5, 0.1, 0.1]
    for level in (0.1, 0.25, 0.5, 0.75):
        assert tmr_at_fmr(genuine, impostor, level) == brute_force_tmr(genuine, impostor, level)


@settings(max_examples=100)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=40), st.lists(st.floats(-1, 1), min_size=1, max_size=40))
def test_tmr_monotone_in_level(genuine, impostor):
    levels = [0.01, 0.05, 0.1, 0.2, 0.5, 0.9]
    rates = [tmr_at_fmr(genuine, impostor, f) for f in levels]
    assert all(a <= b for a, b in zip(rates, rates[1:]))
    assert all(0 <= r <= 1 for r in rates)


def test_tmr_contract():
    with pytest.raises(ContractError):
        tmr_at_fmr([], [0.1], 0.1)
    with pytest.raises(ContractError):
        tmr_at_fmr([0.1], [0.1], 1.0)


def test_restoration_accuracy():
    assert restoration_accuracy([0.5, 0.3], 0.4) == 0.5
    assert restoration_accuracy([1.0, 1.0, 1.0], 0.4) == 1.0
    assert restoration_accuracy([1.0, 0.2], 1.1) == 0.0
    assert restoration_accuracy([0.4], 0.4) == 1.0
    with pytest.raises(ContractError):
        restoration_accuracy([], 0.4)


@settings(max_examples=100)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.floats(-1, 1), st.floats(-1, 1))
def test_ra_monotone(scores, a, b):
    lo, hi = sorted((a, b))
    assert restoration_accuracy(scores, hi) <= restoration_accuracy(scores, lo)


def test_conditions_examples(faces64):
    i1, i2 = faces64[0][0], faces64[1][0]
    assert similarity(toy_embed(i1), toy_embed(i2)) < 0.4
    same = check_demorph_conditions(i1, i1, i1, i2, theta=1.0, epsilon=0.4, backend=TOY)
    assert not same.dissimilar_ok
    perfect = check_demorph_conditions(i1, i2, i1, i2, theta=0.4, epsilon=0.99, backend=TOY)
    assert perfect.dissimilar_ok and perfect.match_ok


def test_condition_min_max_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(500):
        s = rng.uniform(-1, 1, size=(2, 2))
        # enumerate the terms literally: for each j, the max over {B(o_j, i_k) for k != j} and B(o_j, i_j)
        per_j = []
        for j in range(2):
            terms = [s[j][k] for k in range(2) if k != j] + [s[j][j]]
            per_j.append(max(terms))
        assert demorph_condition_values(0.0, s)[1] == min(per_j)


def test_morph_replication_detected(faces64):
    (a, la, _), (b, lb, _) = faces64[0], faces64[1]
    m = morph_pair(a, la, b, lb)
    rep = check_demorph_conditions(m, m, a, b, theta=0.4, epsilon=0.4, backend=TOY)
    assert not rep.dissimilar_ok
    assert rep.dissimilarity == pytest.approx(1.0)


def test_image_metrics():
    z = np.zeros((3, 16, 16))
    assert image_metrics(z, z) == (100.0, 1.0)
    h = np.full((3, 16, 16), 0.5)
    p, _ = image_metrics(h, z)
    assert p == pytest.approx(10 * math.log10(1 / 0.25))
    assert p == pytest.approx(6.0206, abs=1e-4)
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert image_metrics(a, b) == image_metrics(b, a)


def _result(faces, i, j, perfect=True, morph_id=None):
    (a, _, ida), (b, _, idb) = faces[i], faces[j]
    o1, o2 = (a, b) if perfect else (b, a)
    return DemorphResult(morph_id or f"m{i}{j}", ida, idb, o1, o2, a, b)


def test_genuine_impostor(faces64):
    r = _result(faces64, 0, 1)
    gallery = [(f[2], f[0]) for f in faces64]
    gen, imp = genuine_impostor_scores([r], gallery, TOY)
    assert gen == pytest.approx([1.0, 1.0])
    for out, score in zip((r.o1, r.o2), imp):
        brute = max(similarity(toy_embed(out), toy_embed(f[0])) for f in faces64[2:])
        assert score == pytest.approx(brute, abs=1e-12)
    single = [(faces64[3][2], faces64[3][0])]
    _, imp = genuine_impostor_scores([r], single, TOY)
    assert imp[0] == pytest.approx(similarity(toy_embed(r.o1), toy_embed(faces64[3][0])), abs=1e-12)
    with pytest.raises(ContractError):
        genuine_impostor_scores([r], gallery[:2], TOY)


def test_report_perfect_record(faces64, tmp_path):
    gallery = [(f[2], f[0]) for f in faces64]
    report = build_report([_result(faces64, 0, 1)], gallery, TOY)
    assert report.restoration_accuracy == 1.0
    assert all(v == 1.0 for v in report.tmr_at_fmr.values())
    assert set(report.tmr_at_fmr) == {0.01, 0.05, 0.1}
    assert len(report.per_record) == 1
    assert report.psnr_mean == 100.0 and report.ssim_mean == 1.0
    assert report.per_record[0]["eq4"]


def test_report_round_trip_and_files(faces64, tmp_path):
    gallery = [(f[2], f[0]) for f in faces64]
    results = [_result(faces64, 0, 1), _result(faces64, 2, 3, perfect=False), _result(faces64, 4, 5)]
    report = build_report(results, gallery, TOY, EvalConfig(fmr_levels=(0.1,)))
    assert len(report.per_record) == 3
    assert report.per_record[1]["pairing"] == "crossed"
    assert EvaluationReport.from_json(report.to_json()) == report
    report.write(tmp_path)
    header = (tmp_path / "per_record.csv").read_text().splitlines()[0]
    assert header == "morph_id,pairing,genuine1,genuine2,impostor1,impostor2,psnr,ssim,eq3,eq4"
    assert len((tmp_path / "scores.csv").read_text().splitlines()) == 1 + 3 * 4
    first = (tmp_path / "report.json").read_bytes()
    build_report(results, gallery, TOY, EvalConfig(fmr_levels=(0.1,))).write(tmp_path)
    assert (tmp_path / "report.json").read_bytes() == first


def test_report_requires_results(faces64):
    with pytest.raises(ContractError):
        build_report([], [(faces64[0][2], faces64[0][0])], TOY)


def test_morph_acceptance_rate(faces64):
    (a, la, _), (b, lb, _) = faces64[0], faces64[1]
    m = morph_pair(a, la, b, lb)
    assert morph_acceptance_rate([(a, a, a)], TOY, 0.99) == 1.0
    sims = [similarity(toy_embed(m), toy_embed(x)) for x in (a, b)]
    assert morph_acceptance_rate([(m, a, b)], TOY, min(sims)) == 1.0
    assert morph_acceptance_rate([(m, a, b), (a, a, a)], TOY, min(sims) + 1e-6) == 0.5
    with pytest.raises(ContractError):
        morph_acceptance_rate([], TOY, 0.4)
