"""Acceptance suite: one test per release criterion, at pinned tolerances.

Run with `pytest -s tests/test_acceptance.py` to see one PASS/FAIL line
per criterion. The directional benchmark (criterion 5) uses a fixed seed
and deliberately mismatched enrollment/test distributions plus a
heterogeneous evaluation domain, so the ablation ordering is a stable,
reproducible property of the synthetic world.
"""

import functools
import time

import numpy as np
import pytest

from asvbackend import calibration, fourcov, metrics, plda, scorenorm, synth
from asvbackend.data import Embedding, ScoredTrial, ScoreSet, SpeakerGroup, Trial, TrialList
from asvbackend.fourcov import ScoringKernel
from asvbackend.plda import PldaModel

from conftest import random_truth
from test_cli import build_bundle, invoke, score_pipeline
from test_metrics import oracle_eer, oracle_min_dcf, oracle_points

_ELAPSED: dict[str, float] = {}


def criterion(num, name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"\nACCEPTANCE {num} {name}: FAIL")
                raise
            print(f"\nACCEPTANCE {num} {name}: PASS")
            return result

        return wrapper

    return deco


# ---------------------------------------------------------------------------
# shared mismatched benchmark (criterion 5)

BENCH = dict(
    dim=16,
    rank=4,
    snr=4.0,
    coupling_strength=0.9,
    test_noise_inflation=4.0,  # kappa: test residuals inflated fourfold
    test_rotation=1.0,         # rotated test loadings
    test_mean_shift=1.0,
    train_jitter=0.0,
    eval_jitter=0.9,           # evaluation-domain heterogeneity
)


def _gen(truth, n_speakers, enroll_segments, test_segments, seed, prefix, jitter, knobs):
    cfg = synth.GenConfig(
        dim=BENCH["dim"], enroll_rank=BENCH["rank"], test_rank=BENCH["rank"],
        n_speakers=n_speakers, enroll_segments=enroll_segments,
        test_segments=test_segments, seed=seed, speaker_prefix=prefix,
        truth=truth, test_noise_jitter=jitter, **knobs,
    )
    return synth.sample_dataset(cfg)


def _knobs(extra_rotation=0.0):
    return dict(
        snr=BENCH["snr"], coupling_strength=BENCH["coupling_strength"],
        test_noise_inflation=BENCH["test_noise_inflation"],
        test_rotation=BENCH["test_rotation"] + extra_rotation,
        test_mean_shift=BENCH["test_mean_shift"],
    )


def _preprocessed_test_groups(groups, pre):
    return [
        SpeakerGroup(
            g.speaker_id,
            tuple(Embedding(m.id, v) for m, v in zip(g.members, pre.apply(g.matrix()))),
        )
        for g in groups
    ]


def _train_two_sided(train_enroll, train_test, rank, chunk):
    pre1 = plda.fit_preprocessor(np.vstack([g.matrix() for g in train_enroll]))
    aggregates = [plda.chunked_enroll_averages(g, pre1, chunk) for g in train_enroll]
    side1 = plda.train_plda(aggregates, rank=rank, iterations=10)
    pre2 = plda.fit_preprocessor(np.vstack([g.matrix() for g in train_test]))
    test_groups = _preprocessed_test_groups(train_test, pre2)
    side2 = plda.train_plda(test_groups, rank=rank, iterations=10)
    model = fourcov.fit_coupling(side1, side2, list(zip(aggregates, test_groups)))
    return model, pre1, pre2


def _train_pooled_symmetric(train_enroll, train_test, rank, chunk):
    identity = plda.identity_preprocessor(BENCH["dim"])
    pooled = []
    for g1, g2 in zip(train_enroll, train_test):
        aggregates = plda.chunked_enroll_averages(g1, identity, chunk)
        pooled.append((g1.speaker_id, aggregates.members + g2.members))
    pre = plda.fit_preprocessor(np.vstack([np.stack([m.vector for m in ms]) for _, ms in pooled]))
    groups = [
        SpeakerGroup(spk, tuple(Embedding(m.id, pre.apply(m.vector)) for m in members))
        for spk, members in pooled
    ]
    return plda.train_plda(groups, rank=rank, iterations=10), pre


def _eval_vectors(eval_enroll, eval_test, pre1, pre2):
    enrolls = [
        Embedding(f"{g.speaker_id}-model", plda.enroll_average(g, pre1).vector)
        for g in eval_enroll
    ]
    tests = [Embedding(m.id, pre2.apply(m.vector)) for g in eval_test for m in g.members]
    return enrolls, tests


def _make_trials(eval_enroll, eval_test, nontargets, seed):
    rng = np.random.default_rng(seed)
    test_ids = [m.id for g in eval_test for m in g.members]
    test_by_speaker = {g.speaker_id: g for g in eval_test}
    entries = []
    for g in eval_enroll:
        eid = f"{g.speaker_id}-model"
        for m in test_by_speaker[g.speaker_id].members:
            entries.append(Trial(eid, m.id, True))
        impostors = [t for t in test_ids if not t.startswith(g.speaker_id + "-")]
        picked = rng.choice(len(impostors), size=nontargets, replace=False)
        entries += [Trial(eid, impostors[i], False) for i in sorted(picked)]
    return TrialList(tuple(entries))


def _cohort_set(coh_enroll, coh_test, pre1, pre2, top_k):
    return scorenorm.CohortSet(
        tuple(
            Embedding(f"{g.speaker_id}-cmodel", plda.enroll_average(g, pre1).vector)
            for g in coh_enroll
        ),
        tuple(Embedding(m.id, pre2.apply(m.vector)) for g in coh_test for m in g.members),
        top_k,
    )


@pytest.fixture(scope="module")
def mismatch_benchmark():
    start = time.perf_counter()
    knobs = _knobs()
    seed_cfg = synth.GenConfig(
        dim=BENCH["dim"], enroll_rank=BENCH["rank"], test_rank=BENCH["rank"],
        n_speakers=1, enroll_segments=1, test_segments=1, seed=1001, **knobs,
    )
    truth = synth.make_ground_truth(seed_cfg)
    train_enroll, train_test, _ = _gen(truth, 2000, 6, 3, 1001, "tr", BENCH["train_jitter"], knobs)
    eval_enroll, eval_test, _ = _gen(truth, 500, 3, 2, 2002, "ev", BENCH["eval_jitter"], knobs)
    coh_enroll, coh_test, _ = _gen(truth, 1000, 3, 1, 3003, "coh", BENCH["eval_jitter"], knobs)
    trials = _make_trials(eval_enroll, eval_test, 98, 4004)
    labels = np.array([t.is_target for t in trials])

    sym_model, sym_pre = _train_pooled_symmetric(train_enroll, train_test, BENCH["rank"], 3)
    sym_kernel = fourcov.symmetric_kernel(sym_model)
    enrolls, tests = _eval_vectors(eval_enroll, eval_test, sym_pre, sym_pre)
    sym_scores = fourcov.score_batch(sym_kernel, enrolls, tests, trials)

    model, pre1, pre2 = _train_two_sided(train_enroll, train_test, BENCH["rank"], 3)
    kernel = fourcov.build_kernel(model)
    enrolls, tests = _eval_vectors(eval_enroll, eval_test, pre1, pre2)
    raw_scores = fourcov.score_batch(kernel, enrolls, tests, trials)
    cohorts = _cohort_set(coh_enroll, coh_test, pre1, pre2, 400)
    normalized = scorenorm.snorm_batch(kernel, cohorts, enrolls, tests, raw_scores)

    _ELAPSED["benchmark"] = time.perf_counter() - start
    return dict(
        labels=labels,
        trials=trials,
        eer_pooled_symmetric=metrics.compute_eer(sym_scores.values(), labels),
        eer_fourcov=metrics.compute_eer(raw_scores.values(), labels),
        min_dcf_fourcov=metrics.compute_min_dcf(raw_scores.values(), labels),
        eer_snorm=metrics.compute_eer(normalized.values(), labels),
        min_dcf_snorm=metrics.compute_min_dcf(normalized.values(), labels),
    )


# ---------------------------------------------------------------------------


@criterion(1, "oracle LLR equality")
def test_criterion_1_oracle_llr_equality():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    instances = 0
    worst = 0.0
    for dim in (2, 6, 16):
        for _ in range(34 if dim == 2 else 33):
            rank_enroll = int(rng.integers(1, dim + 1))
            rank_test = int(rng.integers(1, dim + 1))
            truth = random_truth(rng, dim, rank_enroll, rank_test)
            kernel = fourcov.build_kernel(truth.as_fourcov())
            w_e = truth.enroll_mean + rng.standard_normal(dim)
            w_t = truth.test_mean + rng.standard_normal(dim)
            got = fourcov.score_trial(kernel, w_e, w_t)
            expected = synth.true_llr(truth, w_e, w_t)
            worst = max(worst, abs(got - expected))
            instances += 1
    elapsed = time.perf_counter() - start
    assert instances == 100
    assert worst < 1e-8, f"worst oracle deviation {worst:.3e}"
    assert elapsed < 5.0, f"criterion 1 took {elapsed:.2f}s"


@criterion(2, "symmetric collapse")
def test_criterion_2_symmetric_collapse():
    rng = np.random.default_rng(202)
    draws = rng.standard_normal((8, 10))
    model = PldaModel(rng.standard_normal(8), rng.standard_normal((8, 3)), draws @ draws.T / 10)
    collapsed = fourcov.FourCovModel(model, model, np.eye(3), np.zeros((3, 3)))
    kernel = fourcov.build_kernel(collapsed)
    worst = 0.0
    for _ in range(1000):
        w1 = model.mean + rng.standard_normal(8)
        w2 = model.mean + rng.standard_normal(8)
        worst = max(worst, abs(fourcov.score_trial(kernel, w1, w2) - plda.plda_llr(model, w1, w2)))
    assert worst < 1e-9, f"worst collapse deviation {worst:.3e}"


@criterion(3, "coupling recovery")
def test_criterion_3_coupling_recovery():
    rng = np.random.default_rng(303)
    dim = 2
    # near-noiseless embeddings carry the constructed factors, so the full
    # fit_coupling path (posterior extraction + regression) sees y almost
    # exactly: shrinkage is O(1e-6), far below the tolerances
    plda_side = PldaModel(np.zeros(dim), np.eye(dim), 1e-6 * np.eye(dim))
    pairs = []
    for i in range(1000):
        y1 = rng.standard_normal(dim)
        y2 = 2.0 * y1 + 0.1 * rng.standard_normal(dim)
        pairs.append(
            (
                SpeakerGroup(f"s{i}", (Embedding(f"s{i}-e0", y1 + 1e-3 * rng.standard_normal(dim)),)),
                SpeakerGroup(f"s{i}", (Embedding(f"s{i}-t0", y2 + 1e-3 * rng.standard_normal(dim)),)),
            )
        )
    model = fourcov.fit_coupling(plda_side, plda_side, pairs)
    coupling_err = np.abs(model.coupling - 2.0 * np.eye(dim)).max()
    noise_err = np.abs(model.coupling_noise_cov - 0.01 * np.eye(dim)).max()
    assert coupling_err < 5e-2, f"coupling error {coupling_err:.4f}"
    assert noise_err < 5e-3, f"coupling noise error {noise_err:.5f}"


@criterion(4, "EM monotonicity and recovery")
def test_criterion_4_em_monotonic_recovery():
    cfg = synth.GenConfig(
        dim=16, enroll_rank=4, test_rank=4, n_speakers=800,
        enroll_segments=10, test_segments=1, seed=404,
    )
    groups, _, truth = synth.sample_dataset(cfg)
    history = []
    model = plda.train_plda(groups, rank=4, iterations=20, callback=lambda i, ll: history.append(ll))
    assert len(history) == 20
    deltas = np.diff(history)
    assert deltas.min() >= -1e-8, f"log-likelihood decreased by {-deltas.min():.3e}"
    true_between = truth.enroll_loadings @ truth.enroll_loadings.T
    between_err = np.linalg.norm(model.between_cov() - true_between) / np.linalg.norm(true_between)
    residual_err = np.linalg.norm(model.residual_cov - truth.enroll_noise_cov) / np.linalg.norm(
        truth.enroll_noise_cov
    )
    assert between_err < 0.10, f"between-cov error {between_err:.3f}"
    assert residual_err < 0.10, f"residual-cov error {residual_err:.3f}"


@criterion(5, "ablation direction (a): asymmetric model beats pooled symmetric")
def test_criterion_5a_fourcov_beats_pooled(mismatch_benchmark):
    eer_sym = mismatch_benchmark["eer_pooled_symmetric"]
    eer_fc = mismatch_benchmark["eer_fourcov"]
    relative_gain = (eer_sym - eer_fc) / eer_sym
    assert relative_gain >= 0.10, (
        f"pooled {100 * eer_sym:.2f}%, two-sided {100 * eer_fc:.2f}%, "
        f"relative gain {100 * relative_gain:.1f}% < 10%"
    )


@criterion(5, "ablation direction (b): S-norm keeps EER and reduces minDCF")
def test_criterion_5b_snorm_helps(mismatch_benchmark):
    eer_fc = mismatch_benchmark["eer_fourcov"]
    eer_sn = mismatch_benchmark["eer_snorm"]
    assert eer_sn <= 1.02 * eer_fc, (
        f"S-norm raised EER {100 * eer_fc:.2f}% -> {100 * eer_sn:.2f}% (> 2% relative)"
    )
    assert mismatch_benchmark["min_dcf_snorm"] < mismatch_benchmark["min_dcf_fourcov"], (
        f"S-norm did not reduce minDCF: {mismatch_benchmark['min_dcf_fourcov']:.4f} -> "
        f"{mismatch_benchmark['min_dcf_snorm']:.4f}"
    )


@criterion(5, "ablation direction (c): trial-dependent routing")
def test_criterion_5c_routing_beats_pooled(mismatch_benchmark):
    start = time.perf_counter()
    rank = BENCH["rank"]
    knobs_a = _knobs()
    knobs_b = _knobs(extra_rotation=0.8)
    seed_cfg = synth.GenConfig(
        dim=BENCH["dim"], enroll_rank=rank, test_rank=rank,
        n_speakers=1, enroll_segments=1, test_segments=1, seed=1001, **knobs_a,
    )
    truth_a = synth.make_ground_truth(seed_cfg)
    rng = np.random.default_rng(777)
    shift_dir = rng.standard_normal(BENCH["dim"])
    shift_dir /= np.linalg.norm(shift_dir)
    import scipy.linalg

    draws = rng.standard_normal((BENCH["dim"], BENCH["dim"]))
    skew = (draws - draws.T) / 2.0
    skew /= np.linalg.norm(skew, 2)
    truth_b = synth.GroundTruth(
        truth_a.enroll_mean, truth_a.enroll_loadings, truth_a.enroll_noise_cov,
        truth_a.test_mean + 1.5 * shift_dir,
        scipy.linalg.expm(0.8 * skew) @ truth_a.test_loadings,
        0.5 * truth_a.test_noise_cov,
        truth_a.coupling, truth_a.coupling_noise_cov,
    )

    # condition A: few-segment enrollments; condition B: many-segment
    # enrollments with a shifted test domain
    tr_a = _gen(truth_a, 1500, 6, 3, 11, "atr", 0.0, knobs_a)[:2]
    tr_b = _gen(truth_b, 1500, 24, 3, 12, "btr", 0.0, knobs_b)[:2]
    ev_a = _gen(truth_a, 250, 3, 2, 13, "aev", 0.9, knobs_a)[:2]
    ev_b = _gen(truth_b, 250, 12, 2, 14, "bev", 0.5, knobs_b)[:2]
    co_a = _gen(truth_a, 500, 3, 1, 15, "aco", 0.9, knobs_a)[:2]
    co_b = _gen(truth_b, 500, 12, 1, 16, "bco", 0.5, knobs_b)[:2]
    dv_a = _gen(truth_a, 250, 3, 2, 17, "adv", 0.9, knobs_a)[:2]
    dv_b = _gen(truth_b, 250, 12, 2, 18, "bdv", 0.5, knobs_b)[:2]

    model_a, pre1_a, pre2_a = _train_two_sided(*tr_a, rank, 3)
    model_b, pre1_b, pre2_b = _train_two_sided(*tr_b, rank, 12)

    # pooled two-sided model over both conditions
    pre1_p = plda.fit_preprocessor(np.vstack([g.matrix() for g in tr_a[0] + tr_b[0]]))
    agg_p = [plda.chunked_enroll_averages(g, pre1_p, 3) for g in tr_a[0]]
    agg_p += [plda.chunked_enroll_averages(g, pre1_p, 12) for g in tr_b[0]]
    side1_p = plda.train_plda(agg_p, rank=rank, iterations=10)
    pre2_p = plda.fit_preprocessor(np.vstack([g.matrix() for g in tr_a[1] + tr_b[1]]))
    tg_p = _preprocessed_test_groups(tr_a[1] + tr_b[1], pre2_p)
    side2_p = plda.train_plda(tg_p, rank=rank, iterations=10)
    model_p = fourcov.fit_coupling(side1_p, side2_p, list(zip(agg_p, tg_p)))

    trials_a = _make_trials(*ev_a, 98, 21)
    trials_b = _make_trials(*ev_b, 98, 22)
    merged_trials = TrialList(trials_a.entries + trials_b.entries)
    labels = np.array([t.is_target for t in merged_trials])

    def condition_scores(model, pre1, pre2, coh, ev, trials):
        kernel = fourcov.build_kernel(model)
        enrolls, tests = _eval_vectors(*ev, pre1, pre2)
        raw = fourcov.score_batch(kernel, enrolls, tests, trials)
        cohorts = _cohort_set(*coh, pre1, pre2, 400)
        return scorenorm.snorm_batch(kernel, cohorts, enrolls, tests, raw)

    # pooled system: one model, pooled cohorts, all trials
    kernel_p = fourcov.build_kernel(model_p)
    enrolls_p, tests_p = _eval_vectors(ev_a[0] + ev_b[0], ev_a[1] + ev_b[1], pre1_p, pre2_p)
    raw_p = fourcov.score_batch(kernel_p, enrolls_p, tests_p, merged_trials)
    cohorts_p = _cohort_set(co_a[0] + co_b[0], co_a[1] + co_b[1], pre1_p, pre2_p, 400)
    pooled = scorenorm.snorm_batch(kernel_p, cohorts_p, enrolls_p, tests_p, raw_p)
    eer_pooled = metrics.compute_eer(pooled.values(), labels)

    # routed system: per-condition pipeline with per-condition calibration
    cal_a = calibration.fit_calibration(
        condition_scores(model_a, pre1_a, pre2_a, co_a, dv_a, _make_trials(*dv_a, 60, 31)),
        _make_trials(*dv_a, 60, 31),
    )
    cal_b = calibration.fit_calibration(
        condition_scores(model_b, pre1_b, pre2_b, co_b, dv_b, _make_trials(*dv_b, 60, 32)),
        _make_trials(*dv_b, 60, 32),
    )
    routed_a = calibration.apply_calibration(
        cal_a, condition_scores(model_a, pre1_a, pre2_a, co_a, ev_a, trials_a)
    )
    routed_b = calibration.apply_calibration(
        cal_b, condition_scores(model_b, pre1_b, pre2_b, co_b, ev_b, trials_b)
    )
    routed_values = np.concatenate([routed_a.values(), routed_b.values()])
    eer_routed = metrics.compute_eer(routed_values, labels)

    _ELAPSED["routing"] = time.perf_counter() - start
    assert eer_routed <= eer_pooled, (
        f"routing EER {100 * eer_routed:.2f}% > pooled {100 * eer_pooled:.2f}%"
    )
    total = _ELAPSED.get("benchmark", 0.0) + _ELAPSED["routing"]
    assert total < 300.0, f"criterion 5 total runtime {total:.1f}s exceeds 5 minutes"


@criterion(6, "S-norm affine invariance")
def test_criterion_6_snorm_affine_invariance():
    rng = np.random.default_rng(606)
    truth = random_truth(rng, 8, 3, 3)
    kernel = fourcov.build_kernel(truth.as_fourcov())
    transformed = ScoringKernel(
        kernel.enroll_mean, kernel.test_mean, 3.0 * kernel.weights, 3.0 * kernel.offset + 7.0
    )
    cohorts = scorenorm.CohortSet(
        tuple(Embedding(f"ce{i}", truth.enroll_mean + rng.standard_normal(8)) for i in range(60)),
        tuple(Embedding(f"ct{i}", truth.test_mean + rng.standard_normal(8)) for i in range(60)),
        None,
    )
    enrolls = [Embedding(f"e{i}", truth.enroll_mean + rng.standard_normal(8)) for i in range(25)]
    tests = [Embedding(f"t{j}", truth.test_mean + rng.standard_normal(8)) for j in range(40)]
    trials = TrialList(tuple(Trial(f"e{i}", f"t{j}") for i in range(25) for j in range(40)))
    assert len(trials) == 1000
    raw = fourcov.score_batch(kernel, enrolls, tests, trials)
    raw_scaled = fourcov.score_batch(transformed, enrolls, tests, trials)
    np.testing.assert_allclose(raw_scaled.values(), 3.0 * raw.values() + 7.0, atol=1e-9)
    base = scorenorm.snorm_batch(kernel, cohorts, enrolls, tests, raw)
    scaled = scorenorm.snorm_batch(transformed, cohorts, enrolls, tests, raw_scaled)
    worst = np.abs(base.values() - scaled.values()).max()
    assert worst < 1e-10, f"affine invariance violated by {worst:.3e}"


@criterion(7, "metrics match brute-force threshold enumeration")
def test_criterion_7_metrics_oracle():
    rng = np.random.default_rng(707)
    params = metrics.DcfParams(0.05, 5.0, 1.0)
    for case in range(50):
        n = int(rng.integers(10, 1001))
        scores = rng.standard_normal(n)
        if case % 3 == 0:
            scores = np.round(scores, 1)  # force ties
        labels = rng.uniform(size=n) < rng.uniform(0.2, 0.8)
        labels[0], labels[1] = True, False
        assert metrics.compute_eer(scores, labels) == oracle_eer(scores, labels)
        assert metrics.compute_min_dcf(scores, labels, params) == oracle_min_dcf(
            scores, labels, params
        )
        assert metrics.det_points(scores, labels) == oracle_points(scores, labels)


@criterion(8, "calibration identity on exact-LLR scores")
def test_criterion_8_calibration_sanity():
    cfg = synth.GenConfig(
        dim=10, enroll_rank=3, test_rank=3, n_speakers=3000,
        enroll_segments=1, test_segments=1, seed=808, snr=1.0,
    )
    enroll_groups, test_groups, truth = synth.sample_dataset(cfg)
    entries, trial_entries = [], []
    for i, (ge, gt) in enumerate(zip(enroll_groups, test_groups)):
        w_e = ge.members[0].vector
        entries.append(ScoredTrial(ge.speaker_id, gt.members[0].id,
                                   synth.true_llr(truth, w_e, gt.members[0].vector)))
        trial_entries.append(Trial(ge.speaker_id, gt.members[0].id, True))
        other = test_groups[(i + 19) % len(test_groups)].members[0]
        entries.append(ScoredTrial(ge.speaker_id, other.id, synth.true_llr(truth, w_e, other.vector)))
        trial_entries.append(Trial(ge.speaker_id, other.id, False))
    scores = ScoreSet(tuple(entries))
    trials = TrialList(tuple(trial_entries))
    model = calibration.fit_calibration(scores, trials)
    assert abs(model.scale - 1.0) < 0.1, f"scale {model.scale:.3f}"
    assert abs(model.offset) < 0.1, f"offset {model.offset:.3f}"
    params = metrics.DcfParams()
    before = metrics.compute_min_dcf(scores, trials, params)
    after = metrics.compute_min_dcf(calibration.apply_calibration(model, scores), trials, params)
    assert abs(before - after) < 1e-12


@criterion(9, "seeded CLI pipeline is bit-identical across runs")
def test_criterion_9_cli_determinism(tmp_path, capsys):
    artifacts = []
    for run in ("first", "second"):
        base = tmp_path / run
        paths = build_bundle(base, seed=909)
        raw, normalized, calfile, final = score_pipeline(paths, base)
        capsys.readouterr()
        assert invoke("evaluate", "--scores", final, "--trials", paths["eval.trials"]) == 0
        metric_lines = capsys.readouterr().out
        artifacts.append(
            (
                open(raw, "rb").read(),
                open(normalized, "rb").read(),
                open(calfile, "rb").read(),
                open(final, "rb").read(),
                metric_lines,
            )
        )
    assert artifacts[0] == artifacts[1]
