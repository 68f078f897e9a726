"""Command-line pipeline: synthesize, train, score, normalize, calibrate,
route and evaluate — one subcommand per stage, composable through files.

Every subcommand exits 0 on success with outputs written atomically, and
nonzero with a single-line `asvbackend: <kind>: <message>` on stderr
otherwise. Error kinds map to stable exit codes (see EXIT_CODES).
The default thread count comes from ASVBACKEND_THREADS when --threads is
not given.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import calibration as cal
from . import data, fourcov, metrics, modelio, plda, routing, scorenorm, synth
from .exceptions import (
    BackendError,
    CalibrationFitError,
    ConfigError,
    DimensionMismatchError,
    DomainError,
    FileFormatError,
    MetricError,
    NormalizationError,
    NumericalError,
    ParameterError,
    RoutingError,
    UnknownIdError,
)

EXIT_CODES = {
    FileNotFoundError: 3,
    FileFormatError: 4,
    DimensionMismatchError: 5,
    ParameterError: 6,
    DomainError: 6,
    NumericalError: 7,
    UnknownIdError: 8,
    RoutingError: 8,
    ConfigError: 8,
    NormalizationError: 9,
    CalibrationFitError: 9,
    MetricError: 9,
    BackendError: 10,
}

_ERROR_KINDS = {
    FileNotFoundError: "missing-file",
    FileFormatError: "file-format",
    DimensionMismatchError: "dimension",
    ParameterError: "parameter",
    DomainError: "domain",
    NumericalError: "numerical",
    UnknownIdError: "unknown-id",
    RoutingError: "routing",
    ConfigError: "config",
    NormalizationError: "normalization",
    CalibrationFitError: "calibration",
    MetricError: "metric",
    BackendError: "backend",
}


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("ASVBACKEND_THREADS", "1")))
    except ValueError:
        return 1


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise FileNotFoundError(p)


def _speaker_map(path):
    return data.read_id_map(path) if path else None


def _aggregated_training_groups(rows, speaker_map, pre, aggregate):
    """Per-speaker groups of preprocessed vectors, optionally chunk-averaged.

    With `aggregate` = N, consecutive chunks of N segments per speaker
    each become one unit-norm average (a pseudo enrollment model).
    """
    groups = data.group_by_speaker(rows, speaker_map)
    out = []
    for group in groups:
        if aggregate:
            out.append(plda.chunked_enroll_averages(group, pre, aggregate))
        else:
            transformed = pre.apply(group.matrix())
            out.append(
                data.SpeakerGroup(
                    group.speaker_id,
                    tuple(
                        data.Embedding(m.id, row)
                        for m, row in zip(group.members, transformed)
                    ),
                )
            )
    return out


def _cmd_synth(args) -> int:
    master = np.random.SeedSequence(args.seed)
    train_seed, eval_seed, cohort_seed, trial_seed = (
        s.generate_state(1)[0] for s in master.spawn(4)
    )
    eval_jitter = args.jitter if args.eval_jitter is None else args.eval_jitter
    common = dict(
        dim=args.dim,
        enroll_rank=args.rank,
        test_rank=args.test_rank or args.rank,
        snr=args.snr,
        coupling_strength=args.coupling,
        test_noise_inflation=args.kappa,
        test_rotation=args.rotation,
        test_mean_shift=args.mean_shift,
        augment_copies=args.augment_copies,
    )
    train_cfg = synth.GenConfig(
        n_speakers=args.train_speakers,
        enroll_segments=args.enroll_segs * args.train_enroll_samples,
        test_segments=args.train_test_segs,
        seed=int(train_seed),
        speaker_prefix=args.id_prefix + "tr",
        test_noise_jitter=args.jitter,
        **common,
    )
    truth = synth.make_ground_truth(train_cfg)
    train_enroll, train_test, _ = synth.sample_dataset(train_cfg)
    eval_cfg = synth.GenConfig(
        n_speakers=args.eval_speakers,
        enroll_segments=args.enroll_segs,
        test_segments=args.eval_test_segs,
        seed=int(eval_seed),
        speaker_prefix=args.id_prefix + "ev",
        truth=truth,
        test_noise_jitter=eval_jitter,
        **common,
    )
    eval_enroll, eval_test, _ = synth.sample_dataset(eval_cfg)

    os.makedirs(args.out_dir, exist_ok=True)

    def path(name):
        return os.path.join(args.out_dir, name)

    data.write_embeddings(path("train_enroll.embs"), [m for g in train_enroll for m in g.members])
    data.write_embeddings(path("train_test.embs"), [m for g in train_test for m in g.members])

    # Eval enrollment rows all carry the enrollment-model id; the scoring
    # stage aggregates rows sharing an id.
    enroll_rows = []
    enroll_meta = {}
    for group in eval_enroll:
        model_id = f"{group.speaker_id}-model"
        enroll_meta[model_id] = str(len(group.members))
        enroll_rows += [data.Embedding(model_id, m.vector) for m in group.members]
    data.write_embeddings(path("eval_enroll.embs"), enroll_rows)
    test_rows = [m for g in eval_test for m in g.members]
    data.write_embeddings(path("eval_test.embs"), test_rows)
    data.write_id_map(path("enroll_meta.txt"), enroll_meta)
    data.write_id_map(path("test_meta.txt"), {t.id: args.language for t in test_rows})

    rng = np.random.default_rng(int(trial_seed))
    trials = []
    test_ids = [t.id for t in test_rows]
    for group in eval_enroll:
        model_id = f"{group.speaker_id}-model"
        for member in (m for g in eval_test if g.speaker_id == group.speaker_id for m in g.members):
            trials.append(data.Trial(model_id, member.id, True))
        impostors = [tid for tid in test_ids if data.speaker_of(tid) != group.speaker_id]
        picked = rng.choice(len(impostors), size=min(args.nontargets, len(impostors)), replace=False)
        for idx in sorted(picked):
            trials.append(data.Trial(model_id, impostors[idx], False))
    data.write_trials(path("eval.trials"), data.TrialList(tuple(trials)))

    if args.cohort_speakers > 0:
        cohort_cfg = synth.GenConfig(
            n_speakers=args.cohort_speakers,
            enroll_segments=args.enroll_segs,
            test_segments=1,
            seed=int(cohort_seed),
            speaker_prefix=args.id_prefix + "coh",
            truth=truth,
            test_noise_jitter=eval_jitter,
            **common,
        )
        cohort_enroll, cohort_test, _ = synth.sample_dataset(cohort_cfg)
        rows = []
        for group in cohort_enroll:
            rows += [data.Embedding(f"{group.speaker_id}-cmodel", m.vector) for m in group.members]
        data.write_embeddings(path("cohort_enroll.embs"), rows)
        data.write_embeddings(
            path("cohort_test.embs"), [m for g in cohort_test for m in g.members]
        )

    modelio.save_ground_truth(path("truth.npz"), truth)
    print(f"wrote synthetic dataset to {args.out_dir}")
    return 0


def _cmd_preprocess(args) -> int:
    _require_files(args.embeddings, args.transform)
    rows = data.read_embeddings(args.embeddings)
    pre = plda.fit_preprocessor(rows)
    modelio.save_preprocessor(args.out, pre)
    if args.transform:
        source = data.read_embeddings(args.transform)
        transformed = [data.Embedding(e.id, pre.apply(e.vector)) for e in source]
        data.write_embeddings(args.transformed_out or args.transform + ".pre", transformed)
    print(f"wrote preprocessor to {args.out}")
    return 0


def _cmd_train_plda(args) -> int:
    _require_files(args.embeddings, args.speaker_map, args.pre)
    rows = data.read_embeddings(args.embeddings)
    pre = modelio.load_preprocessor(args.pre) if args.pre else plda.fit_preprocessor(rows)
    groups = _aggregated_training_groups(rows, _speaker_map(args.speaker_map), pre, args.aggregate)
    model = plda.train_plda(groups, rank=args.rank, iterations=args.iters)
    modelio.save_plda_side(args.out, model, pre)
    print(f"wrote PLDA side model to {args.out} (dim {model.dim}, rank {model.rank})")
    return 0


def _cmd_fit_fourcov(args) -> int:
    _require_files(
        args.enroll_model,
        args.test_model,
        args.enroll_embeddings,
        args.test_embeddings,
        args.speaker_map_enroll,
        args.speaker_map_test,
    )
    model1, pre1 = modelio.load_plda_side(args.enroll_model)
    model2, pre2 = modelio.load_plda_side(args.test_model)
    rows1 = data.read_embeddings(args.enroll_embeddings)
    rows2 = data.read_embeddings(args.test_embeddings)
    groups1 = {
        g.speaker_id: g
        for g in _aggregated_training_groups(
            rows1, _speaker_map(args.speaker_map_enroll), pre1, args.enroll_aggregate
        )
    }
    groups2 = {
        g.speaker_id: g
        for g in _aggregated_training_groups(
            rows2, _speaker_map(args.speaker_map_test), pre2, 0
        )
    }
    shared = sorted(set(groups1) & set(groups2))
    if not shared:
        raise ParameterError("no speakers shared between the two training sets")
    pairs = [(groups1[s], groups2[s]) for s in shared]
    model = fourcov.fit_coupling(model1, model2, pairs)
    modelio.save_fourcov(args.out, model, pre1, pre2)
    print(f"wrote two-sided model to {args.out} ({len(shared)} shared speakers)")
    return 0


def _cmd_interpolate(args) -> int:
    _require_files(args.in_domain, args.out_domain)
    model_in, pre_in = modelio.load_plda_side(args.in_domain)
    model_out, pre_out = modelio.load_plda_side(args.out_domain)
    combined = plda.interpolate_plda(model_in, model_out, args.alpha)
    pre = pre_in if args.pre == "from-in" else pre_out
    modelio.save_plda_side(args.out, combined, pre)
    print(f"wrote interpolated model to {args.out} (alpha {args.alpha})")
    return 0


def _prepare_eval_vectors(bundle_path, enroll_path, test_path):
    model, pre1, pre2 = modelio.load_fourcov(bundle_path)
    enroll_rows = data.read_embeddings(enroll_path)
    test_rows = data.read_embeddings(test_path)
    enrolls = [plda.enroll_average(g, pre1) for g in data.group_by_id(enroll_rows)]
    tests = [data.Embedding(t.id, pre2.apply(t.vector)) for t in test_rows]
    return model, enrolls, tests


def _cmd_score(args) -> int:
    _require_files(args.model, args.enroll, args.test, args.trials)
    model, enrolls, tests = _prepare_eval_vectors(args.model, args.enroll, args.test)
    trials = data.read_trials(args.trials)
    kernel = fourcov.build_kernel(model)
    scores = fourcov.score_batch(kernel, enrolls, tests, trials, threads=args.threads)
    data.write_scores(scores, args.out)
    print(f"wrote {len(scores)} scores to {args.out}")
    return 0


def _cmd_snorm(args) -> int:
    _require_files(
        args.model, args.scores, args.enroll, args.test, args.cohort_enroll, args.cohort_test
    )
    model, enrolls, tests = _prepare_eval_vectors(args.model, args.enroll, args.test)
    _, pre1, pre2 = modelio.load_fourcov(args.model)
    scores = data.read_scores(args.scores)
    cohort_enroll_rows = data.read_embeddings(args.cohort_enroll)
    cohort_test_rows = data.read_embeddings(args.cohort_test)
    top_k = None if args.top_k == "all" else int(args.top_k)
    cohorts = scorenorm.CohortSet(
        tuple(plda.enroll_average(g, pre1) for g in data.group_by_id(cohort_enroll_rows)),
        tuple(data.Embedding(e.id, pre2.apply(e.vector)) for e in cohort_test_rows),
        top_k,
    )
    kernel = fourcov.build_kernel(model)
    normalized = scorenorm.snorm_batch(kernel, cohorts, enrolls, tests, scores)
    data.write_scores(normalized, args.out)
    print(f"wrote {len(normalized)} normalized scores to {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    if (args.trials is None) == (args.model is None):
        raise ParameterError("pass exactly one of --trials (fit) or --model (apply)")
    _require_files(args.scores, args.trials, args.model)
    scores = data.read_scores(args.scores)
    if args.trials:
        trials = data.read_trials(args.trials)
        model = cal.fit_calibration(scores, trials)
        cal.write_calibration(args.out, model, args.condition)
        print(f"wrote calibration to {args.out} (scale {model.scale:.6g}, offset {model.offset:.6g})")
    else:
        model, _ = cal.read_calibration(args.model)
        data.write_scores(cal.apply_calibration(model, scores), args.out)
        print(f"wrote {len(scores)} calibrated scores to {args.out}")
    return 0


def _cmd_route_score(args) -> int:
    _require_files(args.config, args.enroll, args.test, args.trials)
    config = routing.load_routing_config(args.config, threads=args.threads)
    enrolls = data.read_embeddings(args.enroll)
    tests = data.read_embeddings(args.test)
    trials = data.read_trials(args.trials)
    scores = routing.route_and_score(config, enrolls, tests, trials)
    data.write_scores(scores, args.out)
    print(f"wrote {len(scores)} routed scores to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    _require_files(args.scores, args.trials)
    scores = data.read_scores(args.scores)
    trials = data.read_trials(args.trials)
    params = metrics.DcfParams(args.p_target, args.c_miss, args.c_fa)
    eer = metrics.compute_eer(scores, trials)
    min_dcf = metrics.compute_min_dcf(scores, trials, params)
    print(f"EER% {100.0 * eer:.2f}")
    print(f"minDCF {min_dcf:.4f}")
    if args.det_out:
        with data.atomic_write(args.det_out) as fh:
            fh.write("# p_fa p_miss\n")
            for p_fa, p_miss in metrics.det_points(scores, trials):
                fh.write(f"{repr(p_fa)} {repr(p_miss)}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asvbackend",
        description="Speaker-verification back-end over fixed-dimension embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic two-sided dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--test-rank", type=int, default=None)
    p.add_argument("--train-speakers", type=int, default=500)
    p.add_argument("--eval-speakers", type=int, default=200)
    p.add_argument("--cohort-speakers", type=int, default=0)
    p.add_argument("--enroll-segs", type=int, default=3, help="segments per enrollment sample")
    p.add_argument(
        "--train-enroll-samples",
        type=int,
        default=2,
        help="enrollment-style samples per training speaker",
    )
    p.add_argument("--train-test-segs", type=int, default=3)
    p.add_argument("--eval-test-segs", type=int, default=2)
    p.add_argument("--snr", type=float, default=1.0)
    p.add_argument("--coupling", type=float, default=0.9)
    p.add_argument("--kappa", type=float, default=1.0, help="test-side residual inflation")
    p.add_argument("--rotation", type=float, default=0.0, help="test loading rotation (radians)")
    p.add_argument("--mean-shift", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0, help="per-segment test noise jitter")
    p.add_argument(
        "--eval-jitter", type=float, default=None,
        help="jitter for eval and cohort sets (defaults to --jitter)",
    )
    p.add_argument("--augment-copies", type=int, default=0)
    p.add_argument("--nontargets", type=int, default=50, help="impostor tests per enrollment")
    p.add_argument("--language", choices=routing.TEST_LANGUAGES, default="primary")
    p.add_argument("--id-prefix", default="")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="fit a centering/whitening transform")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="preprocessor bundle (.npz) to write")
    p.add_argument("--transform", default=None, help="optionally apply the chain to this file")
    p.add_argument("--transformed-out", default=None)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train-plda", help="fit preprocessing and PLDA for one side")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--speaker-map", default=None, help="two-column id->speaker file")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--aggregate", type=int, default=0, help="average consecutive chunks of N segments")
    p.add_argument("--pre", default=None, help="reuse an existing preprocessor bundle")
    p.add_argument("--out", required=True, help="side model bundle (.npz) to write")
    p.set_defaults(func=_cmd_train_plda)

    p = sub.add_parser("fit-fourcov", help="fit the factor coupling between two side models")
    p.add_argument("--enroll-model", required=True)
    p.add_argument("--test-model", required=True)
    p.add_argument("--enroll-embeddings", required=True)
    p.add_argument("--test-embeddings", required=True)
    p.add_argument("--enroll-aggregate", type=int, default=0)
    p.add_argument("--speaker-map-enroll", default=None)
    p.add_argument("--speaker-map-test", default=None)
    p.add_argument("--out", required=True, help="two-sided model bundle (.npz) to write")
    p.set_defaults(func=_cmd_fit_fourcov)

    p = sub.add_parser("interpolate", help="convex-combine two PLDA side models")
    p.add_argument("--in-domain", required=True)
    p.add_argument("--out-domain", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--pre", choices=("from-in", "from-out"), default="from-in")
    p.add_argument("--out", required=True, help="interpolated side model bundle to write")
    p.set_defaults(func=_cmd_interpolate)

    p = sub.add_parser("score", help="score trials with a two-sided model bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--enroll", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True, help="raw score file to write")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("snorm", help="adaptive symmetric score normalization")
    p.add_argument("--model", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--enroll", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--cohort-enroll", required=True)
    p.add_argument("--cohort-test", required=True)
    p.add_argument("--top-k", default=str(scorenorm.DEFAULT_TOP_K), help="integer or 'all'")
    p.add_argument("--out", required=True, help="normalized score file to write")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=_cmd_snorm)

    p = sub.add_parser("calibrate", help="fit or apply an affine score calibration")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", default=None, help="labeled trials: fit mode")
    p.add_argument("--model", default=None, help="calibration file: apply mode")
    p.add_argument("--condition", default=None)
    p.add_argument("--out", required=True, help="calibration file (fit) or calibrated scores (apply)")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("route-score", help="trial-dependent scoring per routing config")
    p.add_argument("--config", required=True)
    p.add_argument("--enroll", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True, help="merged calibrated score file to write")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=_cmd_route_score)

    p = sub.add_parser("evaluate", help="EER / minDCF (and optional DET points)")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--p-target", type=float, default=0.01)
    p.add_argument("--c-miss", type=float, default=10.0)
    p.add_argument("--c-fa", type=float, default=1.0)
    p.add_argument("--det-out", default=None, help="optional DET-point file to write")
    p.set_defaults(func=_cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"asvbackend: missing-file: {exc}", file=sys.stderr)
        return EXIT_CODES[FileNotFoundError]
    except BackendError as exc:
        for klass in type(exc).__mro__:
            if klass in EXIT_CODES:
                kind = _ERROR_KINDS[klass]
                print(f"asvbackend: {kind}: {exc}", file=sys.stderr)
                return EXIT_CODES[klass]
        raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
