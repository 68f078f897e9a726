"""Adaptive symmetric score normalization with side-specific cohorts.

A raw trial score is z-normalized twice — once against the scores of the
enrollment vector versus a test-side impostor cohort, once against an
enrollment-side impostor cohort versus the test vector — and the two
normalized values are averaged. Statistics can be restricted to the
top-k highest cohort scores per side (adaptive variant); values tied at
the k-th score are all kept so selection is order-independent.

Cohort embeddings must live in the same preprocessed space as the trial
vectors; enrollment-side cohort entries may themselves be aggregated
multi-segment pseudo-models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Embedding, ScoredTrial, ScoreSet, stack_embeddings
from .exceptions import NormalizationError, ParameterError, UnknownIdError
from .fourcov import ScoringKernel, score_pair_matrix

DEFAULT_TOP_K = 400

# Cohort-score spreads this small cannot define a meaningful z-scale.
MIN_COHORT_STD = 1e-12


@dataclass(frozen=True)
class CohortSet:
    """Impostor cohorts for the two trial sides, plus the top-k setting."""

    enroll_cohort: tuple[Embedding, ...]
    test_cohort: tuple[Embedding, ...]
    top_k: int | None = DEFAULT_TOP_K

    def __post_init__(self):
        enroll = tuple(self.enroll_cohort)
        test = tuple(self.test_cohort)
        if not enroll or not test:
            raise ParameterError("both cohorts must be non-empty")
        if self.top_k is not None:
            if self.top_k < 1:
                raise ParameterError(f"top_k must be positive, got {self.top_k}")
            limit = min(len(enroll), len(test))
            if self.top_k > limit:
                raise ParameterError(
                    f"top_k {self.top_k} exceeds the smaller cohort size {limit}"
                )
        object.__setattr__(self, "enroll_cohort", enroll)
        object.__setattr__(self, "test_cohort", test)

    def enroll_matrix(self) -> np.ndarray:
        return stack_embeddings(list(self.enroll_cohort))

    def test_matrix(self) -> np.ndarray:
        return stack_embeddings(list(self.test_cohort))


def top_score_stats(scores: np.ndarray, top_k: int | None, side: str):
    """Mean and population std of the selected cohort scores.

    With numeric top_k, the k highest scores are selected; ties at the
    boundary are all kept.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if top_k is not None and top_k < scores.size:
        boundary = np.partition(scores, scores.size - top_k)[scores.size - top_k]
        selected = scores[scores >= boundary]
    else:
        selected = scores
    mean = float(selected.mean())
    std = float(selected.std())
    if std < MIN_COHORT_STD:
        raise NormalizationError(
            f"{side} cohort scores are degenerate (std {std:.3e}); "
            "cannot z-normalize against them"
        )
    return mean, std


def combine_normalized(raw: float, stats_vs_test_cohort, stats_vs_enroll_cohort) -> float:
    """Average of the two one-sided z-normalizations of a raw score."""
    mu1, sd1 = stats_vs_test_cohort
    mu2, sd2 = stats_vs_enroll_cohort
    return 0.5 * (raw - mu1) / sd1 + 0.5 * (raw - mu2) / sd2


def snorm(
    kernel: ScoringKernel,
    cohorts: CohortSet,
    w_e: np.ndarray,
    w_t: np.ndarray,
    raw: float,
) -> float:
    """Normalize one raw trial score against both cohorts.

    Slot order is preserved when scoring cohorts: enrollment-side cohort
    entries always occupy the enrollment slot and test-side entries the
    test slot, which matters because the kernel is asymmetric.
    """
    vs_test_cohort = score_pair_matrix(kernel, w_e, cohorts.test_matrix())[0]
    vs_enroll_cohort = score_pair_matrix(kernel, cohorts.enroll_matrix(), w_t)[:, 0]
    stats_vs_test = top_score_stats(vs_test_cohort, cohorts.top_k, "test-side")
    stats_vs_enroll = top_score_stats(vs_enroll_cohort, cohorts.top_k, "enroll-side")
    return combine_normalized(float(raw), stats_vs_test, stats_vs_enroll)


def snorm_batch(
    kernel: ScoringKernel,
    cohorts: CohortSet,
    enrolls: list[Embedding],
    tests: list[Embedding],
    scores: ScoreSet,
    threads: int = 1,
) -> ScoreSet:
    """Normalize a score set, computing each side's cohort statistics once.

    Statistics for a given enrollment (or test) vector are shared by
    every trial that uses it, so the batch matches per-trial `snorm`
    while scoring each vector against each cohort exactly once.
    """
    del threads  # cohort matrices are scored in one vectorized pass
    enroll_map = {e.id: e.vector for e in enrolls}
    test_map = {t.id: t.vector for t in tests}

    enroll_ids = []
    test_ids = []
    seen_e: set[str] = set()
    seen_t: set[str] = set()
    for entry in scores:
        if entry.enroll_id not in seen_e:
            seen_e.add(entry.enroll_id)
            enroll_ids.append(entry.enroll_id)
        if entry.test_id not in seen_t:
            seen_t.add(entry.test_id)
            test_ids.append(entry.test_id)

    missing = [i for i in enroll_ids if i not in enroll_map]
    missing += [i for i in test_ids if i not in test_map]
    if missing:
        raise UnknownIdError(f"scores reference unknown embedding id '{missing[0]}'")

    enroll_rows = np.stack([enroll_map[i] for i in enroll_ids]) if enroll_ids else np.empty((0, kernel.dim))
    test_rows = np.stack([test_map[i] for i in test_ids]) if test_ids else np.empty((0, kernel.dim))

    vs_test_cohort = score_pair_matrix(kernel, enroll_rows, cohorts.test_matrix())
    vs_enroll_cohort = score_pair_matrix(kernel, cohorts.enroll_matrix(), test_rows)

    enroll_stats = {}
    for i, eid in enumerate(enroll_ids):
        try:
            enroll_stats[eid] = top_score_stats(vs_test_cohort[i], cohorts.top_k, "test-side")
        except NormalizationError as exc:
            raise NormalizationError(f"{exc} (enrollment '{eid}')") from None
    test_stats = {}
    for j, tid in enumerate(test_ids):
        try:
            test_stats[tid] = top_score_stats(vs_enroll_cohort[:, j], cohorts.top_k, "enroll-side")
        except NormalizationError as exc:
            raise NormalizationError(f"{exc} (test '{tid}')") from None

    entries = tuple(
        ScoredTrial(
            e.enroll_id,
            e.test_id,
            combine_normalized(e.score, enroll_stats[e.enroll_id], test_stats[e.test_id]),
        )
        for e in scores
    )
    return ScoreSet(entries)
