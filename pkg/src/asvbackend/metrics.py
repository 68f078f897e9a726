"""Verification metrics: EER, minimum normalized DCF and DET points.

All three are computed from the same ROC staircase. A trial is accepted
when its score is >= the threshold; thresholds sit midway between
consecutive distinct scores, plus accept-all and reject-all sentinels.
This makes every metric deterministic under score ties and invariant
under strictly increasing score transforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ScoreSet, TrialList
from .exceptions import MetricError, ParameterError


@dataclass(frozen=True)
class DcfParams:
    """Detection cost model: target prior and miss/false-alarm costs."""

    p_target: float = 0.01
    c_miss: float = 10.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ParameterError(f"p_target must be in (0, 1), got {self.p_target}")
        if self.c_miss <= 0.0 or self.c_fa <= 0.0:
            raise ParameterError("c_miss and c_fa must be positive")

    @property
    def normalizer(self) -> float:
        return min(self.p_target * self.c_miss, (1.0 - self.p_target) * self.c_fa)


def _scores_and_labels(scores, labels):
    """Accept (ScoreSet, TrialList) or two parallel arrays."""
    if isinstance(scores, ScoreSet):
        if not isinstance(labels, TrialList):
            raise ParameterError("a ScoreSet must be paired with a labeled TrialList")
        label_map = {}
        for t in labels:
            if t.is_target is None:
                raise MetricError(f"trial {t.enroll_id} {t.test_id} carries no label")
            label_map[(t.enroll_id, t.test_id)] = t.is_target
        values, flags = [], []
        for e in scores:
            key = (e.enroll_id, e.test_id)
            if key not in label_map:
                raise MetricError(f"no label for scored trial {key[0]} {key[1]}")
            values.append(e.score)
            flags.append(label_map[key])
        return np.asarray(values, dtype=np.float64), np.asarray(flags, dtype=bool)
    values = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(labels, dtype=bool)
    if values.shape != flags.shape or values.ndim != 1:
        raise ParameterError(
            f"scores and labels must be parallel 1-D arrays, got {values.shape} and {flags.shape}"
        )
    return values, flags


def _roc_points(values: np.ndarray, flags: np.ndarray):
    """(P_fa, P_miss) at every distinct-score boundary, accept-count order.

    Starts at the reject-all point (0, 1) and ends at accept-all (1, 0).
    """
    n_tar = int(flags.sum())
    n_non = int(flags.size - n_tar)
    if n_tar == 0 or n_non == 0:
        raise MetricError(
            f"need both target and nontarget trials, got {n_tar} targets / {n_non} nontargets"
        )
    order = np.argsort(-values, kind="stable")
    sorted_values = values[order]
    sorted_flags = flags[order]
    tar_cum = np.concatenate([[0], np.cumsum(sorted_flags)])
    non_cum = np.concatenate([[0], np.cumsum(~sorted_flags)])
    # valid accept-counts: 0, n, and every i where score i-1 > score i
    boundary = np.concatenate(
        [[True], sorted_values[:-1] > sorted_values[1:], [True]]
    )
    idx = np.flatnonzero(boundary)
    p_fa = non_cum[idx] / n_non
    p_miss = (n_tar - tar_cum[idx]) / n_tar
    return p_fa, p_miss


def compute_eer(scores, labels) -> float:
    """Equal error rate via linear interpolation at the ROC crossing."""
    values, flags = _scores_and_labels(scores, labels)
    p_fa, p_miss = _roc_points(values, flags)
    diff = p_miss - p_fa
    k = int(np.argmax(diff <= 0.0))
    if diff[k] == 0.0:
        return float(p_fa[k])
    t = (p_miss[k - 1] - p_fa[k - 1]) / (
        (p_fa[k] - p_fa[k - 1]) - (p_miss[k] - p_miss[k - 1])
    )
    return float(p_fa[k - 1] + t * (p_fa[k] - p_fa[k - 1]))


def compute_min_dcf(scores, labels, params: DcfParams = DcfParams()) -> float:
    """Minimum normalized detection cost over all thresholds."""
    values, flags = _scores_and_labels(scores, labels)
    p_fa, p_miss = _roc_points(values, flags)
    costs = (
        params.p_target * params.c_miss * p_miss
        + (1.0 - params.p_target) * params.c_fa * p_fa
    ) / params.normalizer
    return float(costs.min())


def det_points(scores, labels) -> list[tuple[float, float]]:
    """The (P_fa, P_miss) staircase from reject-all (0,1) to accept-all (1,0)."""
    values, flags = _scores_and_labels(scores, labels)
    p_fa, p_miss = _roc_points(values, flags)
    return list(zip(p_fa.tolist(), p_miss.tolist()))
