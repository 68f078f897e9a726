"""Asymmetric two-sided scoring with coupled speaker factors.

Enrollment-side and test-side vectors get their own PLDA models; a
linear map with Gaussian residual ties the two speaker factors together:

    y_test = coupling @ y_enroll + eta,    eta ~ N(0, coupling_noise_cov).

Under the same-speaker hypothesis the stacked pair (w_enroll, w_test) is
jointly Gaussian with a cross-covariance induced by that map; under the
different-speakers hypothesis the sides are independent. The trial score
is the exact log-likelihood ratio of the two joint densities, evaluated
through a precomputed quadratic kernel plus the log-determinant constant
(so scores are proper LLRs, not LLRs up to an additive constant).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import Embedding, ScoredTrial, ScoreSet, SpeakerGroup, TrialList
from .exceptions import (
    DimensionMismatchError,
    NumericalError,
    ParameterError,
    UnknownIdError,
)
from .plda import PldaModel, speaker_factor


@dataclass(frozen=True)
class FourCovModel:
    """Two side-specific PLDA models plus the factor coupling between them."""

    enroll_plda: PldaModel
    test_plda: PldaModel
    coupling: np.ndarray            # (r_test, r_enroll)
    coupling_noise_cov: np.ndarray  # (r_test, r_test), symmetric PSD

    def __post_init__(self):
        coupling = np.asarray(self.coupling, dtype=np.float64)
        noise = np.asarray(self.coupling_noise_cov, dtype=np.float64)
        r1, r2 = self.enroll_plda.rank, self.test_plda.rank
        if coupling.shape != (r2, r1):
            raise DimensionMismatchError(
                f"coupling shape {coupling.shape} does not match ranks ({r2}, {r1})"
            )
        if noise.shape != (r2, r2):
            raise DimensionMismatchError(
                f"coupling noise covariance shape {noise.shape} does not match rank {r2}"
            )
        scale = max(1.0, float(np.abs(noise).max()))
        if not np.allclose(noise, noise.T, rtol=0.0, atol=1e-10 * scale):
            raise ParameterError("coupling noise covariance must be symmetric")
        noise = (noise + noise.T) / 2.0
        if noise.size and np.linalg.eigvalsh(noise)[0] < -1e-10 * scale:
            raise ParameterError("coupling noise covariance must be positive semi-definite")
        if self.enroll_plda.dim != self.test_plda.dim:
            raise DimensionMismatchError(
                f"side dimensions differ: {self.enroll_plda.dim} vs {self.test_plda.dim}"
            )
        object.__setattr__(self, "coupling", coupling)
        object.__setattr__(self, "coupling_noise_cov", noise)

    @property
    def dim(self) -> int:
        return self.enroll_plda.dim


@dataclass(frozen=True)
class ScoringKernel:
    """Precomputed quadratic form for trial scoring.

    score(w_e, w_t) = -0.5 * z' W z + offset with z the stacked centered
    pair and W = inv(same_speaker_cov) - inv(independent_cov). The offset
    carries the log-determinant difference so the score is a true LLR.
    """

    enroll_mean: np.ndarray
    test_mean: np.ndarray
    weights: np.ndarray
    offset: float

    def __post_init__(self):
        enroll_mean = np.asarray(self.enroll_mean, dtype=np.float64)
        test_mean = np.asarray(self.test_mean, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        two_d = enroll_mean.size + test_mean.size
        if weights.shape != (two_d, two_d):
            raise DimensionMismatchError(
                f"kernel weights shape {weights.shape} does not match stacked dimension {two_d}"
            )
        scale = max(1.0, float(np.abs(weights).max()))
        if not np.allclose(weights, weights.T, rtol=0.0, atol=1e-10 * scale):
            raise ParameterError("kernel weights must be symmetric")
        object.__setattr__(self, "enroll_mean", enroll_mean)
        object.__setattr__(self, "test_mean", test_mean)
        object.__setattr__(self, "weights", (weights + weights.T) / 2.0)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def dim(self) -> int:
        return self.enroll_mean.size

    def blocks(self):
        d = self.dim
        return self.weights[:d, :d], self.weights[:d, d:], self.weights[d:, d:]


def _pd_inverse(matrix: np.ndarray, what: str):
    try:
        cho = scipy.linalg.cho_factor(matrix, lower=True)
    except (scipy.linalg.LinAlgError, ValueError):
        raise NumericalError(f"{what} is not positive definite") from None
    inverse = scipy.linalg.cho_solve(cho, np.eye(matrix.shape[0]))
    logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
    return inverse, logdet


def joint_covariances(model: FourCovModel):
    """Same-speaker and independent-speakers covariance of a stacked pair."""
    loadings1 = model.enroll_plda.speaker_loadings
    loadings2 = model.test_plda.speaker_loadings
    between1 = loadings1 @ loadings1.T
    between2 = loadings2 @ loadings2.T
    cross = loadings1 @ model.coupling.T @ loadings2.T
    test_factor_cov = model.coupling @ model.coupling.T + model.coupling_noise_cov
    same = np.block(
        [
            [between1 + model.enroll_plda.residual_cov, cross],
            [cross.T, loadings2 @ test_factor_cov @ loadings2.T + model.test_plda.residual_cov],
        ]
    )
    indep = scipy.linalg.block_diag(
        between1 + model.enroll_plda.residual_cov,
        between2 + model.test_plda.residual_cov,
    )
    return same, indep


def build_kernel(model: FourCovModel) -> ScoringKernel:
    """Materialize the scoring kernel (one 2d x 2d inverse difference)."""
    same, indep = joint_covariances(model)
    inv_same, logdet_same = _pd_inverse(same, "same-speaker joint covariance")
    inv_indep, logdet_indep = _pd_inverse(indep, "independent-speakers joint covariance")
    weights = inv_same - inv_indep
    offset = -0.5 * (logdet_same - logdet_indep)
    return ScoringKernel(model.enroll_plda.mean, model.test_plda.mean, weights, offset)


def symmetric_kernel(model: PldaModel) -> ScoringKernel:
    """Scoring kernel of the symmetric-PLDA collapse (identity coupling)."""
    collapsed = FourCovModel(model, model, np.eye(model.rank), np.zeros((model.rank, model.rank)))
    return build_kernel(collapsed)


def score_trial(kernel: ScoringKernel, w_e: np.ndarray, w_t: np.ndarray) -> float:
    """LLR score of one (enrollment, test) pair of preprocessed vectors.

    The two slots are not interchangeable: enrollment-side vectors must go
    first. With distinct side models, score(a, b) != score(b, a).
    """
    w_e = np.asarray(w_e, dtype=np.float64)
    w_t = np.asarray(w_t, dtype=np.float64)
    d = kernel.dim
    if w_e.shape != (d,) or w_t.shape != (d,):
        raise DimensionMismatchError(
            f"expected two vectors of dimension {d}, got {w_e.shape} and {w_t.shape}"
        )
    ee, et, tt = kernel.blocks()
    z_e = w_e - kernel.enroll_mean
    z_t = w_t - kernel.test_mean
    quad = z_e @ ee @ z_e + 2.0 * (z_e @ et @ z_t) + z_t @ tt @ z_t
    return float(-0.5 * quad + kernel.offset)


def score_pair_matrix(kernel: ScoringKernel, enroll_rows: np.ndarray, test_rows: np.ndarray) -> np.ndarray:
    """Score every enrollment row against every test row, (n, m) output."""
    ee, et, tt = kernel.blocks()
    z_e = np.atleast_2d(enroll_rows) - kernel.enroll_mean
    z_t = np.atleast_2d(test_rows) - kernel.test_mean
    quad_e = np.einsum("ij,jk,ik->i", z_e, ee, z_e)
    quad_t = np.einsum("ij,jk,ik->i", z_t, tt, z_t)
    cross = z_e @ et @ z_t.T
    return -0.5 * (quad_e[:, None] + 2.0 * cross + quad_t[None, :]) + kernel.offset


def _score_rows(kernel: ScoringKernel, z_e: np.ndarray, z_t: np.ndarray) -> np.ndarray:
    ee, et, tt = kernel.blocks()
    quad = (
        np.einsum("ij,jk,ik->i", z_e, ee, z_e)
        + 2.0 * np.einsum("ij,jk,ik->i", z_e, et, z_t)
        + np.einsum("ij,jk,ik->i", z_t, tt, z_t)
    )
    return -0.5 * quad + kernel.offset


def score_batch(
    kernel: ScoringKernel,
    enrolls: list[Embedding],
    tests: list[Embedding],
    trials: TrialList,
    threads: int = 1,
) -> ScoreSet:
    """Score a trial list; one aggregated enrollment vector per enroll_id.

    Output order matches the trial list. With threads > 1 the trial rows
    are chunked across a thread pool; chunking does not change the
    numeric results.
    """
    enroll_map = {e.id: e.vector for e in enrolls}
    test_map = {t.id: t.vector for t in tests}
    d = kernel.dim
    z_e = np.empty((len(trials), d))
    z_t = np.empty((len(trials), d))
    for i, trial in enumerate(trials):
        try:
            vec_e = enroll_map[trial.enroll_id]
        except KeyError:
            raise UnknownIdError(f"trial references unknown enrollment id '{trial.enroll_id}'") from None
        try:
            vec_t = test_map[trial.test_id]
        except KeyError:
            raise UnknownIdError(f"trial references unknown test id '{trial.test_id}'") from None
        if vec_e.shape != (d,) or vec_t.shape != (d,):
            raise DimensionMismatchError(
                f"trial {trial.enroll_id} {trial.test_id}: vector dimensions "
                f"{vec_e.shape[0]}/{vec_t.shape[0]} do not match kernel dimension {d}"
            )
        z_e[i] = vec_e - kernel.enroll_mean
        z_t[i] = vec_t - kernel.test_mean

    if threads > 1 and len(trials) > 1:
        chunks = np.array_split(np.arange(len(trials)), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(
                pool.map(lambda idx: _score_rows(kernel, z_e[idx], z_t[idx]), chunks)
            )
        values = np.concatenate(parts)
    else:
        values = _score_rows(kernel, z_e, z_t)

    entries = tuple(
        ScoredTrial(t.enroll_id, t.test_id, float(v)) for t, v in zip(trials, values)
    )
    return ScoreSet(entries)


def coupling_from_factors(enroll_factors: np.ndarray, test_factors: np.ndarray):
    """Least-squares coupling map and residual covariance from paired factors.

    Rows are speakers. The map minimizes the summed squared residual
    (no intercept); the residual covariance is the sample covariance of
    the regression residuals.
    """
    y1 = np.asarray(enroll_factors, dtype=np.float64)
    y2 = np.asarray(test_factors, dtype=np.float64)
    if y1.ndim != 2 or y2.ndim != 2 or y1.shape[0] != y2.shape[0]:
        raise DimensionMismatchError(
            f"factor matrices must share the speaker axis, got {y1.shape} and {y2.shape}"
        )
    n = y1.shape[0]
    if n < 2:
        raise ParameterError(f"coupling regression needs at least 2 speakers, got {n}")
    gram = y1.T @ y1
    try:
        cho = scipy.linalg.cho_factor(gram, lower=True)
    except (scipy.linalg.LinAlgError, ValueError):
        raise NumericalError(
            "enrollment factor Gram matrix is singular; add speakers or lower the PLDA rank"
        ) from None
    coupling = scipy.linalg.cho_solve(cho, y1.T @ y2).T
    residuals = y2 - y1 @ coupling.T
    centered = residuals - residuals.mean(axis=0)
    noise_cov = centered.T @ centered / (n - 1)
    return coupling, noise_cov


def fit_coupling(
    plda_enroll: PldaModel,
    plda_test: PldaModel,
    paired_groups: list[tuple[SpeakerGroup, SpeakerGroup]],
) -> FourCovModel:
    """Fit the factor coupling from speakers seen on both sides.

    Each pair holds one speaker's full enrollment-side and test-side
    samples; point-estimate factors are extracted per side with the full
    sample, then regressed against each other.
    """
    if len(paired_groups) < plda_enroll.rank + 1:
        raise ParameterError(
            f"coupling fit needs at least rank+1 = {plda_enroll.rank + 1} speakers, "
            f"got {len(paired_groups)}"
        )
    for i, (g1, g2) in enumerate(paired_groups):
        if g1.speaker_id != g2.speaker_id:
            raise ParameterError(
                f"paired groups at index {i} name different speakers: "
                f"'{g1.speaker_id}' vs '{g2.speaker_id}'"
            )
    y1 = np.stack([speaker_factor(plda_enroll, g1) for g1, _ in paired_groups])
    y2 = np.stack([speaker_factor(plda_test, g2) for _, g2 in paired_groups])
    coupling, noise_cov = coupling_from_factors(y1, y2)
    return FourCovModel(plda_enroll, plda_test, coupling, noise_cov)
