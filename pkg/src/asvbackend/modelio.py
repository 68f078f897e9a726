"""Versioned on-disk bundles for trained models.

Each bundle is a single .npz with a magic/version string, dimension and
rank fields in the header entries, and the arrays themselves. A side
bundle carries one PLDA model together with its preprocessor; a
two-sided bundle carries both sides plus the factor coupling. Writes are
atomic.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .exceptions import FileFormatError
from .fourcov import FourCovModel
from .plda import PldaModel, Preprocessor
from .synth import GroundTruth

PREPROCESSOR_MAGIC = "asvbackend/preprocessor/1"
SIDE_MAGIC = "asvbackend/plda-side/1"
FOURCOV_MAGIC = "asvbackend/fourcov/1"
TRUTH_MAGIC = "asvbackend/ground-truth/1"


def _save_npz(path, **arrays) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp.", suffix=".npz")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _load_npz(path, magic: str):
    try:
        bundle = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FileFormatError(f"{path}: not a readable model bundle ({exc})") from None
    stored = str(bundle["magic"]) if "magic" in bundle else "<missing>"
    if stored != magic:
        raise FileFormatError(f"{path}: expected bundle '{magic}', found '{stored}'")
    return bundle


def save_preprocessor(path, pre: Preprocessor) -> None:
    _save_npz(path, magic=PREPROCESSOR_MAGIC, dim=pre.dim, mean=pre.mean, whitener=pre.whitener)


def load_preprocessor(path) -> Preprocessor:
    bundle = _load_npz(path, PREPROCESSOR_MAGIC)
    return Preprocessor(bundle["mean"], bundle["whitener"])


def save_plda_side(path, model: PldaModel, pre: Preprocessor) -> None:
    _save_npz(
        path,
        magic=SIDE_MAGIC,
        dim=model.dim,
        rank=model.rank,
        mean=model.mean,
        speaker_loadings=model.speaker_loadings,
        residual_cov=model.residual_cov,
        pre_mean=pre.mean,
        pre_whitener=pre.whitener,
    )


def load_plda_side(path) -> tuple[PldaModel, Preprocessor]:
    bundle = _load_npz(path, SIDE_MAGIC)
    try:
        model = PldaModel(bundle["mean"], bundle["speaker_loadings"], bundle["residual_cov"])
        pre = Preprocessor(bundle["pre_mean"], bundle["pre_whitener"])
    except KeyError as exc:
        raise FileFormatError(f"{path}: bundle is missing entry {exc}") from None
    return model, pre


def save_fourcov(path, model: FourCovModel, pre_enroll: Preprocessor, pre_test: Preprocessor) -> None:
    _save_npz(
        path,
        magic=FOURCOV_MAGIC,
        dim=model.dim,
        enroll_rank=model.enroll_plda.rank,
        test_rank=model.test_plda.rank,
        enroll_mean=model.enroll_plda.mean,
        enroll_loadings=model.enroll_plda.speaker_loadings,
        enroll_residual_cov=model.enroll_plda.residual_cov,
        test_mean=model.test_plda.mean,
        test_loadings=model.test_plda.speaker_loadings,
        test_residual_cov=model.test_plda.residual_cov,
        coupling=model.coupling,
        coupling_noise_cov=model.coupling_noise_cov,
        pre_enroll_mean=pre_enroll.mean,
        pre_enroll_whitener=pre_enroll.whitener,
        pre_test_mean=pre_test.mean,
        pre_test_whitener=pre_test.whitener,
    )


def load_fourcov(path) -> tuple[FourCovModel, Preprocessor, Preprocessor]:
    bundle = _load_npz(path, FOURCOV_MAGIC)
    try:
        model = FourCovModel(
            PldaModel(bundle["enroll_mean"], bundle["enroll_loadings"], bundle["enroll_residual_cov"]),
            PldaModel(bundle["test_mean"], bundle["test_loadings"], bundle["test_residual_cov"]),
            bundle["coupling"],
            bundle["coupling_noise_cov"],
        )
        pre_enroll = Preprocessor(bundle["pre_enroll_mean"], bundle["pre_enroll_whitener"])
        pre_test = Preprocessor(bundle["pre_test_mean"], bundle["pre_test_whitener"])
    except KeyError as exc:
        raise FileFormatError(f"{path}: bundle is missing entry {exc}") from None
    return model, pre_enroll, pre_test


def save_ground_truth(path, truth: GroundTruth) -> None:
    _save_npz(
        path,
        magic=TRUTH_MAGIC,
        dim=truth.dim,
        enroll_mean=truth.enroll_mean,
        enroll_loadings=truth.enroll_loadings,
        enroll_noise_cov=truth.enroll_noise_cov,
        test_mean=truth.test_mean,
        test_loadings=truth.test_loadings,
        test_noise_cov=truth.test_noise_cov,
        coupling=truth.coupling,
        coupling_noise_cov=truth.coupling_noise_cov,
    )


def load_ground_truth(path) -> GroundTruth:
    bundle = _load_npz(path, TRUTH_MAGIC)
    try:
        return GroundTruth(
            bundle["enroll_mean"],
            bundle["enroll_loadings"],
            bundle["enroll_noise_cov"],
            bundle["test_mean"],
            bundle["test_loadings"],
            bundle["test_noise_cov"],
            bundle["coupling"],
            bundle["coupling_noise_cov"],
        )
    except KeyError as exc:
        raise FileFormatError(f"{path}: bundle is missing entry {exc}") from None
