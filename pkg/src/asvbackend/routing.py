"""Trial-dependent model selection and the per-condition scoring pipeline.

Trials are classified on two axes: how many segments the enrollment
sample has (few = below the threshold, default 5) and which language the
test segment carries (primary or secondary). Language comes from caller
metadata — this package never detects it. Each of the four conditions
owns a complete scoring stack (two-sided model, cohorts, calibration);
a mixed trial list is partitioned, each partition scored, normalized and
calibrated by its own stack, and the streams merged back in input order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .calibration import CalibrationModel, apply_calibration, read_calibration
from .data import (
    Embedding,
    ScoredTrial,
    ScoreSet,
    Trial,
    TrialList,
    group_by_id,
    read_embeddings,
    read_id_map,
)
from .exceptions import ConfigError, FileFormatError, ParameterError, RoutingError
from .fourcov import FourCovModel, build_kernel, score_batch
from .modelio import load_fourcov
from .plda import Preprocessor, enroll_average
from .scorenorm import DEFAULT_TOP_K, CohortSet, snorm_batch

ENROLL_BUCKETS = ("few", "many")
TEST_LANGUAGES = ("primary", "secondary")
DEFAULT_SEG_THRESHOLD = 5


@dataclass(frozen=True)
class ConditionKey:
    """One cell of the enrollment-size x test-language grid."""

    enroll_bucket: str
    test_language: str

    def __post_init__(self):
        if self.enroll_bucket not in ENROLL_BUCKETS:
            raise ParameterError(
                f"enroll_bucket must be one of {ENROLL_BUCKETS}, got '{self.enroll_bucket}'"
            )
        if self.test_language not in TEST_LANGUAGES:
            raise ParameterError(
                f"test_language must be one of {TEST_LANGUAGES}, got '{self.test_language}'"
            )

    @property
    def tag(self) -> str:
        return f"{self.enroll_bucket}-{self.test_language}"


ALL_CONDITIONS = tuple(
    ConditionKey(bucket, language) for bucket in ENROLL_BUCKETS for language in TEST_LANGUAGES
)


def parse_condition_tag(tag: str) -> ConditionKey:
    parts = tag.split("-")
    if len(parts) != 2:
        raise ParameterError(f"condition tag must look like 'few-primary', got '{tag}'")
    return ConditionKey(parts[0], parts[1])


@dataclass(frozen=True)
class ConditionPipeline:
    """Everything needed to score one condition's trials end to end."""

    model: FourCovModel
    pre_enroll: Preprocessor
    pre_test: Preprocessor
    cohorts: CohortSet          # already in preprocessed (model) space
    calibration: CalibrationModel
    alpha: float | None = None  # interpolation weight recorded at build time


@dataclass
class RoutingConfig:
    """Condition pipelines plus the trial metadata needed to classify."""

    pipelines: dict[ConditionKey, ConditionPipeline]
    enroll_segments: dict[str, int]
    test_language: dict[str, str]
    enroll_seg_threshold: int = DEFAULT_SEG_THRESHOLD
    threads: int = field(default=1, compare=False)

    def __post_init__(self):
        if self.enroll_seg_threshold < 1:
            raise ParameterError(
                f"enroll_seg_threshold must be positive, got {self.enroll_seg_threshold}"
            )
        for tid, language in self.test_language.items():
            if language not in TEST_LANGUAGES:
                raise ConfigError(
                    f"test id '{tid}' has unknown language '{language}' "
                    f"(want one of {TEST_LANGUAGES})"
                )
        for cal in (p.calibration for p in self.pipelines.values()):
            if cal.scale <= 0.0:
                raise ConfigError(
                    f"calibration scale must be positive for routing, got {cal.scale}"
                )


def classify_trial(config: RoutingConfig, enroll_id: str, test_id: str) -> ConditionKey:
    """Bucket by enrollment segment count, copy the test language label."""
    try:
        count = config.enroll_segments[enroll_id]
    except KeyError:
        raise RoutingError(f"no segment count for enrollment id '{enroll_id}'") from None
    try:
        language = config.test_language[test_id]
    except KeyError:
        raise RoutingError(f"no language label for test id '{test_id}'") from None
    bucket = "few" if count < config.enroll_seg_threshold else "many"
    return ConditionKey(bucket, language)


def condition_pipeline_scores(
    pipeline: ConditionPipeline,
    enrolls: list[Embedding],
    tests: list[Embedding],
    trials: TrialList,
    threads: int = 1,
) -> ScoreSet:
    """Score raw embeddings through one condition's full stack.

    Enrollment rows sharing an id are aggregated into one unit-norm
    average; test rows pass through the test-side preprocessor alone.
    """
    kernel = build_kernel(pipeline.model)
    enroll_vectors = [
        enroll_average(group, pipeline.pre_enroll) for group in group_by_id(enrolls)
    ]
    test_vectors = [
        Embedding(t.id, pipeline.pre_test.apply(t.vector)) for t in tests
    ]
    raw = score_batch(kernel, enroll_vectors, test_vectors, trials, threads=threads)
    normalized = snorm_batch(kernel, pipeline.cohorts, enroll_vectors, test_vectors, raw)
    return apply_calibration(pipeline.calibration, normalized)


def route_and_score(
    config: RoutingConfig,
    enrolls: list[Embedding],
    tests: list[Embedding],
    trials: TrialList,
) -> ScoreSet:
    """Partition trials by condition, score each partition, merge in order."""
    assignments = [classify_trial(config, t.enroll_id, t.test_id) for t in trials]
    needed = []
    for key in assignments:
        if key not in needed:
            needed.append(key)
    missing = [key.tag for key in needed if key not in config.pipelines]
    if missing:
        raise ConfigError(f"no pipeline configured for condition(s): {', '.join(sorted(missing))}")

    merged: list[ScoredTrial | None] = [None] * len(trials)
    test_by_id = {}
    for t in tests:
        test_by_id.setdefault(t.id, t)
    for key in needed:
        indices = [i for i, k in enumerate(assignments) if k == key]
        subset = TrialList(tuple(trials.entries[i] for i in indices))
        needed_enroll = {t.enroll_id for t in subset}
        needed_test = list(dict.fromkeys(t.test_id for t in subset))
        sub_enrolls = [e for e in enrolls if e.id in needed_enroll]
        sub_tests = [test_by_id[tid] for tid in needed_test if tid in test_by_id]
        scored = condition_pipeline_scores(
            config.pipelines[key], sub_enrolls, sub_tests, subset, threads=config.threads
        )
        for i, entry in zip(indices, scored):
            merged[i] = entry
    return ScoreSet(tuple(merged))


def read_segment_counts(path) -> dict[str, int]:
    """Two-column metadata file: enroll_id  n_segments."""
    raw = read_id_map(path)
    out = {}
    for key, value in raw.items():
        try:
            count = int(value)
        except ValueError:
            raise FileFormatError(f"{path}: segment count for '{key}' is not an integer") from None
        if count < 1:
            raise FileFormatError(f"{path}: segment count for '{key}' must be positive")
        out[key] = count
    return out


def read_language_map(path) -> dict[str, str]:
    """Two-column metadata file: test_id  language (primary|secondary)."""
    raw = read_id_map(path)
    for key, value in raw.items():
        if value not in TEST_LANGUAGES:
            raise FileFormatError(
                f"{path}: language for '{key}' must be one of {TEST_LANGUAGES}, got '{value}'"
            )
    return raw


def load_routing_config(path, threads: int = 1) -> RoutingConfig:
    """Load the declarative routing file (JSON).

    Schema:
        {
          "enroll_seg_threshold": 5,
          "enroll_segments": "enroll_meta.txt",
          "test_language": "test_meta.txt",
          "conditions": {
            "few-primary": {
              "model": "few_primary.npz",
              "cohort_enroll": "cohort_enroll.embs",
              "cohort_test": "cohort_test.embs",
              "calibration": "few_primary.cal",
              "top_k": 400,
              "alpha": 0.5
            }, ...
          }
        }

    Relative paths resolve against the config file's directory. Every
    referenced path is checked before anything heavy is loaded. `alpha`
    records the interpolation weight used when the condition's test-side
    model was built; it is provenance, not a scoring-time input.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from None
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    for field_name in ("enroll_segments", "test_language", "conditions"):
        if field_name not in doc:
            raise ConfigError(f"{path}: missing required field '{field_name}'")

    referenced = [resolve(doc["enroll_segments"]), resolve(doc["test_language"])]
    condition_docs = {}
    for tag, spec in doc["conditions"].items():
        key = parse_condition_tag(tag)
        for required in ("model", "cohort_enroll", "cohort_test", "calibration"):
            if required not in spec:
                raise ConfigError(f"{path}: condition '{tag}' is missing '{required}'")
        condition_docs[key] = spec
        referenced += [
            resolve(spec["model"]),
            resolve(spec["cohort_enroll"]),
            resolve(spec["cohort_test"]),
            resolve(spec["calibration"]),
        ]
    missing = [p for p in referenced if not os.path.exists(p)]
    if missing:
        raise ConfigError(f"{path}: referenced file(s) do not exist: {', '.join(missing)}")

    pipelines = {}
    for key, spec in condition_docs.items():
        model, pre_enroll, pre_test = load_fourcov(resolve(spec["model"]))
        cal_model, _ = read_calibration(resolve(spec["calibration"]))
        cohort_enroll_rows = read_embeddings(resolve(spec["cohort_enroll"]))
        cohort_test_rows = read_embeddings(resolve(spec["cohort_test"]))
        cohorts = CohortSet(
            tuple(enroll_average(g, pre_enroll) for g in group_by_id(cohort_enroll_rows)),
            tuple(Embedding(e.id, pre_test.apply(e.vector)) for e in cohort_test_rows),
            spec.get("top_k", DEFAULT_TOP_K),
        )
        pipelines[key] = ConditionPipeline(
            model, pre_enroll, pre_test, cohorts, cal_model, spec.get("alpha", 0.5)
        )
    return RoutingConfig(
        pipelines=pipelines,
        enroll_segments=read_segment_counts(resolve(doc["enroll_segments"])),
        test_language=read_language_map(resolve(doc["test_language"])),
        enroll_seg_threshold=int(doc.get("enroll_seg_threshold", DEFAULT_SEG_THRESHOLD)),
        threads=threads,
    )
