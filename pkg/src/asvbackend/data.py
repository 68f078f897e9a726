"""Data model and file I/O for embeddings, trials and scores.

Text formats are whitespace-separated UTF-8 with LF line endings; lines
starting with ``#`` are comments and blank lines are skipped:

    embeddings   id  v1 v2 ... vd
    trials       enroll_id  test_id  [tgt|non]
    scores       enroll_id  test_id  score
    id maps      key  value            (speaker maps, routing metadata)

For large cohorts a binary embedding format is available: an 8-byte magic
string, the dimension as a little-endian u32, then one record per vector
(u32 id byte length, UTF-8 id bytes, d little-endian float32 values).
``read_embeddings`` sniffs the magic and handles both formats.

All writers are atomic (temp file in the target directory, then rename).
Score values are written with ``repr`` so text round-trips are exact for
float64. The binary format stores float32, so its round-trip is bit-exact
for vectors that are float32-representable.
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections.abc import Iterable, Sequence
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    DomainError,
    FileFormatError,
    ParameterError,
    UnknownIdError,
)

BINARY_MAGIC = b"XVECBIN1"


@contextmanager
def atomic_write(path, mode="w"):
    """Open a temp file next to `path`, rename over it on success."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp.", suffix=".part")
    try:
        with os.fdopen(fd, mode, newline="\n" if "b" not in mode else None) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


@dataclass(frozen=True)
class Embedding:
    """A fixed-dimension embedding with an identity label."""

    id: str
    vector: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise DimensionMismatchError(
                f"embedding '{self.id}' must be a non-empty 1-D vector, got shape {vec.shape}"
            )
        if not np.all(np.isfinite(vec)):
            raise DomainError(f"embedding '{self.id}' contains non-finite values")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True)
class SpeakerGroup:
    """All embeddings belonging to one speaker (or one enrollment sample)."""

    speaker_id: str
    members: tuple[Embedding, ...]

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ParameterError(f"speaker group '{self.speaker_id}' has no members")
        dims = {m.dim for m in members}
        if len(dims) != 1:
            raise DimensionMismatchError(
                f"speaker group '{self.speaker_id}' mixes dimensions {sorted(dims)}"
            )
        object.__setattr__(self, "members", members)

    @property
    def dim(self) -> int:
        return self.members[0].dim

    def matrix(self) -> np.ndarray:
        return np.stack([m.vector for m in self.members])


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    is_target: bool | None = None
    condition: str | None = None


@dataclass(frozen=True)
class TrialList:
    entries: tuple[Trial, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = set()
        for t in entries:
            key = (t.enroll_id, t.test_id)
            if key in seen:
                raise ParameterError(f"duplicate trial {t.enroll_id} {t.test_id}")
            seen.add(key)
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class ScoredTrial:
    enroll_id: str
    test_id: str
    score: float


@dataclass(frozen=True)
class ScoreSet:
    entries: tuple[ScoredTrial, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = set()
        for e in entries:
            key = (e.enroll_id, e.test_id)
            if key in seen:
                raise ParameterError(f"duplicate score for trial {e.enroll_id} {e.test_id}")
            seen.add(key)
            if not np.isfinite(e.score):
                raise DomainError(f"non-finite score for trial {e.enroll_id} {e.test_id}")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def values(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    def by_trial(self) -> dict[tuple[str, str], float]:
        return {(e.enroll_id, e.test_id): e.score for e in self.entries}


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split()


def read_embeddings(path) -> list[Embedding]:
    """Read an embedding file (text or binary, detected by magic bytes)."""
    with open(path, "rb") as fh:
        head = fh.read(len(BINARY_MAGIC))
    if head == BINARY_MAGIC:
        return _read_embeddings_binary(path)

    out: list[Embedding] = []
    dim = None
    first_line = None
    for lineno, parts in _data_lines(path):
        if len(parts) < 2:
            raise FileFormatError(f"{path}:{lineno}: expected 'id v1 ... vd', got {len(parts)} fields")
        try:
            values = np.array([float(p) for p in parts[1:]], dtype=np.float64)
        except ValueError:
            raise FileFormatError(f"{path}:{lineno}: non-numeric vector component") from None
        if dim is None:
            dim, first_line = values.size, lineno
        elif values.size != dim:
            raise DimensionMismatchError(
                f"{path}:{lineno}: dimension {values.size} does not match "
                f"dimension {dim} established at line {first_line}"
            )
        try:
            out.append(Embedding(parts[0], values))
        except DomainError as exc:
            raise FileFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_embeddings(path, embeddings: Sequence[Embedding], binary: bool = False) -> None:
    if binary:
        _write_embeddings_binary(path, embeddings)
        return
    with atomic_write(path) as fh:
        for emb in embeddings:
            fh.write(emb.id + "  " + " ".join(repr(float(v)) for v in emb.vector) + "\n")


def _read_embeddings_binary(path) -> list[Embedding]:
    out: list[Embedding] = []
    with open(path, "rb") as fh:
        magic = fh.read(len(BINARY_MAGIC))
        if magic != BINARY_MAGIC:
            raise FileFormatError(f"{path}: bad magic bytes for binary embedding file")
        header = fh.read(4)
        if len(header) != 4:
            raise FileFormatError(f"{path}: truncated header")
        (dim,) = struct.unpack("<I", header)
        record = 0
        while True:
            lenbytes = fh.read(4)
            if not lenbytes:
                break
            record += 1
            if len(lenbytes) != 4:
                raise FileFormatError(f"{path}: truncated record {record}")
            (id_len,) = struct.unpack("<I", lenbytes)
            id_bytes = fh.read(id_len)
            vec_bytes = fh.read(4 * dim)
            if len(id_bytes) != id_len or len(vec_bytes) != 4 * dim:
                raise FileFormatError(f"{path}: truncated record {record}")
            vector = np.frombuffer(vec_bytes, dtype="<f4").astype(np.float64)
            out.append(Embedding(id_bytes.decode("utf-8"), vector))
    return out


def _write_embeddings_binary(path, embeddings: Sequence[Embedding]) -> None:
    embeddings = list(embeddings)
    dim = embeddings[0].dim if embeddings else 0
    with atomic_write(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<I", dim))
        for emb in embeddings:
            if emb.dim != dim:
                raise DimensionMismatchError(
                    f"embedding '{emb.id}' has dimension {emb.dim}, file has {dim}"
                )
            id_bytes = emb.id.encode("utf-8")
            fh.write(struct.pack("<I", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(emb.vector.astype("<f4").tobytes())


_LABELS = {"tgt": True, "non": False}


def read_trials(path) -> TrialList:
    entries: list[Trial] = []
    seen: dict[tuple[str, str], int] = {}
    for lineno, parts in _data_lines(path):
        if len(parts) not in (2, 3):
            raise FileFormatError(f"{path}:{lineno}: expected 'enroll_id test_id [tgt|non]'")
        label = None
        if len(parts) == 3:
            if parts[2] not in _LABELS:
                raise FileFormatError(f"{path}:{lineno}: unknown label '{parts[2]}' (want tgt or non)")
            label = _LABELS[parts[2]]
        key = (parts[0], parts[1])
        if key in seen:
            raise FileFormatError(f"{path}:{lineno}: duplicate trial (first at line {seen[key]})")
        seen[key] = lineno
        entries.append(Trial(parts[0], parts[1], label))
    return TrialList(tuple(entries))


def write_trials(path, trials: TrialList) -> None:
    with atomic_write(path) as fh:
        for t in trials:
            if t.is_target is None:
                fh.write(f"{t.enroll_id} {t.test_id}\n")
            else:
                fh.write(f"{t.enroll_id} {t.test_id} {'tgt' if t.is_target else 'non'}\n")


def read_scores(path) -> ScoreSet:
    entries: list[ScoredTrial] = []
    for lineno, parts in _data_lines(path):
        if len(parts) != 3:
            raise FileFormatError(f"{path}:{lineno}: expected 'enroll_id test_id score'")
        try:
            value = float(parts[2])
        except ValueError:
            raise FileFormatError(f"{path}:{lineno}: non-numeric score '{parts[2]}'") from None
        entries.append(ScoredTrial(parts[0], parts[1], value))
    try:
        return ScoreSet(tuple(entries))
    except (ParameterError, DomainError) as exc:
        raise FileFormatError(f"{path}: {exc}") from None


def write_scores(scores: ScoreSet, path) -> None:
    with atomic_write(path) as fh:
        for e in scores:
            fh.write(f"{e.enroll_id} {e.test_id} {repr(float(e.score))}\n")


def read_id_map(path) -> dict[str, str]:
    """Read a two-column key/value file (speaker maps, routing metadata)."""
    out: dict[str, str] = {}
    for lineno, parts in _data_lines(path):
        if len(parts) != 2:
            raise FileFormatError(f"{path}:{lineno}: expected 'key value'")
        if parts[0] in out:
            raise FileFormatError(f"{path}:{lineno}: duplicate key '{parts[0]}'")
        out[parts[0]] = parts[1]
    return out


def write_id_map(path, mapping: dict[str, str]) -> None:
    with atomic_write(path) as fh:
        for key, value in mapping.items():
            fh.write(f"{key} {value}\n")


def speaker_of(embedding_id: str) -> str:
    """Synthetic-data convention: speaker id is the part before the first '-'."""
    return embedding_id.split("-", 1)[0]


def group_by_speaker(
    embeddings: Sequence[Embedding], speaker_map: dict[str, str] | None = None
) -> list[SpeakerGroup]:
    """Partition embeddings into speaker groups, preserving input order.

    Without an explicit map, the speaker is the id prefix before the first
    '-'. Real datasets should always pass a map; the prefix convention is
    for synthetic/test data only.
    """
    ordered: dict[str, list[Embedding]] = {}
    for emb in embeddings:
        if speaker_map is not None:
            try:
                spk = speaker_map[emb.id]
            except KeyError:
                raise UnknownIdError(f"embedding id '{emb.id}' missing from speaker map") from None
        else:
            spk = speaker_of(emb.id)
        ordered.setdefault(spk, []).append(emb)
    return [SpeakerGroup(spk, tuple(members)) for spk, members in ordered.items()]


def group_by_id(embeddings: Sequence[Embedding]) -> list[SpeakerGroup]:
    """Group rows sharing an id (multi-segment enrollment samples)."""
    ordered: dict[str, list[Embedding]] = {}
    for emb in embeddings:
        ordered.setdefault(emb.id, []).append(emb)
    return [SpeakerGroup(eid, tuple(members)) for eid, members in ordered.items()]


def by_id(embeddings: Iterable[Embedding]) -> dict[str, Embedding]:
    """Index embeddings by id; duplicate ids are an error here."""
    out: dict[str, Embedding] = {}
    for emb in embeddings:
        if emb.id in out:
            raise ParameterError(f"duplicate embedding id '{emb.id}'")
        out[emb.id] = emb
    return out


def stack_embeddings(embeddings: Sequence[Embedding]) -> np.ndarray:
    if not embeddings:
        raise ParameterError("no embeddings to stack")
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise DimensionMismatchError(f"embeddings mix dimensions {sorted(dims)}")
    return np.stack([e.vector for e in embeddings])
