"""Session transcripts, CTRS labels, metadata, and utterance embeddings."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Canonical order of the eleven CTRS codes; every per-code array in the package uses it.
CODES = ("ag", "fb", "un", "ip", "co", "pt", "gd", "cb", "sc", "at", "hw")
CODE_NAMES = {
    "ag": "agenda",
    "fb": "feedback",
    "un": "understanding",
    "ip": "interpersonal effectiveness",
    "co": "collaboration",
    "pt": "pacing and efficient use of time",
    "gd": "guided discovery",
    "cb": "focusing on key cognitions and behaviors",
    "sc": "strategy for change",
    "at": "application of techniques",
    "hw": "homework",
}
COMPETENCE_THRESHOLD = 40
ROLES = ("therapist", "patient")
ROLE_FILTERS = ("therapist_only", "all")
METADATA_FIELDS = ("clinic", "level_of_care", "population", "assessment_time")
UNKNOWN = "unknown"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ValidationError(DataError):
    pass


class EmptySessionError(DataError):
    pass


class DimensionError(DataError):
    pass


class MissingEmbeddingError(DataError):
    pass


class DegenerateLabelError(DataError):
    pass


@dataclass(frozen=True)
class Utterance:
    speaker_role: str
    tokens: tuple[str, ...]
    start_s: float
    end_s: float

    def __post_init__(self):
        if self.speaker_role not in ROLES:
            raise ValidationError(f"unknown speaker role {self.speaker_role!r}")
        if not self.tokens:
            raise ValidationError("utterance has no tokens")
        if self.start_s < 0 or self.end_s < self.start_s:
            raise ValidationError(f"bad time span [{self.start_s}, {self.end_s}]")


@dataclass(frozen=True)
class CtrsLabels:
    codes: tuple[int, ...]

    def __post_init__(self):
        if len(self.codes) != len(CODES):
            raise ValidationError(f"expected {len(CODES)} CTRS codes, got {len(self.codes)}")
        for name, value in zip(CODES, self.codes):
            if not 0 <= value <= 6:
                raise ValidationError(f"CTRS code {name}={value} outside 0..6")

    @property
    def total(self) -> int:
        return sum(self.codes)

    @classmethod
    def from_mapping(cls, raw: Mapping[str, int]) -> "CtrsLabels":
        missing = [c for c in CODES if c not in raw]
        if missing:
            raise ValidationError(f"missing CTRS codes {missing}")
        codes = []
        for c in CODES:
            v = raw[c]
            if isinstance(v, bool) or not isinstance(v, int):
                raise ValidationError(f"CTRS code {c} must be an integer, got {v!r}")
            codes.append(v)
        return cls(tuple(codes))

    def as_dict(self) -> dict[str, int]:
        return dict(zip(CODES, self.codes))


@dataclass(frozen=True)
class MetadataRecord:
    clinic: str = UNKNOWN
    level_of_care: str = UNKNOWN
    population: str = UNKNOWN
    assessment_time: str = UNKNOWN

    def as_dict(self) -> dict[str, str]:
        return {f: getattr(self, f) for f in METADATA_FIELDS}


@dataclass(frozen=True)
class Session:
    session_id: str
    therapist_id: str
    utterances: tuple[Utterance, ...]
    labels: CtrsLabels
    metadata: MetadataRecord = field(default_factory=MetadataRecord)

    def __post_init__(self):
        if not self.therapist_id:
            raise ValidationError(f"session {self.session_id}: empty therapist_id")

    @property
    def total(self) -> int:
        return self.labels.total

    @property
    def label(self) -> int:
        return binarize_total(self.labels.total)


@dataclass(frozen=True)
class MetadataVocab:
    clinic: tuple[str, ...]
    level_of_care: tuple[str, ...]
    population: tuple[str, ...]
    assessment_time: tuple[str, ...]

    def __post_init__(self):
        for f in METADATA_FIELDS:
            cats = getattr(self, f)
            if len(set(cats)) != len(cats):
                raise ValidationError(f"duplicate categories in metadata vocabulary {f}")
            if UNKNOWN in cats:
                raise ValidationError(f"{UNKNOWN!r} is reserved and cannot be a category of {f}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(getattr(self, f)) for f in METADATA_FIELDS)

    @property
    def width(self) -> int:
        return sum(self.sizes)

    @classmethod
    def default(cls) -> "MetadataVocab":
        return cls(
            clinic=tuple(f"clinic_{i:02d}" for i in range(1, 26)),
            level_of_care=(
                "inpatient",
                "outpatient",
                "intensive_outpatient",
                "residential",
                "school_based",
                "assertive_community_treatment",
            ),
            population=(
                "child",
                "adolescent",
                "adult",
                "geriatric",
                "substance_use",
                "serious_mental_illness",
                "lgbtqi",
                "forensic",
                "homelessness",
            ),
            assessment_time=tuple(f"assessment_{i}" for i in range(7)),
        )

    def to_json(self) -> dict[str, list[str]]:
        return {f: list(getattr(self, f)) for f in METADATA_FIELDS}

    @classmethod
    def from_json(cls, raw: Mapping[str, Sequence[str]]) -> "MetadataVocab":
        try:
            return cls(**{f: tuple(raw[f]) for f in METADATA_FIELDS})
        except KeyError as e:
            raise ValidationError(f"metadata vocabulary lacks {e.args[0]!r}") from None


def load_vocab(path) -> MetadataVocab:
    return MetadataVocab.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class EmbeddedSession:
    session_id: str
    matrix: np.ndarray  # T x d, float64
    mask: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.lower().split())


def _parse_session(obj: dict) -> Session:
    utts = []
    for u in obj["utterances"]:
        utts.append(Utterance(
            speaker_role=u["role"],
            tokens=tokenize(u["text"]),
            start_s=float(u["start_s"]),
            end_s=float(u["end_s"]),
        ))
    utts.sort(key=lambda u: u.start_s)
    meta = obj.get("metadata") or {}
    return Session(
        session_id=str(obj["session_id"]),
        therapist_id=str(obj["therapist_id"]),
        utterances=tuple(utts),
        labels=CtrsLabels.from_mapping(obj["ctrs"]),
        metadata=MetadataRecord(**{f: str(meta.get(f, UNKNOWN)) for f in METADATA_FIELDS}),
    )


def load_sessions(path) -> list[Session]:
    sessions: list[Session] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            try:
                session = _parse_session(obj)
            except ValidationError as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from None
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed session ({e!r})") from None
            if session.session_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate session_id {session.session_id!r}")
            seen.add(session.session_id)
            sessions.append(session)
    return sessions


def session_to_json(session: Session) -> dict:
    return {
        "session_id": session.session_id,
        "therapist_id": session.therapist_id,
        "metadata": session.metadata.as_dict(),
        "ctrs": session.labels.as_dict(),
        "utterances": [
            {"role": u.speaker_role, "start_s": u.start_s, "end_s": u.end_s, "text": " ".join(u.tokens)}
            for u in session.utterances
        ],
    }


def write_sessions(sessions: Iterable[Session], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps(session_to_json(s), sort_keys=True) + "\n")


def role_indices(session: Session, keep: str) -> list[int]:
    """Positions of the utterances retained under a role filter."""
    if keep == "all":
        return list(range(len(session.utterances)))
    if keep == "therapist_only":
        return [i for i, u in enumerate(session.utterances) if u.speaker_role == "therapist"]
    raise ValueError(f"unknown role filter {keep!r}; expected one of {ROLE_FILTERS}")


def filter_role(session: Session, keep: str) -> Session:
    if keep == "all":
        return session
    idx = role_indices(session, keep)
    if not idx:
        raise EmptySessionError(f"session {session.session_id} has no therapist utterances")
    return replace(session, utterances=tuple(session.utterances[i] for i in idx))


def merge_turns(utterances: Sequence[Utterance], max_gap_s: float = 2.0) -> list[Utterance]:
    """Join consecutive same-role utterances separated by less than ``max_gap_s``."""
    merged: list[Utterance] = []
    for u in utterances:
        prev = merged[-1] if merged else None
        if prev is not None and prev.speaker_role == u.speaker_role and u.start_s - prev.end_s < max_gap_s:
            merged[-1] = Utterance(prev.speaker_role, prev.tokens + u.tokens, prev.start_s, max(prev.end_s, u.end_s))
        else:
            merged.append(u)
    return merged


def encode_metadata(record: MetadataRecord, vocab: MetadataVocab, enabled: bool = True) -> np.ndarray:
    if not enabled:
        return np.zeros(0)
    blocks = []
    for f in METADATA_FIELDS:
        cats = getattr(vocab, f)
        block = np.zeros(len(cats))
        value = getattr(record, f)
        if value in cats:
            block[cats.index(value)] = 1.0
        elif value != UNKNOWN:
            logger.debug("metadata %s=%r not in vocabulary; encoded as unknown", f, value)
        blocks.append(block)
    return np.concatenate(blocks)


# blake2b with a fixed personalization string: stable across runs and platforms.
_HASH_PERSON = b"sesscoder-v1"


def _token_hash(token: str) -> tuple[int, int]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=16, person=_HASH_PERSON).digest()
    return int.from_bytes(digest[:8], "little"), digest[8] & 1


def hash_embed(utterance: Utterance | Sequence[str], d: int = 768) -> np.ndarray:
    """Signed feature hashing of the tokens, average-pooled."""
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    tokens = utterance.tokens if isinstance(utterance, Utterance) else tuple(utterance)
    vec = np.zeros(d)
    for tok in tokens:
        h, sign_bit = _token_hash(tok)
        vec[h % d] += -1.0 if sign_bit else 1.0
    return vec / max(len(tokens), 1)


def _fmt9(x: float) -> float:
    return float(f"{x:.9g}")


def write_embeddings(embeddings: Mapping[str, np.ndarray], path, order: Sequence[str] | None = None) -> None:
    """Embedding JSONL; floats rounded to 9 significant digits."""
    ids = list(order) if order is not None else sorted(embeddings)
    with open(path, "w", encoding="utf-8") as fh:
        for sid in ids:
            m = np.asarray(embeddings[sid], dtype=np.float64)
            rows = [[_fmt9(v) for v in row] for row in m]
            fh.write(json.dumps({"session_id": sid, "dim": int(m.shape[1]), "vectors": rows}) + "\n")


def load_embeddings(path) -> dict[str, EmbeddedSession]:
    out: dict[str, EmbeddedSession] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sid = str(obj["session_id"])
                d = int(obj["dim"])
                m = np.asarray(obj["vectors"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed embedding record ({e!r})") from None
            if m.ndim != 2 or m.shape[1] != d or m.shape[0] == 0:
                raise DimensionError(f"{path}:{lineno}: session {sid} vectors do not match dim={d}")
            if dim is None:
                dim = d
            elif d != dim:
                raise DimensionError(f"{path}:{lineno}: dim {d} conflicts with earlier dim {dim}")
            if sid in out:
                raise DataError(f"{path}:{lineno}: duplicate session_id {sid!r}")
            out[sid] = EmbeddedSession(sid, m)
    return out


def truncate_pad(matrix: np.ndarray, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the first ``max_len`` rows, zero-pad to exactly ``max_len``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    t, d = matrix.shape
    if t < 1:
        raise ValueError("cannot pad an empty sequence")
    n = min(t, max_len)
    out = np.zeros((max_len, d))
    out[:n] = matrix[:n]
    mask = np.zeros(max_len)
    mask[:n] = 1.0
    return out, mask


def class_weights(labels: Sequence[int]) -> tuple[float, float]:
    y = np.asarray(labels)
    n = y.size
    n1 = int((y == 1).sum())
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise DegenerateLabelError("class weights need both classes present")
    return n / (2.0 * n0), n / (2.0 * n1)


def binarize_total(total) -> int:
    return int(total >= COMPETENCE_THRESHOLD)


@dataclass(frozen=True)
class Example:
    """One session ready for the network: retained embedding rows plus targets."""

    session_id: str
    therapist_id: str
    matrix: np.ndarray  # T x d, already truncated to max_len
    meta: np.ndarray
    codes: np.ndarray  # 11 floats in CODES order
    label: int
    n_utterances: int  # retained rows before truncation


def build_examples(
    sessions: Sequence[Session],
    embeddings: Mapping[str, EmbeddedSession],
    vocab: MetadataVocab,
    role_filter: str = "therapist_only",
    metadata_enabled: bool = True,
    max_len: int = 256,
) -> list[Example]:
    """Join transcripts with embeddings and apply role filtering and truncation.

    Embedding rows align 1:1 with the transcript's utterances (all roles);
    the role filter selects rows here. Sessions left empty by the filter are
    skipped with a warning. The result is sorted by session_id.
    """
    missing = sorted(s.session_id for s in sessions if s.session_id not in embeddings)
    if missing:
        raise MissingEmbeddingError(f"no embeddings for sessions: {', '.join(missing)}")
    out = []
    for s in sorted(sessions, key=lambda s: s.session_id):
        emb = embeddings[s.session_id]
        if emb.matrix.shape[0] != len(s.utterances):
            raise DimensionError(
                f"session {s.session_id}: {emb.matrix.shape[0]} embedding rows for {len(s.utterances)} utterances"
            )
        idx = role_indices(s, role_filter)
        if not idx:
            logger.warning("skipping session %s: empty after %s filter", s.session_id, role_filter)
            continue
        rows = emb.matrix[idx]
        out.append(Example(
            session_id=s.session_id,
            therapist_id=s.therapist_id,
            matrix=rows[:max_len].copy(),
            meta=encode_metadata(s.metadata, vocab, metadata_enabled),
            codes=np.asarray(s.labels.codes, dtype=np.float64),
            label=s.label,
            n_utterances=len(idx),
        ))
    return out
