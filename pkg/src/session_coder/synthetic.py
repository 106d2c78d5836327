"""Synthetic sessions with planted per-code signals.

Every session gets eleven code scores drawn uniformly from 0..6. Each code has
a unit direction in embedding space (the directions are orthonormal) and a
region of normalized session time. Therapist utterances inside a code's
region carry ``marker_scale * score / 6`` along that direction, and the
code's keyword appears ``score`` times among them. Competent sessions also
carry a label keyword, with the marker flipped at a small seeded rate. The
assessment-time metadata is drawn around a value that increases with the
total score, so metadata carries real information about the label.

``marker_jitter`` scales each utterance's marker amplitude by
``1 + N(0, marker_jitter)``. With low ``noise_scale`` this gives the
noise-controlled set used for saliency: a code's score can only be read by
averaging over its whole region.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import CODES, COMPETENCE_THRESHOLD, CtrsLabels, MetadataRecord, MetadataVocab, Session, Utterance

KEYWORDS = {
    "ag": "agenda",
    "fb": "feedback",
    "un": "understanding",
    "ip": "interpersonal",
    "co": "collaboration",
    "pt": "pacing",
    "gd": "discovery",
    "cb": "cognitions",
    "sc": "strategy",
    "at": "techniques",
    "hw": "homework",
}
LABEL_KEYWORD = "competent"


def default_regions() -> dict[str, list[tuple[float, float]]]:
    regions = {c: [(0.0, 1.0)] for c in CODES}
    regions["ag"] = [(0.0, 0.1)]
    regions["hw"] = [(0.0, 0.1), (0.9, 1.0)]
    return regions


@dataclass
class SyntheticSpec:
    n_sessions: int = 200
    n_therapists: int = 50
    d: int = 32
    turns_mean: float = 60.0
    turns_std: float = 10.0
    min_turns: int = 20
    marker_scale: float = 2.0
    noise_scale: float = 0.2
    marker_jitter: float = 0.0
    filler_per_turn: int = 4
    therapist_filler_tokens: int = 240
    filler_vocab: int = 20
    label_keyword_count: int = 4
    label_keyword_flip: float = 0.02
    meta_spread: float = 3.0
    meta_noise: float = 0.5
    regions: dict[str, list[tuple[float, float]]] = field(default_factory=default_regions)
    seed: int = 42

    def validate(self) -> None:
        if self.n_sessions < 1 or self.n_therapists < 1:
            raise ValueError("n_sessions and n_therapists must be positive")
        if self.n_sessions < 2 * self.n_therapists:
            raise ValueError("need at least two sessions per therapist")
        if self.d < len(CODES):
            raise ValueError(f"d must be >= {len(CODES)} to hold orthogonal code directions")
        if not 0.0 <= self.label_keyword_flip <= 1.0 or self.label_keyword_count < 0:
            raise ValueError("label keyword count must be >= 0 and flip rate in [0, 1]")
        if min(self.turns_std, self.noise_scale, self.marker_scale, self.marker_jitter) < 0 or self.min_turns < 2:
            raise ValueError("invalid turn or scale parameters")
        if set(self.regions) != set(CODES):
            raise ValueError("regions must list every code")
        for code, spans in self.regions.items():
            for lo, hi in spans:
                if not 0.0 <= lo < hi <= 1.0:
                    raise ValueError(f"region {code}: [{lo}, {hi}] not inside [0, 1]")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["regions"] = {c: [list(s) for s in spans] for c, spans in self.regions.items()}
        return doc

    @classmethod
    def from_json(cls, raw: dict) -> "SyntheticSpec":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        if "regions" in raw:
            regions = default_regions()
            regions.update({c: [tuple(s) for s in spans] for c, spans in raw["regions"].items()})
            raw["regions"] = regions
        spec = cls(**raw)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def signal_directions(d: int, seed: int) -> np.ndarray:
    """Orthonormal code directions as rows, shape 11 x d."""
    rng = np.random.default_rng([seed, 1])
    q, _ = np.linalg.qr(rng.normal(size=(d, len(CODES))))
    return q.T.copy()


def in_region(t: float, spans) -> bool:
    return any(lo <= t < hi or (hi == 1.0 and t == 1.0) for lo, hi in spans)


def filler_tokens(rng, roles, fillers, spec: SyntheticSpec) -> list[list[str]]:
    """Filler words per turn. Therapist turns share a fixed per-session budget
    (at least one word each), which keeps the L2 norm of a session's tf-idf
    vector nearly independent of its length."""
    tokens = [[] for _ in roles]
    ther = [i for i, r in enumerate(roles) if r == "therapist"]
    budget = max(spec.therapist_filler_tokens, len(ther))
    slots = ther + [ther[j] for j in rng.integers(len(ther), size=budget - len(ther))]
    for i in slots:
        tokens[i].append(fillers[int(rng.integers(len(fillers)))])
    for i, r in enumerate(roles):
        if r != "therapist":
            tokens[i] = [fillers[j] for j in rng.integers(len(fillers), size=max(1, spec.filler_per_turn))]
    return tokens


def generate_synthetic(spec: SyntheticSpec, vocab: MetadataVocab | None = None):
    """Returns ``(sessions, embeddings)``; embeddings map session_id to a
    ``T x d`` array with one row per utterance (both roles)."""
    spec.validate()
    vocab = vocab or MetadataVocab.default()
    rng = np.random.default_rng(spec.seed)
    directions = signal_directions(spec.d, spec.seed)
    fillers = [f"w{i:03d}" for i in range(spec.filler_vocab)]
    n_at = len(vocab.assessment_time)

    therapist_meta = []
    for k in range(spec.n_therapists):
        therapist_meta.append((
            vocab.clinic[k % len(vocab.clinic)],
            vocab.level_of_care[int(rng.integers(len(vocab.level_of_care)))],
            vocab.population[int(rng.integers(len(vocab.population)))],
        ))

    width = len(str(spec.n_sessions - 1))
    sessions, embeddings = [], {}
    for k in range(spec.n_sessions):
        sid = f"s{k:0{width}d}"
        t_idx = k % spec.n_therapists
        scores = rng.integers(0, 7, size=len(CODES))
        n = max(spec.min_turns, int(round(rng.normal(spec.turns_mean, spec.turns_std))))
        times = (np.arange(n) + 0.5) / n
        roles = ["therapist" if i % 2 == 0 else "patient" for i in range(n)]

        X = rng.normal(0.0, spec.noise_scale, size=(n, spec.d)) if spec.noise_scale > 0 else np.zeros((n, spec.d))
        tokens = filler_tokens(rng, roles, fillers, spec)
        for ci, code in enumerate(CODES):
            rows = [i for i in range(n) if roles[i] == "therapist" and in_region(times[i], spec.regions[code])]
            if not rows:
                continue
            amplitude = spec.marker_scale * scores[ci] / 6.0
            if spec.marker_jitter > 0:
                # per-utterance amplitude noise: only averaging over the region recovers the score
                amplitude = amplitude * (1.0 + rng.normal(0.0, spec.marker_jitter, size=(len(rows), 1)))
            X[rows] += amplitude * directions[ci]
            for j in range(int(scores[ci])):
                tokens[rows[j % len(rows)]].append(KEYWORDS[code])

        total = int(scores.sum())
        marked = (total >= COMPETENCE_THRESHOLD) != (rng.random() < spec.label_keyword_flip)
        if marked:
            ther = [i for i in range(n) if roles[i] == "therapist"]
            for j in range(spec.label_keyword_count):
                tokens[ther[j % len(ther)]].append(LABEL_KEYWORD)

        utts, clock = [], 0.0
        for i in range(n):
            dur = float(rng.uniform(1.0, 6.0))
            utts.append(Utterance(roles[i], tuple(tokens[i]), round(clock, 3), round(clock + dur, 3)))
            clock += dur + float(rng.uniform(0.3, 1.5))

        # centred on the expected total of 11 * 3
        centre = (n_at - 1) / 2.0 + (total - 33.0) / spec.meta_spread
        at = int(np.clip(np.rint(centre + rng.normal(0.0, spec.meta_noise)), 0, n_at - 1))
        clinic, loc, pop = therapist_meta[t_idx]
        sessions.append(Session(
            session_id=sid,
            therapist_id=f"t{t_idx:0{len(str(spec.n_therapists - 1))}d}",
            utterances=tuple(utts),
            labels=CtrsLabels(tuple(int(s) for s in scores)),
            metadata=MetadataRecord(clinic, loc, pop, vocab.assessment_time[at]),
        ))
        embeddings[sid] = X
    return sessions, embeddings
