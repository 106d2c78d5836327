"""Frequency baseline: unigram tf-idf, univariate F-test selection, linear SVM."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DegenerateLabelError, Session, class_weights, role_indices
from .evaluation import EvalConfig, check_partition, grouped_kfold, macro_f1
from .seeds import derive_seed


@dataclass(frozen=True)
class TfidfVocab:
    terms: tuple[str, ...]
    df: tuple[int, ...]
    n_docs: int

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.terms)})

    @property
    def idf(self) -> np.ndarray:
        """Smoothed idf: ln((1 + N) / (1 + df)) + 1."""
        return np.log((1.0 + self.n_docs) / (1.0 + np.asarray(self.df, dtype=np.float64))) + 1.0

    def index_of(self, term: str) -> int | None:
        return self._index.get(term)


def session_tokens(session: Session, role_filter: str) -> list[str]:
    """All tokens of the retained utterances; one session is one document."""
    return [tok for i in role_indices(session, role_filter) for tok in session.utterances[i].tokens]


def fit_tfidf(documents: Sequence[Sequence[str]]) -> TfidfVocab:
    """Vocabulary and document frequencies from tokenized training documents."""
    if not documents:
        raise ValueError("cannot fit tf-idf on an empty corpus")
    df: dict[str, int] = {}
    for doc in documents:
        for term in set(doc):
            df[term] = df.get(term, 0) + 1
    terms = tuple(sorted(df))
    return TfidfVocab(terms, tuple(df[t] for t in terms), len(documents))


def fit_tfidf_sessions(sessions: Sequence[Session], role_filter: str = "therapist_only") -> TfidfVocab:
    return fit_tfidf([session_tokens(s, role_filter) for s in sessions])


def tfidf_transform(document: Sequence[str], vocab: TfidfVocab) -> np.ndarray:
    """Raw counts times idf, L2-normalized; unseen terms are dropped."""
    vec = np.zeros(len(vocab.terms))
    for tok in document:
        j = vocab.index_of(tok)
        if j is not None:
            vec[j] += 1.0
    vec *= vocab.idf
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def tfidf_matrix(documents: Sequence[Sequence[str]], vocab: TfidfVocab) -> np.ndarray:
    if not documents:
        return np.zeros((0, len(vocab.terms)))
    return np.stack([tfidf_transform(d, vocab) for d in documents])


@dataclass(frozen=True)
class FeatureSelection:
    indices: tuple[int, ...]
    f_scores: tuple[float, ...]


def f_statistics(X: np.ndarray, y: Sequence[int]) -> np.ndarray:
    """One-way ANOVA F per column for a two-class problem.

    Zero within-class variance gives +inf when the class means differ and
    0 when the column is constant.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateLabelError("F-test needs both classes present")
    n = X.shape[0]
    grand = X.mean(axis=0)
    between = np.zeros(X.shape[1])
    within = np.zeros(X.shape[1])
    for c in classes:
        Xc = X[y == c]
        mc = Xc.mean(axis=0)
        between += Xc.shape[0] * (mc - grand) ** 2
        within += ((Xc - mc) ** 2).sum(axis=0)
    ms_between = between / (classes.size - 1)
    ms_within = within / (n - classes.size)
    F = np.zeros(X.shape[1])
    pos = ms_within > 0
    F[pos] = ms_between[pos] / ms_within[pos]
    F[~pos & (ms_between > 0)] = np.inf
    return F


def f_test_select(X: np.ndarray, y: Sequence[int], k: int = 32) -> FeatureSelection:
    """Top ``min(k, n_features)`` columns by F, ties broken by lower index."""
    F = f_statistics(X, y)
    order = np.lexsort((np.arange(F.size), -F))[: min(k, F.size)]
    return FeatureSelection(tuple(int(i) for i in order), tuple(float(F[i]) for i in order))


@dataclass
class LinearSvmModel:
    w: np.ndarray
    b: float
    C: float = 1.0
    epochs: int = 100
    seed: int = 0
    objective_trace: list[float] = field(default_factory=list)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)


def svm_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, C: float, sample_weight: np.ndarray) -> float:
    hinge = np.maximum(0.0, 1.0 - y * (X @ w + b))
    return 0.5 * float(w @ w + b * b) + C * float((sample_weight * hinge).sum())


def svm_train(X: np.ndarray, y: Sequence[int], C: float = 1.0, epochs: int = 100, seed: int = 0) -> LinearSvmModel:
    """Class-weighted linear SVM by stochastic subgradient descent.

    Minimizes 0.5 * (|w|^2 + b^2) + C * sum_i c_i * hinge_i with step
    1 / (lambda * t), lambda = 1 / (C * n), projection onto the ball of
    radius 1 / sqrt(lambda), and averaging of all iterates. The bias is
    handled as a weight on a constant feature. ``y`` holds -1/+1 labels.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ValueError("SVM labels must be -1 or +1")
    w0, w1 = class_weights((y > 0).astype(int))
    c = np.where(y > 0, w1, w0)
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    lam = 1.0 / (C * n)
    radius = 1.0 / math.sqrt(lam)
    w = np.zeros(d + 1)
    avg = np.zeros(d + 1)
    rng = np.random.default_rng(seed)
    t = 0
    trace = []
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            violated = y[i] * (Xa[i] @ w) < 1.0
            w *= 1.0 - eta * lam
            if violated:
                w += eta * c[i] * y[i] * Xa[i]
            norm = math.sqrt(w @ w)
            if norm > radius:
                w *= radius / norm
            avg += (w - avg) / t
        trace.append(svm_objective(avg[:-1], avg[-1], X, y, C, c))
    return LinearSvmModel(w=avg[:-1].copy(), b=float(avg[-1]), C=C, epochs=epochs, seed=seed, objective_trace=trace)


@dataclass
class BaselineModel:
    vocab: TfidfVocab
    selection: FeatureSelection
    svm: LinearSvmModel
    role_filter: str

    def features(self, sessions: Sequence[Session]) -> np.ndarray:
        X = tfidf_matrix([session_tokens(s, self.role_filter) for s in sessions], self.vocab)
        return X[:, list(self.selection.indices)]

    def predict(self, sessions: Sequence[Session]) -> np.ndarray:
        return self.svm.predict(self.features(sessions))

    def to_json(self) -> dict:
        return {
            "vocab": list(self.vocab.terms),
            "df": list(self.vocab.df),
            "n_docs": self.vocab.n_docs,
            "idf": self.vocab.idf.tolist(),
            "selected": list(self.selection.indices),
            "f_scores": [f if math.isfinite(f) else "inf" for f in self.selection.f_scores],
            "w": self.svm.w.tolist(),
            "b": self.svm.b,
            "hyperparameters": {"C": self.svm.C, "epochs": self.svm.epochs, "seed": self.svm.seed,
                                "k": len(self.selection.indices), "role_filter": self.role_filter},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "BaselineModel":
        hp = doc["hyperparameters"]
        vocab = TfidfVocab(tuple(doc["vocab"]), tuple(doc["df"]), doc["n_docs"])
        selection = FeatureSelection(tuple(doc["selected"]),
                                     tuple(float(f) for f in doc["f_scores"]))
        svm = LinearSvmModel(np.asarray(doc["w"], dtype=np.float64), float(doc["b"]),
                             hp["C"], hp["epochs"], hp["seed"])
        return cls(vocab, selection, svm, hp["role_filter"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "BaselineModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def fit_baseline(sessions: Sequence[Session], role_filter: str = "therapist_only", k: int = 32,
                 C: float = 1.0, epochs: int = 100, seed: int = 0) -> BaselineModel:
    docs = [session_tokens(s, role_filter) for s in sessions]
    vocab = fit_tfidf(docs)
    X = tfidf_matrix(docs, vocab)
    labels = np.array([s.label for s in sessions])
    selection = f_test_select(X, labels, k)
    svm = svm_train(X[:, list(selection.indices)], 2 * labels - 1, C=C, epochs=epochs, seed=seed)
    return BaselineModel(vocab, selection, svm, role_filter)


def baseline_crossval(sessions: Sequence[Session], role_filter: str = "therapist_only", seed: int = 0,
                      eval_config: EvalConfig | None = None, k_features: int = 32,
                      C: float = 1.0, epochs: int = 100) -> dict:
    """Grouped k-fold evaluation of the baseline.

    Fold assignment uses the same seed derivation and session ordering as
    :func:`session_coder.evaluation.cross_validate`, so reports from both
    can be paired for a bootstrap test.
    """
    eval_config = eval_config or EvalConfig(seed=seed)
    data = sorted(sessions, key=lambda s: s.session_id)
    therapists = [s.therapist_id for s in data]
    folds = grouped_kfold(therapists, eval_config.k, derive_seed(eval_config.seed, "folds"))
    check_partition(folds, therapists)
    pooled, blocks = {}, []
    for f, test_idx in enumerate(folds.folds):
        held = set(test_idx)
        train_set = [s for i, s in enumerate(data) if i not in held]
        test_set = [data[i] for i in test_idx]
        model = fit_baseline(train_set, role_filter, k_features, C, epochs, derive_seed(seed, "svm", f))
        scores = model.svm.decision_function(model.features(test_set))
        preds = (scores > 0).astype(int)
        labels = [s.label for s in test_set]
        f1, _, confusion = macro_f1(preds, labels)
        blocks.append({
            "fold": f,
            "test_sessions": [s.session_id for s in test_set],
            "macro_f1": f1,
            "confusion": confusion,
            "selected_terms": [model.vocab.terms[j] for j in model.selection.indices],
        })
        for s, p, v in zip(test_set, preds, scores):
            pooled[s.session_id] = {"label": int(p), "decision": float(v), "true_label": s.label}
    ids = [s.session_id for s in data]
    f1, per_class, confusion = macro_f1([pooled[i]["label"] for i in ids], [s.label for s in data])
    return {
        "config": {"system": "tfidf_ftest_linear_svm", "role_filter": role_filter, "k_features": k_features,
                   "C": C, "epochs": epochs, "seed": seed},
        "evaluation": asdict(eval_config),
        "n_sessions": len(data),
        "folds": blocks,
        "predictions": pooled,
        "confusion": confusion,
        "per_class": {str(c): v for c, v in per_class.items()},
        "macro_f1": f1,
    }
