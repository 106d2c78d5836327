"""Grouped cross-validation, macro-F1, paired bootstrap and saliency curves."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from typing import Callable, Sequence

import numpy as np

from .data import CODES, Example
from .model import ModelParams, forward
from .seeds import derive_seed
from .training import TrainConfig, default_batch_size, default_max_len, make_batches, predict, train

logger = logging.getLogger(__name__)

N_BINS = 100


class FoldError(ValueError):
    pass


@dataclass(frozen=True)
class FoldAssignment:
    folds: tuple[tuple[int, ...], ...]  # indices into the session list
    therapist_fold: dict[str, int]

    @property
    def k(self) -> int:
        return len(self.folds)


def grouped_kfold(therapist_ids: Sequence[str], k: int = 10, seed: int = 0) -> FoldAssignment:
    """Assign whole therapists to folds, balancing session counts.

    Therapists are shuffled with ``seed``, then placed largest-first (stable,
    so equal counts keep the shuffled order) into the fold holding the fewest
    sessions so far, lowest index on ties.
    """
    by_therapist: dict[str, list[int]] = {}
    for i, t in enumerate(therapist_ids):
        by_therapist.setdefault(t, []).append(i)
    if len(by_therapist) < k:
        raise FoldError(f"{len(by_therapist)} therapists cannot fill {k} folds")
    names = sorted(by_therapist)
    shuffled = [names[i] for i in np.random.default_rng(seed).permutation(len(names))]
    shuffled.sort(key=lambda t: -len(by_therapist[t]))
    sizes = [0] * k
    members: list[list[int]] = [[] for _ in range(k)]
    assignment = {}
    for t in shuffled:
        f = min(range(k), key=lambda j: (sizes[j], j))
        assignment[t] = f
        members[f].extend(by_therapist[t])
        sizes[f] += len(by_therapist[t])
    return FoldAssignment(tuple(tuple(sorted(m)) for m in members), assignment)


def check_partition(assignment: FoldAssignment, therapist_ids: Sequence[str]) -> None:
    seen = [i for fold in assignment.folds for i in fold]
    if sorted(seen) != list(range(len(therapist_ids))):
        raise FoldError("folds do not partition the sessions")
    owner: dict[str, int] = {}
    for f, fold in enumerate(assignment.folds):
        for i in fold:
            if owner.setdefault(therapist_ids[i], f) != f:
                raise FoldError(f"therapist {therapist_ids[i]} appears in folds {owner[therapist_ids[i]]} and {f}")


def macro_f1(preds: Sequence[int], labels: Sequence[int]) -> tuple[float, dict, dict]:
    """Unweighted mean of the two per-class F1 scores (0/0 taken as 0)."""
    p = np.asarray(preds, dtype=int)
    y = np.asarray(labels, dtype=int)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("preds and labels must be non-empty and aligned")
    confusion = {
        "tp": int(((p == 1) & (y == 1)).sum()),
        "fp": int(((p == 1) & (y == 0)).sum()),
        "fn": int(((p == 0) & (y == 1)).sum()),
        "tn": int(((p == 0) & (y == 0)).sum()),
    }
    per_class = {}
    for c in (0, 1):
        tp = int(((p == c) & (y == c)).sum())
        n_pred = int((p == c).sum())
        n_true = int((y == c).sum())
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_true if n_true else 0.0
        f1 = 2 * tp / (n_pred + n_true) if n_pred + n_true else 0.0
        per_class[c] = {"precision": precision, "recall": recall, "f1": f1}
    return (per_class[0]["f1"] + per_class[1]["f1"]) / 2.0, per_class, confusion


def _macro_f1_counts(tp, fp, fn, tn) -> np.ndarray:
    """Vectorized macro-F1 from confusion counts (arrays)."""
    with np.errstate(invalid="ignore", divide="ignore"):
        d1 = 2 * tp + fp + fn
        d0 = 2 * tn + fn + fp
        f1 = np.where(d1 > 0, 2 * tp / np.where(d1 > 0, d1, 1), 0.0)
        f0 = np.where(d0 > 0, 2 * tn / np.where(d0 > 0, d0, 1), 0.0)
    return (f0 + f1) / 2.0


def _resampled_deltas(a, b, y, n, seed) -> np.ndarray:
    """Macro-F1 difference on each of ``n`` resamples of the sessions."""
    N = y.size
    # bounds the resample index block to about 2e6 entries
    chunk = max(1, 2_000_000 // N)
    # category of each session per system: 0 tn, 1 fn, 2 fp, 3 tp
    cat_a = 2 * a + y
    cat_b = 2 * b + y
    onehot_a = np.eye(4, dtype=np.int64)[cat_a]
    onehot_b = np.eye(4, dtype=np.int64)[cat_b]
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        idx = rng.integers(0, N, size=(m, N))
        ca = onehot_a[idx].sum(axis=1)
        cb = onehot_b[idx].sum(axis=1)
        fa = _macro_f1_counts(ca[:, 3], ca[:, 2], ca[:, 1], ca[:, 0])
        fb = _macro_f1_counts(cb[:, 3], cb[:, 2], cb[:, 1], cb[:, 0])
        out[start:start + m] = fa - fb
    return out


def paired_bootstrap(preds_a, preds_b, labels, n: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """One-sided test that system a beats system b on macro-F1.

    Resamples sessions with replacement; p = (#{delta <= 0} + 1) / (n + 1).
    """
    a = np.asarray(preds_a, dtype=np.int64)
    b = np.asarray(preds_b, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if not (a.shape == b.shape == y.shape) or y.size == 0:
        raise ValueError("prediction vectors must be aligned and non-empty")
    delta = macro_f1(a, y)[0] - macro_f1(b, y)[0]
    deltas = _resampled_deltas(a, b, y, n, seed)
    p = (int((deltas <= 0).sum()) + 1) / (n + 1)
    return delta, p


def resample_curve(alpha: Sequence[float], bins: int = N_BINS) -> np.ndarray:
    """Attention weights as a density over normalized session time.

    Position t sits at (t + 0.5) / T with density alpha_t * T. The density is
    interpolated linearly between positions and held constant past the ends;
    each bin holds the mean of that curve over the bin. The curve integrates
    to sum(alpha), so the bins conserve mass even when T exceeds ``bins``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    T = alpha.size
    if T < 1:
        raise ValueError("empty attention vector")
    knots = np.concatenate([[0.0], (np.arange(T) + 0.5) / T, [1.0]])
    dens = alpha * T
    values = np.concatenate([[dens[0]], dens, [dens[-1]]])
    widths = np.diff(knots)
    slopes = np.diff(values) / widths
    cumulative = np.concatenate([[0.0], np.cumsum(widths * (values[:-1] + values[1:]) / 2.0)])

    edges = np.linspace(0.0, 1.0, bins + 1)
    seg = np.clip(np.searchsorted(knots, edges, side="right") - 1, 0, T)
    dx = edges - knots[seg]
    F = cumulative[seg] + dx * values[seg] + 0.5 * dx * dx * slopes[seg]
    return np.diff(F) * bins


@dataclass
class SaliencyCurve:
    code: str
    bins: np.ndarray
    n_sessions: int


def aggregate_saliency(params: ModelParams, dataset: Sequence[Example], batch_size: int = 64) -> list[SaliencyCurve]:
    """Mean resampled attention per head over the dataset.

    Multi-task models yield one curve per code plus their unweighted ``mean``;
    single-task models yield a single ``total`` curve.
    """
    heads = params.config.heads
    sums = {h: np.zeros(N_BINS) for h in heads}
    n = 0
    for batch in make_batches(dataset, batch_size, params.config.max_len):
        _, trace = forward(batch.X, batch.mask, batch.meta, params)
        lengths = batch.mask.sum(axis=1).astype(int)
        for i, L in enumerate(lengths):
            for h in heads:
                sums[h] += resample_curve(trace.alphas[h][i, :L])
        n += len(batch)
    curves = [SaliencyCurve(h, sums[h] / n, n) for h in heads]
    if params.mode == "multi_task":
        curves.append(SaliencyCurve("mean", np.mean([c.bins for c in curves], axis=0), n))
    return curves


def saliency_csv(curves: Sequence[SaliencyCurve]) -> str:
    lines = ["code," + ",".join(f"bin_{i}" for i in range(N_BINS))]
    for c in curves:
        lines.append(c.code + "," + ",".join(repr(float(v)) for v in c.bins))
    return "\n".join(lines) + "\n"


@dataclass
class EvalConfig:
    k: int = 10
    val_fraction: float = 0.1
    bootstrap_n: int = 100_000
    seed: int = 0


def carve_validation(train_set: Sequence[Example], fraction: float, seed: int):
    """Hold out a seeded fraction of the training therapists (at least one)."""
    therapists = sorted({e.therapist_id for e in train_set})
    n_val = max(1, int(round(fraction * len(therapists))))
    if n_val >= len(therapists):
        raise FoldError("not enough therapists to carve a validation split")
    pick = np.random.default_rng(seed).permutation(len(therapists))[:n_val]
    val_ids = {therapists[i] for i in pick}
    return ([e for e in train_set if e.therapist_id not in val_ids],
            [e for e in train_set if e.therapist_id in val_ids])


def _run_fold(args):
    fold, train_set, test_set, config, eval_config, collect_saliency = args
    fit, val = carve_validation(train_set, eval_config.val_fraction,
                                derive_seed(eval_config.seed, "validation", fold))
    params, history = train(
        fit, val, config,
        init_seed=derive_seed(config.seed, "init", fold),
        shuffle_seed=derive_seed(config.seed, "shuffle", fold),
    )
    preds = predict(params, test_set)
    curves = aggregate_saliency(params, test_set) if collect_saliency else None
    return params, history, preds, curves


def _workers(requested: int) -> int:
    cap = os.environ.get("SESSION_CODER_THREADS")
    n = max(1, requested)
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def cross_validate(
    dataset: Sequence[Example],
    config: TrainConfig,
    eval_config: EvalConfig | None = None,
    parallel_folds: int = 1,
    collect_saliency: bool = False,
) -> dict:
    """Grouped k-fold training and pooled evaluation.

    The returned report is a JSON-ready dict; per-fold saliency curves are
    averaged (weighted by test-fold size) under ``"saliency"`` when requested.
    """
    eval_config = eval_config or EvalConfig(seed=config.seed)
    data = sorted(dataset, key=lambda e: e.session_id)
    therapists = [e.therapist_id for e in data]
    folds = grouped_kfold(therapists, eval_config.k, derive_seed(eval_config.seed, "folds"))
    check_partition(folds, therapists)

    jobs = []
    for f, test_idx in enumerate(folds.folds):
        held = set(test_idx)
        train_set = [e for i, e in enumerate(data) if i not in held]
        test_set = [data[i] for i in test_idx]
        jobs.append((f, train_set, test_set, config, eval_config, collect_saliency))

    workers = _workers(parallel_folds)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]

    pooled: dict[str, dict] = {}
    fold_blocks = []
    for (f, _, test_set, *_), (_, history, preds, _) in zip(jobs, results):
        ids = [e.session_id for e in test_set]
        labels = [e.label for e in test_set]
        f1, _, confusion = macro_f1([preds[s]["label"] for s in ids], labels)
        fold_blocks.append({
            "fold": f,
            "test_sessions": ids,
            "therapists": sorted({e.therapist_id for e in test_set}),
            "macro_f1": f1,
            "confusion": confusion,
            "history": history.to_json(),
        })
        for e in test_set:
            if e.session_id in pooled:
                raise FoldError(f"session {e.session_id} predicted twice")
            pooled[e.session_id] = dict(preds[e.session_id], true_label=e.label,
                                        true_total=float(e.codes.sum()))
    if len(pooled) != len(data):
        raise FoldError("pooled predictions do not cover every session")

    ids = [e.session_id for e in data]
    f1, per_class, confusion = macro_f1([pooled[s]["label"] for s in ids], [e.label for e in data])
    report = {
        "config": asdict(config),
        "evaluation": asdict(eval_config),
        "n_sessions": len(data),
        "folds": fold_blocks,
        "predictions": pooled,
        "confusion": confusion,
        "per_class": {str(c): v for c, v in per_class.items()},
        "macro_f1": f1,
    }
    if collect_saliency:
        weights = np.array([len(j[2]) for j in jobs], dtype=np.float64)
        heads = [c.code for c in results[0][3]]
        report["saliency"] = {
            h: (sum(w * r[3][i].bins for w, r in zip(weights, results)) / weights.sum()).tolist()
            for i, h in enumerate(heads)
        }
    return report


def report_predictions(report: dict) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Session ids, predicted labels and true labels of an EvalReport, sorted by id."""
    ids = sorted(report["predictions"])
    preds = np.array([report["predictions"][s]["label"] for s in ids])
    labels = np.array([report["predictions"][s]["true_label"] for s in ids])
    return ids, preds, labels


def compare_reports(report_a: dict, report_b: dict, n: int = 100_000, seed: int = 0) -> dict:
    ids_a, pa, ya = report_predictions(report_a)
    ids_b, pb, yb = report_predictions(report_b)
    if ids_a != ids_b or not np.array_equal(ya, yb):
        raise ValueError("reports cover different sessions or labels; cannot pair them")
    delta, p = paired_bootstrap(pa, pb, ya, n=n, seed=seed)
    return {
        "macro_f1_a": macro_f1(pa, ya)[0],
        "macro_f1_b": macro_f1(pb, yb)[0],
        "delta_observed": delta,
        "p_value": p,
        "n_resamples": n,
        "seed": seed,
    }


def relative_improvement(mean_yes: float, mean_no: float) -> float:
    return (mean_yes - mean_no) / mean_no


ABLATION_TOGGLES = ("metadata", "multi_task", "therapist_only")


def run_ablation(
    build: Callable[[str, bool], Sequence[Example]],
    base_config: TrainConfig,
    eval_config: EvalConfig | None = None,
    parallel_folds: int = 1,
) -> dict:
    """Cross-validate all 8 combinations of metadata x mode x role filter.

    ``build(role_filter, metadata_enabled)`` returns the examples for a cell.
    Per toggle, reports the mean F1 over the 4 cells with and without it and
    the relative improvement (yes - no) / no.
    """
    # batch size and max length follow the role filter unless set explicitly
    own_defaults = (default_batch_size(base_config.role_filter), default_max_len(base_config.role_filter))
    keep = (base_config.batch_size, base_config.max_len) != own_defaults
    cells = []
    for metadata, multi, therapist in product((False, True), repeat=3):
        role = "therapist_only" if therapist else "all"
        config = replace(
            base_config,
            mode="multi_task" if multi else "single_task",
            role_filter=role,
            metadata_enabled=metadata,
            batch_size=base_config.batch_size if keep else None,
            max_len=base_config.max_len if keep else None,
        )
        report = cross_validate(build(role, metadata), config, eval_config, parallel_folds)
        cells.append({
            "metadata": metadata,
            "multi_task": multi,
            "therapist_only": therapist,
            "macro_f1": report["macro_f1"],
        })
    return {"cells": cells, "toggles": summarize_toggles(cells)}


def summarize_toggles(cells: Sequence[dict]) -> dict:
    out = {}
    for toggle in ABLATION_TOGGLES:
        yes = [c["macro_f1"] for c in cells if c[toggle]]
        no = [c["macro_f1"] for c in cells if not c[toggle]]
        mean_yes, mean_no = float(np.mean(yes)), float(np.mean(no))
        out[toggle] = {
            "mean_yes": mean_yes,
            "mean_no": mean_no,
            "relative_improvement": relative_improvement(mean_yes, mean_no) if mean_no else None,
        }
    return out
