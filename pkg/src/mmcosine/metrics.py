"""Top-1 accuracy and verification metrics (EER, minDCF)."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import NORM_EPS


@dataclass(frozen=True)
class ScoredTrial:
    score: float
    is_target: bool


@dataclass(frozen=True)
class DcfParams:
    c_miss: float = 1.0
    c_fa: float = 1.0
    p_target: float = 0.01

    def __post_init__(self):
        if not (self.c_miss > 0 and self.c_fa > 0 and 0 < self.p_target < 1):
            raise ValueError(f"invalid DCF parameters {self}")


def top1_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if labels.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(predictions == labels))


def verification_score(emb_1, emb_2) -> float:
    e1 = np.asarray(emb_1, dtype=np.float64)
    e2 = np.asarray(emb_2, dtype=np.float64)
    u1 = e1 / max(np.linalg.norm(e1), NORM_EPS)
    u2 = e2 / max(np.linalg.norm(e2), NORM_EPS)
    return float(np.clip(u1 @ u2, -1.0, 1.0))


def verification_embedding(phi_a: np.ndarray, phi_v: np.ndarray) -> np.ndarray:
    """Concatenate the independently unit-normalised modality features."""
    na = np.maximum(np.linalg.norm(phi_a, axis=-1, keepdims=True), NORM_EPS)
    nv = np.maximum(np.linalg.norm(phi_v, axis=-1, keepdims=True), NORM_EPS)
    return np.concatenate([phi_a / na, phi_v / nv], axis=-1)


def _split(trials) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([t.score for t in trials], dtype=np.float64)
    target = np.array([bool(t.is_target) for t in trials])
    if not np.all(np.isfinite(scores)):
        raise ValueError("trial scores must be finite")
    if target.all() or not target.any():
        raise ValueError("need at least one target and one non-target trial")
    return scores, target


def error_rate_sweep(trials) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds ``-inf, distinct scores ascending, +inf`` with FRR and FAR at each.

    A trial is accepted when its score is ``>= t``.
    """
    scores, target = _split(trials)
    tgt = np.sort(scores[target])
    non = np.sort(scores[~target])
    thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    frr = np.searchsorted(tgt, thresholds, side="left") / len(tgt)
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / len(non)
    return thresholds, frr, far


def _crossing(frr: np.ndarray, far: np.ndarray) -> float:
    diff = frr - far
    k = int(np.argmax(diff >= 0))  # diff is -1 at -inf and +1 at +inf
    if diff[k] == 0 or k == 0:
        return float(frr[k])
    d0, d1 = diff[k - 1], diff[k]
    alpha = -d0 / (d1 - d0)
    return float(frr[k - 1] + alpha * (frr[k] - frr[k - 1]))


def eer(trials) -> float:
    """Equal error rate, interpolated linearly where FRR and FAR cross."""
    _, frr, far = error_rate_sweep(trials)
    return _crossing(frr, far)


def min_dcf(trials, params: DcfParams = DcfParams()) -> float:
    """Minimum detection cost over the sweep, normalised by the best trivial system."""
    _, frr, far = error_rate_sweep(trials)
    cost = params.c_miss * frr * params.p_target + params.c_fa * far * (1 - params.p_target)
    norm = min(params.c_miss * params.p_target, params.c_fa * (1 - params.p_target))
    return float(cost.min() / norm)


def score_trials(embeddings: np.ndarray, pairs) -> list[ScoredTrial]:
    out = []
    for p in pairs:
        out.append(ScoredTrial(verification_score(embeddings[p.index_1], embeddings[p.index_2]),
                               bool(p.is_target)))
    return out


def write_trial_scores(path, trials) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["score", "is_target"])
        for t in trials:
            w.writerow([f"{t.score:.17g}", int(bool(t.is_target))])


def read_trial_scores(path) -> list[ScoredTrial]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] == ["score", "is_target"]:
        rows = rows[1:]
    return [ScoredTrial(float(s), bool(int(t))) for s, t in rows if s]
