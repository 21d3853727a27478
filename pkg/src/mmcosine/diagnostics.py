"""Imbalance instrumentation: weight norms, uni-modal logits, angles, linear probes."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NORM_EPS


@dataclass
class DiagnosticsRecord:
    step: int
    weight_norms_a: list[float]
    weight_norms_v: list[float]
    mean_gt_logit_a: float
    mean_gt_logit_v: float
    approx_acc_a: float
    approx_acc_v: float
    joint_acc: float
    loss: float
    epoch: int | None = None

    @property
    def mean_norm_ratio(self) -> float:
        return float(np.mean(self.weight_norms_a) / max(np.mean(self.weight_norms_v), NORM_EPS))

    @property
    def max_norm_ratio(self) -> float:
        return float(np.max(self.weight_norms_a) / max(np.max(self.weight_norms_v), NORM_EPS))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class DiagnosticsLog:
    enabled: bool = True
    records: list[DiagnosticsRecord] = field(default_factory=list)

    def append(self, rec: DiagnosticsRecord) -> None:
        if self.enabled:
            self.records.append(rec)

    def write_jsonl(self, path) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.records))

    @staticmethod
    def read_jsonl(path) -> list[DiagnosticsRecord]:
        lines = Path(path).read_text().splitlines()
        return [DiagnosticsRecord(**json.loads(line)) for line in lines if line.strip()]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), NORM_EPS)


def _unit_cols(w: np.ndarray) -> np.ndarray:
    return w / np.maximum(np.linalg.norm(w, axis=0, keepdims=True), NORM_EPS)


def cosines(phi: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _unit_rows(phi) @ _unit_cols(w)


def approx_unimodal_predictions(phi_a, phi_v, w_a, w_v, b=None, cosine: bool = False):
    """Per-modality argmax; ``W^m.T phi^m + b/2`` for softmax heads, cosine otherwise.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class.
    """
    if cosine:
        return np.argmax(cosines(phi_a, w_a), axis=1), np.argmax(cosines(phi_v, w_v), axis=1)
    half = 0.0 if b is None else 0.5 * np.asarray(b)
    return np.argmax(phi_a @ w_a + half, axis=1), np.argmax(phi_v @ w_v + half, axis=1)


def ground_truth_angles(phi: np.ndarray, w: np.ndarray, labels) -> np.ndarray:
    """Angle between each feature and its own class column, in ``[0, pi]``."""
    labels = np.asarray(labels)
    cols = _unit_cols(w)[:, labels].T
    cos = np.sum(_unit_rows(phi) * cols, axis=1)
    return np.arccos(np.clip(cos, -1.0, 1.0))


@dataclass
class AngleRecord:
    angles_a: np.ndarray
    angles_v: np.ndarray

    def medians(self) -> tuple[float, float]:
        return float(np.median(self.angles_a)), float(np.median(self.angles_v))

    def histogram(self, bins: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        edges = np.linspace(0.0, math.pi, bins + 1)
        return np.histogram(self.angles_a, edges)[0], np.histogram(self.angles_v, edges)[0], edges

    def write_csv(self, path, step: int) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "modality", "angle"])
            for name, arr in (("audio", self.angles_a), ("visual", self.angles_v)):
                for a in arr:
                    w.writerow([step, name, repr(float(a))])


def angle_distribution(phi_a, phi_v, w_a, w_v, labels) -> AngleRecord:
    return AngleRecord(ground_truth_angles(phi_a, w_a, labels), ground_truth_angles(phi_v, w_v, labels))


def record_step(
    step: int,
    phi_a: np.ndarray,
    phi_v: np.ndarray,
    w_a: np.ndarray,
    w_v: np.ndarray,
    b: np.ndarray | None,
    labels,
    joint_pred,
    loss: float,
    cosine: bool = False,
    epoch: int | None = None,
) -> DiagnosticsRecord:
    labels = np.asarray(labels)
    pred_a, pred_v = approx_unimodal_predictions(phi_a, phi_v, w_a, w_v, b, cosine=cosine)
    gt_a = np.sum(phi_a * w_a[:, labels].T, axis=1)
    gt_v = np.sum(phi_v * w_v[:, labels].T, axis=1)
    return DiagnosticsRecord(
        step=int(step),
        weight_norms_a=np.linalg.norm(w_a, axis=0).tolist(),
        weight_norms_v=np.linalg.norm(w_v, axis=0).tolist(),
        mean_gt_logit_a=float(gt_a.mean()),
        mean_gt_logit_v=float(gt_v.mean()),
        approx_acc_a=float(np.mean(pred_a == labels)),
        approx_acc_v=float(np.mean(pred_v == labels)),
        joint_acc=float(np.mean(np.asarray(joint_pred) == labels)),
        loss=float(loss),
        epoch=epoch,
    )


# linear probing ------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    max_iter: int = 5000
    grad_tol: float = 1e-6
    standardize: bool = True


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_softmax_probe(x: np.ndarray, y: np.ndarray, n_classes: int, cfg: ProbeConfig):
    """Full-batch gradient descent on unregularised softmax regression.

    The step is ``1/L`` with ``L = lambda_max(X'X) / (2N)``, a Lipschitz
    bound on the cross-entropy gradient (bias column included).
    """
    n = len(y)
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    lip = 0.5 * np.linalg.eigvalsh(xb.T @ xb / n)[-1]
    step = 1.0 / max(lip, 1e-12)
    w = np.zeros((xb.shape[1], n_classes))
    for _ in range(cfg.max_iter):
        g = xb.T @ (_softmax(xb @ w) - onehot) / n
        if np.linalg.norm(g) < cfg.grad_tol:
            break
        w -= step * g
    return w


def probe_accuracy(train_x, train_y, test_x, test_y, n_classes: int | None = None,
                   cfg: ProbeConfig = ProbeConfig()) -> float:
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if len(train_y) == 0 or len(test_y) == 0:
        raise ValueError("linear probe needs non-empty train and test splits")
    if n_classes is None:
        n_classes = int(max(train_y.max(), test_y.max())) + 1
    if cfg.standardize:
        mu = train_x.mean(axis=0)
        sd = train_x.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        train_x = (train_x - mu) / sd
        test_x = (test_x - mu) / sd
    w = fit_softmax_probe(train_x, train_y, n_classes, cfg)
    logits = np.hstack([test_x, np.ones((len(test_y), 1))]) @ w
    return float(np.mean(np.argmax(logits, axis=1) == test_y))


def linear_probe(train_feats, train_y, test_feats, test_y, n_classes: int | None = None,
                 cfg: ProbeConfig = ProbeConfig()) -> tuple[float, float]:
    """Probe accuracy for each modality; ``*_feats`` are ``(audio, visual)`` pairs."""
    acc_a = probe_accuracy(train_feats[0], train_y, test_feats[0], test_y, n_classes, cfg)
    acc_v = probe_accuracy(train_feats[1], train_y, test_feats[1], test_y, n_classes, cfg)
    return acc_a, acc_v
