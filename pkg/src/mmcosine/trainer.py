"""Deterministic SGD training loop and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datagen import Dataset, Split, generate_trials
from .diagnostics import (
    AngleRecord,
    DiagnosticsLog,
    DiagnosticsRecord,
    ProbeConfig,
    angle_distribution,
    approx_unimodal_predictions,
    linear_probe,
    record_step,
)
from .losses import (
    ClassifierHead,
    LossConfig,
    Variant,
    head_logits,
    scale_lower_bound,
    training_objective,
)
from .metrics import (
    DcfParams,
    eer,
    min_dcf,
    score_trials,
    top1_accuracy,
    verification_embedding,
)
from .model import (
    EncoderConfig,
    FeatureBlocks,
    FusionKind,
    ModelConfig,
    check_compatible,
    encode,
    frozen,
    fuse,
    init_params,
    save_checkpoint,
)

log = logging.getLogger("mmcosine")

INIT_STREAM = 1
SHUFFLE_STREAM = 2


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_finite_loss: float | None):
        super().__init__(f"loss became non-finite at step {step}; last finite loss {last_finite_loss}")
        self.step = step
        self.last_finite_loss = last_finite_loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    diagnostics_every: int = 0  # 0 records once per epoch
    record_diagnostics: bool = True
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self, n_train: int) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.batch_size <= n_train:
            raise ValueError(f"batch_size must lie in [1, {n_train}], got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.diagnostics_every < 0:
            raise ValueError("diagnostics_every must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["variant"] = self.loss.variant.value
        return d


@dataclass
class RunResult:
    test_accuracy: float
    approx_acc_a: float
    approx_acc_v: float
    probe_a: float
    probe_v: float
    angle_median_a: float
    angle_median_v: float
    final_norm_ratio: float
    params: dict = field(repr=False)
    diagnostics: list[DiagnosticsRecord] = field(repr=False, default_factory=list)
    angles: AngleRecord | None = field(repr=False, default=None)
    checkpoint_path: str | None = None
    diagnostics_path: str | None = None

    @property
    def probe_gap(self) -> float:
        return abs(self.probe_a - self.probe_v)

    def summary(self) -> dict:
        return {
            "test_accuracy": self.test_accuracy,
            "approx_acc_a": self.approx_acc_a,
            "approx_acc_v": self.approx_acc_v,
            "probe_a": self.probe_a,
            "probe_v": self.probe_v,
            "probe_gap": self.probe_gap,
            "angle_median_a": self.angle_median_a,
            "angle_median_v": self.angle_median_v,
            "final_norm_ratio": self.final_norm_ratio,
        }


def default_model_config(dataset: Dataset, hidden: int = 64, width: int = 16,
                         fusion=FusionKind.MID_CONCAT, aux_heads: bool = False) -> ModelConfig:
    return ModelConfig(
        EncoderConfig(dataset.dim_a, (hidden,), width),
        EncoderConfig(dataset.dim_v, (hidden,), width),
        dataset.n_classes,
        FusionKind.parse(fusion),
        aux_heads,
    )


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def forward(params, cfg: ModelConfig, x_a, x_v) -> tuple[FeatureBlocks, FeatureBlocks]:
    """Encoder outputs and the fused blocks that reach the head."""
    enc = encode(x_a, x_v, params, cfg)
    return enc, fuse(enc, cfg.fusion, params)


def predict(params, cfg: ModelConfig, loss_cfg: LossConfig, split: Split):
    """Gradient-free pass over a split: ``(encoder blocks, fused blocks, logits)`` as arrays."""
    p = frozen(params)
    enc, fused = forward(p, cfg, split.x_a, split.x_v)
    logits = head_logits(fused, ClassifierHead.from_params(p), loss_cfg)
    return enc, fused, logits.values


def _snapshot(step, params, cfg, loss_cfg, split: Split, loss, epoch=None) -> DiagnosticsRecord:
    _, fused, logits = predict(params, cfg, loss_cfg, split)
    b = params["head.b"].values if loss_cfg.variant is Variant.VANILLA else None
    return record_step(
        step,
        fused.block_a.values,
        fused.block_v.values,
        params["head.w_a"].values,
        params["head.w_v"].values,
        b,
        split.labels,
        np.argmax(logits, axis=1),
        loss,
        cosine=loss_cfg.variant is Variant.MMCOSINE,
        epoch=epoch,
    )


def train(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir=None, tag: str = "run") -> RunResult:
    """SGD with momentum over per-epoch shuffled mini-batches.

    With ``out_dir`` set, writes ``<tag>.ckpt`` and ``<tag>.jsonl``.
    """
    train_split = dataset.train
    train_cfg.validate(len(train_split))
    loss_cfg = train_cfg.loss
    n_classes = model_cfg.n_classes
    if loss_cfg.variant is Variant.MMCOSINE or model_cfg.aux_heads:
        s = loss_cfg.resolved_scale(n_classes)
        s_min = scale_lower_bound(n_classes, 0.9)
        if s < s_min:
            log.warning("scale s=%g is below the lower bound %.4f (C=%d, p=0.9)", s, s_min, n_classes)

    params = init_params(model_cfg, _rng(train_cfg.seed, INIT_STREAM))
    shuffle_rng = _rng(train_cfg.seed, SHUFFLE_STREAM)
    velocity = {k: np.zeros_like(t.values) for k, t in params.items()}
    diag = DiagnosticsLog(enabled=train_cfg.record_diagnostics)

    n = len(train_split)
    bs = train_cfg.batch_size
    step = 0
    last_finite = None
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            batch = train_split.subset(idx)
            _, fused = forward(params, model_cfg, batch.x_a, batch.x_v)
            loss, logits = training_objective(fused, params, batch.labels, loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, last_finite)
            last_finite = value
            epoch_losses.append(value)
            ad.backward(loss)
            for name, t in params.items():
                g = t.grad if t.grad is not None else 0.0
                velocity[name] = train_cfg.momentum * velocity[name] + g
                t.values = t.values - train_cfg.learning_rate * velocity[name]
                t.grad = None
            step += 1
            if train_cfg.diagnostics_every and step % train_cfg.diagnostics_every == 0:
                diag.append(_snapshot(step, params, model_cfg, loss_cfg, batch, value, epoch))
        if not train_cfg.diagnostics_every:
            diag.append(_snapshot(step, params, model_cfg, loss_cfg, train_split,
                                  float(np.mean(epoch_losses)), epoch))

    result = finish_run(dataset, model_cfg, train_cfg, params, diag.records)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / f"{tag}.ckpt"
        save_checkpoint(ckpt, params, run_metadata(model_cfg, train_cfg))
        jsonl = out / f"{tag}.jsonl"
        diag.write_jsonl(jsonl)
        result.checkpoint_path = str(ckpt)
        result.diagnostics_path = str(jsonl)
    return result


def run_metadata(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}


def encoder_features(params, cfg: ModelConfig, split: Split) -> tuple[np.ndarray, np.ndarray]:
    enc = encode(split.x_a, split.x_v, frozen(params), cfg)
    return enc.block_a.values, enc.block_v.values


def finish_run(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
               params, records) -> RunResult:
    loss_cfg = train_cfg.loss
    cls = evaluate_classification(params, model_cfg, loss_cfg, dataset.test)
    tr_a, tr_v = encoder_features(params, model_cfg, dataset.train)
    te_a, te_v = encoder_features(params, model_cfg, dataset.test)
    probe_a, probe_v = linear_probe((tr_a, tr_v), dataset.train.labels, (te_a, te_v),
                                    dataset.test.labels, model_cfg.n_classes, train_cfg.probe)
    _, fused, _ = predict(params, model_cfg, loss_cfg, dataset.test)
    angles = angle_distribution(fused.block_a.values, fused.block_v.values,
                                params["head.w_a"].values, params["head.w_v"].values,
                                dataset.test.labels)
    med_a, med_v = angles.medians()
    w_a, w_v = params["head.w_a"].values, params["head.w_v"].values
    ratio = float(np.linalg.norm(w_a, axis=0).mean() / np.linalg.norm(w_v, axis=0).mean())
    return RunResult(
        test_accuracy=cls["accuracy"],
        approx_acc_a=cls["approx_acc_a"],
        approx_acc_v=cls["approx_acc_v"],
        probe_a=probe_a,
        probe_v=probe_v,
        angle_median_a=med_a,
        angle_median_v=med_v,
        final_norm_ratio=ratio,
        params=params,
        diagnostics=list(records),
        angles=angles,
    )


def evaluate_classification(params, model_cfg: ModelConfig, loss_cfg: LossConfig,
                            split: Split) -> dict:
    _, fused, logits = predict(params, model_cfg, loss_cfg, split)
    b = params["head.b"].values if loss_cfg.variant is Variant.VANILLA else None
    pred_a, pred_v = approx_unimodal_predictions(
        fused.block_a.values, fused.block_v.values,
        params["head.w_a"].values, params["head.w_v"].values, b,
        cosine=loss_cfg.variant is Variant.MMCOSINE,
    )
    return {
        "accuracy": top1_accuracy(np.argmax(logits, axis=1), split.labels),
        "approx_acc_a": top1_accuracy(pred_a, split.labels),
        "approx_acc_v": top1_accuracy(pred_v, split.labels),
    }


def evaluate_verification(params, model_cfg: ModelConfig, loss_cfg: LossConfig, split: Split,
                          n_pairs: int = 2000, target_fraction: float = 0.5, seed: int = 0,
                          dcf: DcfParams = DcfParams()) -> dict:
    _, fused, _ = predict(params, model_cfg, loss_cfg, split)
    emb = verification_embedding(fused.block_a.values, fused.block_v.values)
    trials = generate_trials(split, n_pairs, target_fraction, seed)
    scored = score_trials(emb, trials)
    return {"eer": eer(scored), "min_dcf": min_dcf(scored, dcf), "trials": scored}


def evaluate(params, model_cfg: ModelConfig, loss_cfg: LossConfig, split: Split,
             task: str = "classification", **kw) -> dict:
    check_compatible(params, model_cfg)
    if task == "classification":
        return evaluate_classification(params, model_cfg, loss_cfg, split)
    if task == "verification":
        return evaluate_verification(params, model_cfg, loss_cfg, split, **kw)
    raise ValueError(f"unknown task {task!r}")


def configs_from_metadata(meta: dict) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = ModelConfig.from_dict(meta["model"])
    t = dict(meta["train"])
    t["loss"] = LossConfig(**t["loss"])
    t["probe"] = ProbeConfig(**t["probe"])
    return model_cfg, TrainConfig(**t)

