"""Seed sweeps comparing loss variants on identical data."""

from __future__ import annotations

import csv
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .datagen import Dataset, GeneratorConfig, generate_classification
from .losses import LossConfig, Variant, default_scale
from .model import FusionKind
from .trainer import RunResult, TrainConfig, default_model_config, train

SUMMARY_FIELDS = [
    "arm", "seed", "joint_acc", "probe_a", "probe_v", "probe_gap", "approx_acc_a",
    "approx_acc_v", "angle_median_a", "angle_median_v", "final_norm_ratio", "norm_trajectory",
]


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings shared by every arm; ``s`` defaults to the bound at ``s_posterior``."""

    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    hidden: int = 64
    width: int = 16
    fusion: FusionKind = FusionKind.MID_CONCAT
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    s: float | None = None
    s_posterior: float = 0.999
    aux_heads: bool = False
    aux_weight: float = 1.0

    def scale(self) -> float:
        return self.s if self.s is not None else default_scale(self.data.n_classes, self.s_posterior)

    def train_config(self, arm, seed: int) -> TrainConfig:
        variant = Variant.parse(arm)
        loss = LossConfig(variant, self.scale(), self.aux_weight)
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum,
                           loss, seed)


@dataclass
class ArmRun:
    arm: str
    seed: int
    result: RunResult


def run_one(cfg: ExperimentConfig, arm: str, seed: int, dataset: Dataset | None = None,
            out_dir=None) -> ArmRun:
    ds = dataset if dataset is not None else generate_classification(replace(cfg.data, seed=seed))
    model_cfg = default_model_config(ds, cfg.hidden, cfg.width, cfg.fusion, cfg.aux_heads)
    result = train(ds, model_cfg, cfg.train_config(arm, seed), out_dir, tag=f"{arm}_seed{seed}")
    if out_dir is not None:
        traj = Path(out_dir) / f"{arm}_seed{seed}_norm_ratio.csv"
        write_norm_trajectory(traj, result)
    return ArmRun(arm, seed, result)


def write_norm_trajectory(path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "mean_norm_ratio", "max_norm_ratio"])
        for r in result.diagnostics:
            w.writerow([r.step, r.epoch, repr(r.mean_norm_ratio), repr(r.max_norm_ratio)])


def compare(cfg: ExperimentConfig, arms=("vanilla", "mmcosine"), seeds=range(5),
            dataset: Dataset | None = None, out_dir=None, workers: int = 1) -> list[ArmRun]:
    """Train every (seed, arm) pair; results come back ordered by seed, then arm."""
    jobs = [(arm, seed) for seed in seeds for arm in arms]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    if workers <= 1:
        return [run_one(cfg, arm, seed, dataset, out_dir) for arm, seed in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_one, cfg, arm, seed, dataset, out_dir) for arm, seed in jobs]
        return [f.result() for f in futures]


def median_by_arm(runs: list[ArmRun], key) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in runs:
        out.setdefault(r.arm, []).append(key(r.result))
    return {arm: statistics.median(v) for arm, v in out.items()}


def summary_rows(runs: list[ArmRun]) -> list[dict]:
    rows = []
    for r in runs:
        res = r.result
        traj = f"{r.arm}_seed{r.seed}_norm_ratio.csv"
        rows.append({
            "arm": r.arm, "seed": str(r.seed), "joint_acc": res.test_accuracy,
            "probe_a": res.probe_a, "probe_v": res.probe_v, "probe_gap": res.probe_gap,
            "approx_acc_a": res.approx_acc_a, "approx_acc_v": res.approx_acc_v,
            "angle_median_a": res.angle_median_a, "angle_median_v": res.angle_median_v,
            "final_norm_ratio": res.final_norm_ratio, "norm_trajectory": traj,
        })
    return rows


def write_summary(path, runs: list[ArmRun]) -> None:
    """One row per (seed, arm), then one ``median`` row per arm."""
    rows = summary_rows(runs)
    arms = list(dict.fromkeys(r.arm for r in runs))
    numeric = [f for f in SUMMARY_FIELDS if f not in ("arm", "seed", "norm_trajectory")]
    for arm in arms:
        mine = [r for r in rows if r["arm"] == arm]
        med = {"arm": arm, "seed": "median", "norm_trajectory": ""}
        for f in numeric:
            med[f] = statistics.median(r[f] for r in mine)
        rows.append(med)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([r[f] if isinstance(r[f], str) else repr(float(r[f])) for f in SUMMARY_FIELDS])
