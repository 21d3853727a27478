"""Plot weight-norm-ratio trajectories and angle histograms from a compare directory.

    python scripts/plot_runs.py runs/compare

Needs the ``plot`` extra (matplotlib).  Writes norm_ratio.png and angles.png
into the same directory.  Angle histograms use the seed-0 checkpoints and
regenerate their test split, so they assume compare ran at default data settings.
"""

import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mmcosine.datagen import GeneratorConfig, generate_classification
from mmcosine.diagnostics import angle_distribution
from mmcosine.model import load_checkpoint
from mmcosine.trainer import configs_from_metadata, predict


def trajectories(root: Path):
    for path in sorted(root.glob("*_norm_ratio.csv")):
        arm = path.name.split("_seed")[0]
        rows = list(csv.DictReader(path.open()))
        yield arm, [int(r["epoch"]) + 1 for r in rows], [float(r["mean_norm_ratio"]) for r in rows]


def main(root: Path):
    colors = {"vanilla": "tab:red", "mmcosine": "tab:blue"}
    fig, ax = plt.subplots(figsize=(5, 3.5))
    seen = set()
    for arm, x, y in trajectories(root):
        ax.plot(x, y, color=colors.get(arm), alpha=0.7, label=None if arm in seen else arm)
        seen.add(arm)
    ax.axhline(1.0, color="grey", lw=0.8, ls=":")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean ||W_a|| / ||W_v||")
    ax.legend()
    fig.tight_layout()
    fig.savefig(root / "norm_ratio.png", dpi=150)

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2), sharey=True)
    bins = np.linspace(0, np.pi / 2, 40)
    for ckpt in sorted(root.glob("*_seed0.ckpt")):
        params, meta = load_checkpoint(ckpt)
        model_cfg, train_cfg = configs_from_metadata(meta)
        ds = generate_classification(GeneratorConfig(seed=train_cfg.seed))
        _, fused, _ = predict(params, model_cfg, train_cfg.loss, ds.test)
        rec = angle_distribution(fused.block_a.values, fused.block_v.values,
                                 params["head.w_a"].values, params["head.w_v"].values,
                                 ds.test.labels)
        arm = ckpt.name.split("_seed")[0]
        for ax, angles, title in zip(axes, (rec.angles_a, rec.angles_v), ("audio", "visual")):
            ax.hist(angles, bins, alpha=0.5, color=colors.get(arm), label=arm)
            ax.set_title(title)
            ax.set_xlabel("angle to own class weight (rad)")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(root / "angles.png", dpi=150)
    print(f"wrote {root / 'norm_ratio.png'} and {root / 'angles.png'}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "runs/compare"))
