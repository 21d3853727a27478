"""Command-line entry point: ``mmcosine <command> [flags]``.

Every command accepts ``--config FILE`` holding ``key = value`` lines whose
keys are flag names (dashes or underscores); explicit flags win.  Commands
that write files also write the resolved configuration next to them.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .datagen import (
    GeneratorConfig,
    generate_classification,
    load_dataset,
    save_dataset,
)
from .diagnostics import ProbeConfig, angle_distribution, linear_probe, record_step
from .experiment import ExperimentConfig, compare, median_by_arm, write_summary
from .losses import LossConfig, Variant, default_scale, scale_lower_bound
from .metrics import DcfParams, write_trial_scores
from .model import FusionKind, load_checkpoint
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    configs_from_metadata,
    default_model_config,
    encoder_features,
    evaluate,
    predict,
    train,
)

log = logging.getLogger("mmcosine")


class UsageError(Exception):
    pass


def pct(x: float) -> str:
    return f"{100 * x:.2f}"


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def write_resolved(path, args: argparse.Namespace) -> None:
    items = {k: v for k, v in vars(args).items() if k not in ("func", "config", "command", "verbose")}
    lines = [f"{k.replace('_', '-')} = {'' if v is None else v}" for k, v in sorted(items.items())]
    Path(path).write_text("\n".join(lines) + "\n")


# argument groups -----------------------------------------------------------

def _add_gen_flags(p: argparse.ArgumentParser) -> None:
    d = GeneratorConfig()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--classes", type=int, default=d.n_classes)
    p.add_argument("--dim-a", type=int, default=d.dim_a)
    p.add_argument("--dim-v", type=int, default=d.dim_v)
    p.add_argument("--angle", type=float, default=d.inter_class_angle,
                   help="inter-class angle of the centers, radians")
    p.add_argument("--spread", type=float, default=d.intra_class_spread,
                   help="audio noise std; visual gets dominance * spread")
    p.add_argument("--dominance", type=float, default=d.dominance)
    p.add_argument("--n-train", type=int, default=d.n_train)
    p.add_argument("--n-test", type=int, default=d.n_test)


def _gen_config(a) -> GeneratorConfig:
    return GeneratorConfig(a.classes, a.dim_a, a.dim_v, a.angle, a.spread, a.dominance,
                           a.n_train, a.n_test, a.seed)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--fusion", choices=[k.value for k in FusionKind], default="concat")
    p.add_argument("--scale", type=float, default=None,
                   help="cosine scale s (default: bound at --scale-posterior, rounded up)")
    p.add_argument("--scale-posterior", type=float, default=0.9)
    p.add_argument("--aux-heads", action="store_true")
    p.add_argument("--aux-weight", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--diagnostics-every", type=int, default=0,
                   help="record every N steps on the current batch (0: once per epoch)")
    p.add_argument("--no-diagnostics", action="store_true")


def _add_dcf_flags(p: argparse.ArgumentParser) -> None:
    d = DcfParams()
    p.add_argument("--c-miss", type=float, default=d.c_miss)
    p.add_argument("--c-fa", type=float, default=d.c_fa)
    p.add_argument("--p-target", type=float, default=d.p_target)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmcosine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key = value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = command("gen-data", cmd_gen_data, "generate a synthetic bimodal dataset (.mmcdat)")
    p.add_argument("--out", required=True)
    _add_gen_flags(p)

    p = command("train", cmd_train, "train one model; writes <tag>.ckpt, <tag>.jsonl, <tag>.config")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tag", default="run")
    p.add_argument("--variant", choices=[v.value for v in Variant], default="vanilla")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)

    p = command("evaluate", cmd_evaluate, "evaluate a checkpoint (classification or verification)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["classification", "verification"], default="classification")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--pairs", type=int, default=2000)
    p.add_argument("--target-fraction", type=float, default=0.5)
    p.add_argument("--trial-seed", type=int, default=0)
    p.add_argument("--scores-out", help="CSV of (score, is_target) rows")
    _add_dcf_flags(p)

    p = command("probe", cmd_probe, "linear-probe the frozen encoders of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-iter", type=int, default=ProbeConfig().max_iter)

    p = command("diagnose", cmd_diagnose,
                "angle dump, angle histogram and one diagnostics record for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--bins", type=int, default=60)

    p = command("bound", cmd_bound, "lower bound on the cosine scale s")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--posterior", type=float, required=True)

    p = command("compare", cmd_compare, "seed sweep over loss variants; writes summary.csv")
    p.add_argument("--arms", default="vanilla,mmcosine")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, 0..N-1")
    p.add_argument("--data", help="fixed dataset; otherwise one is generated per seed")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    _add_gen_flags(p)
    _add_train_flags(p)
    p.set_defaults(scale_posterior=0.999)
    return parser


def _peek_config(argv) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    path = _peek_config(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((t for t in argv if t in subparsers), None)
    if path and command:
        sub = subparsers[command]
        try:
            values = read_config_file(path)
        except (OSError, UsageError) as e:
            sub.error(str(e))
        known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        defaults = {}
        for k, v in values.items():
            act = known.get(k)
            if act is None:
                sub.error(f"unknown config key {k!r}")
            if act.nargs == 0:
                defaults[k] = v.lower() in ("1", "true", "yes", "on")
                continue
            if v == "":
                defaults[k] = None
                act.required = False
                continue
            try:
                defaults[k] = act.type(v) if act.type else v
            except ValueError:
                sub.error(f"bad value for {k}: {v!r}")
            if act.choices and defaults[k] not in act.choices:
                sub.error(f"bad value for {k}: {v!r}")
            act.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# commands ------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    cfg = _gen_config(a)
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e))
    ds = generate_classification(cfg)
    save_dataset(ds, a.out)
    write_resolved(a.out + ".config", a)
    print(f"wrote {a.out}: {len(ds.train)} train / {len(ds.test)} test, "
          f"{ds.n_classes} classes, seed {ds.seed}")
    return 0


def _loss_config(a, n_classes: int, variant) -> LossConfig:
    s = a.scale if a.scale is not None else default_scale(n_classes, a.scale_posterior)
    return LossConfig(variant, s, a.aux_weight)


def cmd_train(a) -> int:
    ds = load_dataset(a.data)
    model_cfg = default_model_config(ds, a.hidden, a.width, a.fusion, a.aux_heads)
    cfg = TrainConfig(a.epochs, a.batch_size, a.lr, a.momentum,
                      _loss_config(a, ds.n_classes, a.variant), a.seed,
                      a.diagnostics_every, not a.no_diagnostics)
    try:
        cfg.validate(len(ds.train))
    except ValueError as e:
        raise UsageError(str(e))
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = train(ds, model_cfg, cfg, out, tag=a.tag)
    write_resolved(out / f"{a.tag}.config", a)
    print(f"joint accuracy {pct(res.test_accuracy)}%  "
          f"approx audio {pct(res.approx_acc_a)}%  approx visual {pct(res.approx_acc_v)}%")
    print(f"probe audio {pct(res.probe_a)}%  probe visual {pct(res.probe_v)}%  "
          f"gap {pct(res.probe_gap)}")
    print(f"checkpoint {res.checkpoint_path}")
    return 0


def _load(a):
    params, meta = load_checkpoint(a.checkpoint)
    model_cfg, train_cfg = configs_from_metadata(meta)
    ds = load_dataset(a.data)
    return params, model_cfg, train_cfg, ds


def cmd_evaluate(a) -> int:
    params, model_cfg, train_cfg, ds = _load(a)
    split = ds.test if a.split == "test" else ds.train
    if a.task == "classification":
        m = evaluate(params, model_cfg, train_cfg.loss, split, "classification")
        print(f"joint accuracy {pct(m['accuracy'])}%  approx audio {pct(m['approx_acc_a'])}%  "
              f"approx visual {pct(m['approx_acc_v'])}%")
        return 0
    m = evaluate(params, model_cfg, train_cfg.loss, split, "verification", n_pairs=a.pairs,
                 target_fraction=a.target_fraction, seed=a.trial_seed,
                 dcf=DcfParams(a.c_miss, a.c_fa, a.p_target))
    if a.scores_out:
        write_trial_scores(a.scores_out, m["trials"])
    print(f"EER {pct(m['eer'])}%  minDCF {m['min_dcf']:.3f}")
    return 0


def cmd_probe(a) -> int:
    params, model_cfg, train_cfg, ds = _load(a)
    tr = encoder_features(params, model_cfg, ds.train)
    te = encoder_features(params, model_cfg, ds.test)
    acc_a, acc_v = linear_probe(tr, ds.train.labels, te, ds.test.labels, model_cfg.n_classes,
                                replace(train_cfg.probe, max_iter=a.max_iter))
    print(f"probe audio {pct(acc_a)}%  probe visual {pct(acc_v)}%  gap {pct(abs(acc_a - acc_v))}")
    return 0


def cmd_diagnose(a) -> int:
    params, model_cfg, train_cfg, ds = _load(a)
    split = ds.test if a.split == "test" else ds.train
    loss_cfg = train_cfg.loss
    _, fused, logits = predict(params, model_cfg, loss_cfg, split)
    w_a, w_v = params["head.w_a"].values, params["head.w_v"].values
    angles = angle_distribution(fused.block_a.values, fused.block_v.values, w_a, w_v, split.labels)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    angles.write_csv(out / "angles.csv", step=0)
    h_a, h_v, edges = angles.histogram(a.bins)
    with open(out / "angle_hist.csv", "w") as fh:
        fh.write("bin_lo,bin_hi,audio,visual\n")
        fh.writelines(f"{lo!r},{hi!r},{ca},{cv}\n" for lo, hi, ca, cv in zip(edges[:-1], edges[1:], h_a, h_v))
    cosine = loss_cfg.variant is Variant.MMCOSINE
    rec = record_step(0, fused.block_a.values, fused.block_v.values, w_a, w_v,
                      None if cosine else params["head.b"].values, split.labels,
                      np.argmax(logits, axis=1), float("nan"), cosine=cosine)
    (out / "diagnostics.jsonl").write_text(rec.to_json() + "\n")
    write_resolved(out / "diagnose.config", a)
    med_a, med_v = angles.medians()
    print(f"median angle audio {med_a:.4f} rad  visual {med_v:.4f} rad")
    print(f"mean weight-norm ratio a/v {rec.mean_norm_ratio:.4f}")
    return 0


def cmd_bound(a) -> int:
    try:
        s = scale_lower_bound(a.classes, a.posterior)
    except ValueError as e:
        raise UsageError(str(e))
    print(f"{s:.6f}")
    return 0


def cmd_compare(a) -> int:
    arms = [x.strip() for x in a.arms.split(",") if x.strip()]
    for arm in arms:
        try:
            Variant.parse(arm)
        except ValueError as e:
            raise UsageError(str(e))
    if a.seeds < 1:
        raise UsageError("--seeds must be positive")
    cfg = ExperimentConfig(
        data=_gen_config(a), hidden=a.hidden, width=a.width, fusion=FusionKind.parse(a.fusion),
        epochs=a.epochs, batch_size=a.batch_size, learning_rate=a.lr, momentum=a.momentum,
        s=a.scale, s_posterior=a.scale_posterior, aux_heads=a.aux_heads, aux_weight=a.aux_weight,
    )
    dataset = load_dataset(a.data) if a.data else None
    out = Path(a.out_dir)
    runs = compare(cfg, arms, range(a.seeds), dataset, out, a.workers)
    write_summary(out / "summary.csv", runs)
    write_resolved(out / "compare.config", a)
    gap = median_by_arm(runs, lambda r: r.probe_gap)
    acc = median_by_arm(runs, lambda r: r.test_accuracy)
    for arm in arms:
        print(f"{arm:>9}: median joint accuracy {pct(acc[arm])}%  median probe gap {pct(gap[arm])}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mmcosine {args.command}: error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"mmcosine {args.command}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"mmcosine {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
