"""
Pre-forgettable classifier command line.

Trains a frozen prompt-gated encoder for recognition and abstention, removes class
prompts to unlearn them, and runs the evaluation harness (retain/forget accuracy,
scenario sweeps, sequential inference, membership inference, LoRA-removal check,
ablations).
"""

import argparse
import logging
import os
import sys
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from config.app_config import IdxSource, RunConfig, get_settings, load_run_config, save_run_config
from config.model_config import AblationSwitches, ConfigError, TrainConfig
from modules import numerics
from modules.checkpoint_store import load_checkpoint, save_checkpoint
from modules.dataset import Dataset, SyntheticSpec, export_idx, generate_synthetic, load_idx
from modules.evaluator import (
    default_forget_counts, forget_accuracy, jailbreak_eval, overall_accuracy, parse_schedule,
    read_trace_csv, retain_accuracy, scenario_sweep, sequential_inference, write_sweep_csv,
    write_trace_csv,
)
from modules.membership_attack import mia_attack, write_mia_report
from modules.model_runner import PreForgettableModel, build_model
from modules.numerics import derive_seed, optimizer_step_count
from modules.plotting import render_trace_svg
from modules.prompt_pool import ForgetScenario
from modules.trainer import fit, write_loss_log

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("train", "eval", "forget", "sweep", "sequential", "mia", "jailbreak",
               "ablate", "plot", "export-idx")


# ---------------------------------------------------------------------------
# Run configuration and data
# ---------------------------------------------------------------------------

def build_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        run = load_run_config(args.config)
    else:
        run = RunConfig(output_dir=os.path.join(get_settings().output_dir, args.command))
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    train = run.train.to_dict()
    for flag, key in (("epochs", "epochs"), ("lam", "lam"), ("lr", "lr"), ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    if getattr(args, "full_knowledge", False):
        train["full_knowledge"] = True
    if getattr(args, "ablation", None):
        train["ablation"] = vars(AblationSwitches.preset(args.ablation))
    if getattr(args, "progress", False):
        train["progress"] = True
    run.train = TrainConfig(**train)
    if getattr(args, "idx_train_images", None):
        run.data = IdxSource(args.idx_train_images, args.idx_train_labels,
                             args.idx_test_images, args.idx_test_labels)
    elif isinstance(run.data, SyntheticSpec):
        if getattr(args, "samples_per_class", None):
            run.data.samples_per_class = args.samples_per_class
        if getattr(args, "noise_std", None) is not None:
            run.data.noise_std = args.noise_std
    if getattr(args, "out", None):
        run.output_dir = args.out
    return run.resolve_seeds()


def load_splits(run: RunConfig) -> Tuple[Dataset, Dataset]:
    """(train, test) for the run's data source"""
    if isinstance(run.data, IdxSource):
        train = load_idx(run.data.train_images, run.data.train_labels)
        test = load_idx(run.data.test_images, run.data.test_labels)
    else:
        splits = generate_synthetic(run.data)
        train, test = splits.train, splits.test
    enc = run.encoder
    expected = (enc.image_size, enc.image_size, enc.channels)
    if tuple(train.images.shape[1:]) != expected:
        raise ConfigError(f"data images are {tuple(train.images.shape[1:])}, encoder expects {expected}")
    if max(train.num_classes, test.num_classes) > enc.num_classes:
        raise ConfigError(f"data has {train.num_classes} classes, encoder head has {enc.num_classes}")
    return train, test


def new_model(run: RunConfig, seed: Optional[int] = None) -> PreForgettableModel:
    seed = run.seed if seed is None else seed
    return build_model(run.encoder, init_seed=derive_seed(seed, "init"),
                       sampler_seed=derive_seed(seed, "sampler"))


def open_checkpoint(path: str) -> Tuple[PreForgettableModel, RunConfig, dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, metadata = load_checkpoint(path)
    run = RunConfig.from_dict(metadata.get("run_config", {})).resolve_seeds()
    return model, run, metadata


def output_dir(args, fallback: str) -> str:
    directory = getattr(args, "out", None) or fallback
    os.makedirs(directory, exist_ok=True)
    return directory


def write_rows(path: str, rows: List[dict]):
    pd.DataFrame(rows).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    run = build_run_config(args)
    out = output_dir(args, run.output_dir)
    train, test = load_splits(run)
    model = new_model(run)
    result = fit(model, train, run.train)
    path = args.checkpoint or os.path.join(out, "model.pfgt")
    digest = save_checkpoint(model, path, metadata={"run_config": run.to_dict(include_output=False)})
    write_loss_log(result.log, os.path.join(out, "loss_log.csv"))
    save_run_config(run, os.path.join(out, "run_config.json"))
    logger.info(f"✅ Trained model saved to {path} (sha256 {digest}); "
                f"test accuracy {overall_accuracy(model, test):.2f}%")
    return 0


def cmd_eval(args) -> int:
    model, run, _ = open_checkpoint(args.checkpoint)
    _, test = load_splits(run)
    out = output_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    forgotten = [c for c in range(model.config.num_classes) if not model.pool.active[c]]
    scenario = ForgetScenario.from_forget(model.config.num_classes, forgotten)
    row = {
        "scenario": scenario.describe(),
        "acc_r": round(retain_accuracy(model, test, scenario, args.renormalize), 4)
        if scenario.retain_set else "",
        "acc_f": round(forget_accuracy(model, test, scenario, args.renormalize), 4)
        if scenario.forget_set else "",
        "overall": round(overall_accuracy(model, test), 4),
    }
    write_rows(os.path.join(out, "eval.csv"), [row])
    logger.info(f"Eval: {row}")
    return 0


def cmd_forget(args) -> int:
    model, _, metadata = open_checkpoint(args.checkpoint)
    classes = [int(c) for c in args.classes.split(",") if c.strip()]
    steps_before = optimizer_step_count()
    for c in classes:
        if args.restore:
            model.pool.restore_prompt(c)
        elif args.purge:
            model.pool.purge_prompt(c)
        else:
            model.pool.remove_prompt(c)
    if optimizer_step_count() != steps_before:
        raise RuntimeError("unlearning triggered an optimizer step")
    save_checkpoint(model, args.checkpoint, metadata=metadata)
    logger.info(f"Active prompts now {model.pool.active_classes()}")
    return 0


def cmd_sweep(args) -> int:
    model, run, _ = open_checkpoint(args.checkpoint)
    _, test = load_splits(run)
    out = output_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    counts = ([int(f) for f in args.f.split(",")] if args.f
              else default_forget_counts(model.config.num_classes))
    reports = [scenario_sweep(model, test, f, seed=run.seed, renormalize=args.renormalize) for f in counts]
    write_sweep_csv(reports, os.path.join(out, "sweep.csv"), os.path.join(out, "sweep_rows.csv"))
    return 0


def cmd_sequential(args) -> int:
    model, run, _ = open_checkpoint(args.checkpoint)
    _, test = load_splits(run)
    out = output_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    rows = sequential_inference(model, test, parse_schedule(args.schedule),
                                batch_size=args.batch_size, seed=run.seed)
    write_trace_csv(rows, os.path.join(out, "trace.csv"))
    return 0


def cmd_mia(args) -> int:
    model, run, _ = open_checkpoint(args.checkpoint)
    train, test = load_splits(run)
    out = output_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    targets = [c for c in range(model.config.num_classes) if c != args.keep]
    report = mia_attack(model, train, test, targets, holdout_fraction=args.holdout, seed=run.seed)
    write_mia_report(report, os.path.join(out, "mia.txt"), os.path.join(out, "mia.csv"))
    return 0


def cmd_jailbreak(args) -> int:
    model, run, _ = open_checkpoint(args.checkpoint)
    _, test = load_splits(run)
    out = output_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    report = jailbreak_eval(model, test)
    write_rows(os.path.join(out, "jailbreak.csv"),
               [{"intact_accuracy": round(report.intact_accuracy, 4),
                 "stripped_accuracy": round(report.stripped_accuracy, 4)}])
    return 0


def cmd_ablate(args) -> int:
    base = build_run_config(args)
    out = output_dir(args, base.output_dir)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for preset in AblationSwitches.PRESETS:
        for seed in seeds:
            run = RunConfig.from_dict(base.to_dict())
            run.seed = seed
            run.train.ablation = AblationSwitches.preset(preset)
            run.resolve_seeds()
            train, test = load_splits(run)
            model = new_model(run)
            fit(model, train, run.train)
            reports = [scenario_sweep(model, test, f, seed=seed)
                       for f in default_forget_counts(model.config.num_classes)]
            acc_r = float(np.mean([r.acc_r[0] for r in reports]))
            acc_f = float(np.mean([r.acc_f[0] for r in reports]))
            rows.append({"config": preset, "seed": seed, "acc_r": round(acc_r, 4), "acc_f": round(acc_f, 4)})
            logger.info(f"Ablation {preset} seed {seed}: Acc_r={acc_r:.2f} Acc_f={acc_f:.2f}")
    frame = pd.DataFrame(rows, columns=["config", "seed", "acc_r", "acc_f"])
    frame.to_csv(os.path.join(out, "ablation.csv"), index=False)
    summary = (frame.groupby("config", sort=False)[["acc_r", "acc_f"]].mean().round(4)
               .rename(columns={"acc_r": "acc_r_mean", "acc_f": "acc_f_mean"}).reset_index())
    summary.to_csv(os.path.join(out, "ablation_summary.csv"), index=False)
    save_run_config(base, os.path.join(out, "run_config.json"))
    logger.info(f"Ablation summary:\n{summary.to_string(index=False)}")
    return 0


def cmd_plot(args) -> int:
    if not os.path.exists(args.trace):
        raise FileNotFoundError(f"trace not found: {args.trace}")
    rows = read_trace_csv(args.trace)
    if not rows:
        raise ConfigError(f"{args.trace} holds no trace rows")
    target = args.svg or os.path.splitext(args.trace)[0] + ".svg"
    render_trace_svg(rows, target, window=args.window, num_classes=args.num_classes)
    return 0


def cmd_export_idx(args) -> int:
    run = build_run_config(args)
    if not isinstance(run.data, SyntheticSpec):
        raise ConfigError("export-idx needs a synthetic data source")
    out = output_dir(args, run.output_dir)
    splits = generate_synthetic(run.data)
    for name in ("train", "test"):
        export_idx(getattr(splits, name), os.path.join(out, f"{name}-images-idx3-ubyte"),
                   os.path.join(out, f"{name}-labels-idx1-ubyte"))
    save_run_config(run, os.path.join(out, "run_config.json"))
    return 0


HANDLERS = {
    "train": cmd_train, "eval": cmd_eval, "forget": cmd_forget, "sweep": cmd_sweep,
    "sequential": cmd_sequential, "mia": cmd_mia, "jailbreak": cmd_jailbreak,
    "ablate": cmd_ablate, "plot": cmd_plot, "export-idx": cmd_export_idx,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run config; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--full-knowledge", action="store_true")
    p.add_argument("--ablation", choices=AblationSwitches.PRESETS)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--idx-train-images")
    p.add_argument("--idx-train-labels")
    p.add_argument("--idx-test-images")
    p.add_argument("--idx-test-labels")
    p.add_argument("--progress", action="store_true", help="show tqdm progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfgt", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    _add_run_flags(p)
    p.add_argument("--checkpoint", help="checkpoint path (default <out>/model.pfgt)")

    p = sub.add_parser("eval", help="Acc_r / Acc_f for the checkpoint's current prompt mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--renormalize", action="store_true")

    p = sub.add_parser("forget", help="remove, purge or restore class prompts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classes", required=True, help="comma-separated class indices")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--purge", action="store_true")
    mode.add_argument("--restore", action="store_true")

    p = sub.add_parser("sweep", help="forgetting scenarios f in {1, K/2, K-1}")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--f", help="comma-separated forget counts")
    p.add_argument("--renormalize", action="store_true")

    p = sub.add_parser("sequential", help="stream the test set with scheduled prompt removals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--schedule", default="", help="batch:class[+class],...")
    p.add_argument("--batch-size", type=int, default=12)

    p = sub.add_parser("mia", help="confidence-threshold membership inference, f = K-1")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--keep", type=int, default=0, help="the one retained class")
    p.add_argument("--holdout", type=float, default=0.0)

    p = sub.add_parser("jailbreak", help="accuracy with and without LoRA adapters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="KL only / +shuffle / +sampling, end to end")
    _add_run_flags(p)
    p.add_argument("--seeds", default="0,1,2")

    p = sub.add_parser("plot", help="render a trace CSV as an SVG chart")
    p.add_argument("--trace", required=True)
    p.add_argument("--svg", help="output path (default next to the trace)")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--num-classes", type=int)

    p = sub.add_parser("export-idx", help="write the synthetic splits as IDX files")
    _add_run_flags(p)
    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(level=getattr(logging, settings.log_level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    numerics.configure_threads(settings.threads)
    try:
        return HANDLERS[args.command](args)
    except (ValueError, RuntimeError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(dispatch())
