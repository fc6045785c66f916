"""Command-line entry point: train, eval, viz-sampling, bench, ablate, gen-data.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
Outputs go to ``--out``, or to ``$BOLTZFORMER_OUT/<command>`` (default root
``./runs``) when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
from scipy.ndimage import binary_erosion

from .bench import compute_report
from .boltzmann import POLICIES
from .config import RunConfig
from .errors import ConfigError, NumericalError
from .grid import SpatialField, nearest_resample_planes, write_pbm, write_pgm
from .model import BoltzFormer, build_model
from .nn_core import ParamStore
from .synthdata import SPLITS, generate_one, split_dataset, write_example
from .train import evaluate_stratified, train

log = logging.getLogger("boltzformer")

OUT_ENV = "BOLTZFORMER_OUT"
CONFIG_NAME = "resolved_config.ini"
CHECKPOINT_NAME = "model.ckpt"
METRIC_COLUMNS = ["epoch", "split", "loss_dice", "loss_bce", "dice_small", "dice_large", "dice_all",
                  "attended_pairs_mean"]
STRATA = ("small", "large", "all")

# axis name -> (config key, default values)
ABLATION_AXES: dict[str, tuple[str, list[Any]]] = {
    "tau0": ("sampler__tau0", [0.25, 0.5, 1.0, 2.0]),
    "ratio": ("sampler__sample_ratio", [0.05, 0.10, 0.20, 0.50]),
    "m": ("decoder__queries", [1, 10, 32]),
    "text_prior": ("decoder__text_prior", [True, False]),
    "pigma_correction": ("decoder__pigma_correction", [True, False]),
    "policy": ("sampler__policy", ["full", "threshold", "boltzmann"]),
}


# --- output helpers ----------------------------------------------------------------


def fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else format(float(value), ".10g")
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def output_dir(args: argparse.Namespace, command: str) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_config(args: argparse.Namespace) -> RunConfig:
    path = getattr(args, "config", None)
    ckpt = getattr(args, "checkpoint", None)
    if path is None and ckpt is not None and (Path(ckpt).parent / CONFIG_NAME).exists():
        path = Path(ckpt).parent / CONFIG_NAME
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.max_epochs={args.epochs}")
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"sampler.seed={args.seed}", f"decoder.init_seed={args.seed}",
                      f"data.seed={args.seed}"]
    return RunConfig.load(path, overrides)


def load_model(cfg: RunConfig, checkpoint: str | None) -> BoltzFormer:
    model = build_model(cfg.model_config())
    if checkpoint is not None:
        ParamStore(model).load(checkpoint)
    return model


def metric_rows(history: list[dict]) -> list[list[Any]]:
    return [[row[c] for c in METRIC_COLUMNS] for row in history]


# --- commands ------------------------------------------------------------------------


def run_training(cfg: RunConfig, out: Path) -> tuple[BoltzFormer, Any]:
    cfg.write(out)
    scene = cfg.scene_config()
    train_data = split_dataset(scene, "train", cfg.limit("train"))
    val_data = split_dataset(scene, "val", cfg.limit("val"))
    model = build_model(cfg.model_config())
    history: list[dict] = []
    metrics = out / "metrics.csv"

    def on_epoch(rows):
        history.extend(rows)
        write_csv(metrics, METRIC_COLUMNS, metric_rows(history))

    result = train(model, train_data, val_data, cfg.train_config(), on_epoch=on_epoch, diag_dir=out)
    write_csv(metrics, METRIC_COLUMNS, metric_rows(result.history))
    ParamStore(model).save(out / CHECKPOINT_NAME)
    return model, result


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = output_dir(args, "train")
    _, result = run_training(cfg, out)
    log.info("best epoch %d (val loss %.4f); checkpoint %s", result.best_epoch, result.best_val_loss,
             out / CHECKPOINT_NAME)
    return 0


def write_eval(out: Path, result, data, write_masks: bool) -> None:
    write_csv(out / "eval.csv", ["stratum", "dice_mean", "dice_std", "dice_stderr", "count"],
              [[s, result.strata[s].mean, result.strata[s].std, result.strata[s].stderr, result.strata[s].count]
               for s in STRATA])
    write_csv(out / "per_example.csv", ["index", "area_ratio", "dice"],
              zip(data.indices.tolist(), data.areas.tolist(), result.dice.tolist()))
    if write_masks:
        masks = out / "masks"
        masks.mkdir(exist_ok=True)
        for idx, prob in zip(data.indices.tolist(), result.predictions):
            write_pgm(masks / f"example_{idx:05d}.pgm", SpatialField(prob))
            write_pbm(masks / f"example_{idx:05d}.pbm", prob >= 0.5)


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = output_dir(args, "eval")
    cfg.write(out)
    model = load_model(cfg, args.checkpoint)
    limit = args.limit if args.limit is not None else cfg.limit(args.split)
    data = split_dataset(cfg.scene_config(), args.split, limit)
    result = evaluate_stratified(model, data, cfg.train_config().eval_batch_size,
                                 keep_predictions=not args.no_masks)
    write_eval(out, result, data, not args.no_masks)
    for s in STRATA:
        st = result.strata[s]
        log.info("%-5s dice %.4f +- %.4f (n=%d)", s, st.mean, st.stderr, st.count)
    return 0


def boundary(mask: np.ndarray) -> np.ndarray:
    return mask & ~binary_erosion(mask)


def cmd_viz_sampling(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = output_dir(args, "viz-sampling")
    cfg.write(out)
    lo, hi = SPLITS["train"][0], SPLITS["test"][1]
    if not lo <= args.index < hi:
        raise ConfigError(f"example index must be in [{lo}, {hi}), got {args.index}")
    model = load_model(cfg, args.checkpoint)
    model.eval()
    ex = generate_one(cfg.scene_config(), args.index)
    target = ex.mask.plane(0) > 0.5
    with torch.no_grad():
        res = model(torch.from_numpy(ex.image.data[None].copy()), torch.tensor([ex.prompt_id]),
                    example_keys=[args.index], record_trace=True)
    size = ex.image.height
    edge = boundary(target)
    write_pgm(out / "input.pgm", ex.image)
    write_pbm(out / "target.pbm", target)
    (out / "fields").mkdir(exist_ok=True)
    rows = []
    for e in res.decoder.trace.for_query(0):
        cells = e.mask[0]
        picture = nearest_resample_planes(cells.astype(np.float64), size, size)
        picture[edge] = 0.5
        flat = np.flatnonzero(cells)
        extra = {"layer": e.layer, "level": e.level, "temperature": repr(e.temperature),
                 "level_shape": f"{e.level_shape[0]}x{e.level_shape[1]}", "n_sampled": flat.size,
                 "sampled_indices": " ".join(map(str, flat.tolist()))}
        write_pgm(out / f"layer{e.layer}_query0.pgm", SpatialField(picture), extra)
        if e.probabilities is not None:
            write_pgm(out / "fields" / f"layer{e.layer}_query0_field.pgm", SpatialField(e.probabilities[0]),
                      {"temperature": repr(e.temperature)})
        rows.append([e.layer, e.level, e.temperature, e.level_shape[0], e.level_shape[1], flat.size])
    write_csv(out / "trace.csv", ["layer", "level", "temperature", "level_height", "level_width", "n_sampled"], rows)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = output_dir(args, "bench")
    cfg.write(out)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"unknown policy {p!r}; expected a subset of {POLICIES}")
    model = load_model(cfg, args.checkpoint)
    data = split_dataset(cfg.scene_config(), args.split, args.n)
    reports = [compute_report(model, data, p, args.batch_size) for p in policies]
    layer_rows, summary_rows, timing = [], [], []
    for r in reports:
        for ell in range(len(r.levels)):
            layer_rows.append([r.policy, ell, r.levels[ell], r.level_cells[ell], int(r.pairs[ell]),
                               r.pairs[ell] / r.n_forward, int(r.full_pairs_per_forward[ell]),
                               int(r.cap_per_forward[ell])])
        summary_rows.append([r.policy, r.n_forward, r.total, r.pairs_per_forward,
                             int(r.full_pairs_per_forward.sum()), r.reduction])
        timing.append(f"{r.policy} seconds_per_forward = {r.seconds_per_forward:.6f}\n")
        log.info("%-9s pairs/forward %.1f reduction %.2fx  %.4fs/forward", r.policy, r.pairs_per_forward,
                 r.reduction, r.seconds_per_forward)
    write_csv(out / "compute_layers.csv", ["policy", "layer", "level", "level_cells", "pairs_total",
                                           "pairs_per_forward", "full_pairs_per_forward", "cap_per_forward"],
              layer_rows)
    write_csv(out / "compute_summary.csv", ["policy", "n_forward", "pairs_total", "pairs_per_forward",
                                            "full_pairs_per_forward", "reduction_vs_full"], summary_rows)
    # wall-clock is machine-dependent, so it stays out of the CSVs
    (out / "timing.txt").write_text("".join(timing))
    return 0


def ablation_values(axis: str, raw: str | None) -> list[Any]:
    key, defaults = ABLATION_AXES[axis]
    if raw is None:
        return list(defaults)
    kind = type(defaults[0])
    out = []
    for tok in raw.split(","):
        tok = tok.strip()
        if kind is bool:
            out.append(tok.lower() in ("1", "true", "on", "yes"))
        else:
            out.append(kind(tok))
    return out


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = output_dir(args, "ablate")
    cfg.write(out, "base_config.ini")
    axes = list(ABLATION_AXES) if args.axis == "all" else [args.axis]
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {tuple(ABLATION_AXES)} or 'all'")
    if args.values is not None and len(axes) != 1:
        raise ConfigError("--values needs a single --axis")
    for axis in axes:
        key, _ = ABLATION_AXES[axis]
        rows = []
        for value in ablation_values(axis, args.values):
            run_cfg = cfg.updated(**{key: value})
            run_dir = out / axis / f"{axis}={fmt(value)}"
            run_dir.mkdir(parents=True, exist_ok=True)
            model, result = run_training(run_cfg, run_dir)
            test = split_dataset(run_cfg.scene_config(), "test", run_cfg.limit("test"))
            ev = evaluate_stratified(model, test, run_cfg.train_config().eval_batch_size)
            write_eval(run_dir, ev, test, write_masks=False)
            rows.append([axis, value, ev.strata["small"].mean, ev.strata["large"].mean, ev.strata["all"].mean,
                         ev.strata["small"].stderr, ev.strata["large"].stderr, ev.strata["all"].stderr,
                         ev.pairs_mean, result.best_epoch])
            log.info("%s=%s: dice small %.4f large %.4f all %.4f", axis, fmt(value), ev.strata["small"].mean,
                     ev.strata["large"].mean, ev.strata["all"].mean)
        write_csv(out / f"summary_{axis}.csv",
                  ["axis", "value", "dice_small", "dice_large", "dice_all", "stderr_small", "stderr_large",
                   "stderr_all", "attended_pairs_mean", "best_epoch"], rows)
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = output_dir(args, "gen-data")
    cfg.write(out)
    lo, hi = SPLITS[args.split]
    limit = args.limit if args.limit is not None else cfg.limit(args.split)
    scene = cfg.scene_config()
    rows = []
    for idx in range(lo, min(hi, lo + limit)):
        ex = generate_one(scene, idx)
        write_example(out / args.split, ex)
        rows.append([idx, ex.prompt_id, ex.area_ratio, ex.sampled_ratio, int(ex.floored)])
    write_csv(out / f"{args.split}_index.csv", ["index", "prompt_id", "area_ratio", "sampled_ratio", "floored"],
              rows)
    return 0


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boltzformer", description=__doc__.split("\n")[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, required_ckpt=False):
        p.add_argument("--config", help="run configuration file (key = value sections)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        p.add_argument("--seed", type=int, help="set every seed (data, init, sampler, train)")
        if checkpoint:
            p.add_argument("--checkpoint", required=required_ckpt, help="parameter file written by train")
        return p

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--epochs", type=int, help="shorthand for --set train.max_epochs=N")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="stratified Dice on a split"), checkpoint=True, required_ckpt=True)
    p.add_argument("--split", choices=tuple(SPLITS), default="test")
    p.add_argument("--limit", type=int)
    p.add_argument("--no-masks", action="store_true", help="skip per-example mask files")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("viz-sampling", help="per-layer sampled cells for query 0"), checkpoint=True)
    p.add_argument("--index", type=int, required=True, help="corpus example index")
    p.set_defaults(func=cmd_viz_sampling)

    p = common(sub.add_parser("bench", help="attended query-key pair counts per policy"), checkpoint=True)
    p.add_argument("--policies", default=",".join(POLICIES))
    p.add_argument("--n", type=int, default=100, help="forward passes (examples) per policy")
    p.add_argument("--split", choices=tuple(SPLITS), default="test")
    p.add_argument("--batch-size", type=int, default=25)
    p.set_defaults(func=cmd_bench)

    p = common(sub.add_parser("ablate", help="train/evaluate along one ablation axis"))
    p.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATION_AXES)}, or 'all'")
    p.add_argument("--values", help="comma-separated values (default: the axis grid)")
    p.add_argument("--epochs", type=int, help="shorthand for --set train.max_epochs=N")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("gen-data", help="write corpus examples as PGM/PBM/meta files"))
    p.add_argument("--split", choices=tuple(SPLITS), default="train")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
