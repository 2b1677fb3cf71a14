"""Command-line entry point.

Every subcommand ends by printing ``RESULT <json>`` on stdout. Exit codes:
0 success, 1 domain error (bad data, config or checkpoint), 2 usage error.
Set ``RCCM_THREADS`` to cap the number of torch worker threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError
from .metrics import MetricsReport
from .synthdata import (
    CLASS_NAMES,
    DatasetError,
    PhantomConfig,
    from_uint8,
    generate_dataset,
    load_dataset,
    read_pgm,
    save_dataset,
    split_dataset,
    split_from_ids,
    write_pgm,
)
from .training import TrainConfig, ablate, evaluate, load_config, load_trained, predict_batch, train

SPLIT_FILE = "split.json"
DOMAIN_ERRORS = (DatasetError, CheckpointError, ValueError, OSError, RuntimeError)


@dataclass
class CommandResult:
    exit_code: int = 0
    artifacts: list[str] = field(default_factory=list)
    summary: str = ""
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        payload = {"exit_code": self.exit_code, "summary": self.summary, "artifacts": self.artifacts, **self.data}
        return "RESULT " + json.dumps(payload, sort_keys=True)


def _int_triple(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0:
        raise argparse.ArgumentTypeError(f"expected three non-negative integers, got {text!r}")
    return parts


def _float_pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return lo, hi


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return vals


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("epochs", "seed", "batch_size") if getattr(args, k, None) is not None}
    return replace(cfg, **overrides) if overrides else cfg


def _check_shapes(cfg: TrainConfig, samples) -> None:
    shape = samples[0].image.shape
    if tuple(cfg.model.input_shape[1:]) != shape:
        raise ValueError(f"data images are {shape[0]}x{shape[1]} but model.input_shape is {tuple(cfg.model.input_shape)}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate_data(args) -> CommandResult:
    cfg = PhantomConfig(
        image_height=args.height,
        image_width=args.width,
        pixel_spacing=args.spacing,
        area_range=args.area_range,
        seed=args.seed,
    )
    samples = generate_dataset(cfg, args.counts)
    manifest = save_dataset(samples, args.out)
    out = Path(args.out)
    files = [str(out / "images" / f"{s.id}.pgm") for s in samples] + [str(out / "masks" / f"{s.id}.pgm") for s in samples]
    return CommandResult(
        artifacts=[str(manifest), *files],
        summary=f"wrote {len(samples)} samples to {out}",
        data={"n_samples": len(samples), "counts": list(args.counts)},
    )


def cmd_train(args) -> CommandResult:
    cfg = _train_config(args)
    samples = load_dataset(args.data)
    _check_shapes(cfg, samples)
    split = split_dataset(samples, seed=args.split_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split_path = out / SPLIT_FILE
    split_path.write_text(
        json.dumps({"data": str(Path(args.data).resolve()), "split_seed": args.split_seed, "ids": split.ids()}, indent=2, sort_keys=True)
        + "\n"
    )
    record = train(split, cfg, out_dir=out, resume_from=args.resume)
    artifacts = [str(split_path), str(out / "config.echo.json"), str(out / "record.jsonl"), str(record.final_checkpoint)]
    data = {"config_hash": record.config_hash, "parameter_checksum": record.parameter_checksum, "epochs": cfg.epochs}
    summary = f"trained {cfg.epochs} epochs"
    if record.final_val_report is not None:
        artifacts.append(str(out / "report.json"))
        summary += f"; val {record.final_val_report.summary()}"
    return CommandResult(artifacts=artifacts, summary=summary, data=data)


def _run_split(run: Path, data_override: str | None):
    meta = json.loads((run / SPLIT_FILE).read_text())
    samples = load_dataset(data_override or meta["data"])
    return split_from_ids(samples, meta["ids"], meta["split_seed"])


def cmd_evaluate(args) -> CommandResult:
    if args.run:
        run = Path(args.run)
        checkpoint = Path(args.checkpoint) if args.checkpoint else run / "ckpt_final"
        samples = _run_split(run, args.data).parts()[args.split]
        out = Path(args.out) if args.out else run / f"eval_{args.split}"
    else:
        if not (args.checkpoint and args.data and args.out):
            raise ValueError("without --run, evaluate needs --checkpoint, --data and --out")
        checkpoint = Path(args.checkpoint)
        samples = load_dataset(args.data)
        out = Path(args.out)
    if not samples:
        raise ValueError(f"split {args.split!r} is empty")
    report = evaluate(checkpoint, samples, mask_source=args.mask_source)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json")
    report.write_per_sample_csv(out / "per_sample.csv")
    print(report.summary())
    return CommandResult(
        artifacts=[str(out / "report.json"), str(out / "per_sample.csv")],
        summary=report.summary(),
        data={"n_samples": report.n_samples, "dsc": report.aggregate["dsc"]["mean"], "acc": report.acc},
    )


def cmd_predict(args) -> CommandResult:
    checkpoint = Path(args.checkpoint) if args.checkpoint else Path(args.run) / "ckpt_final"
    model, cfg = load_trained(checkpoint)
    expected = tuple(cfg.model.input_shape[1:])
    artifacts, predictions = [], []
    for image_path in args.image:
        image = from_uint8(read_pgm(image_path))
        if image.shape != expected:
            raise ValueError(f"{image_path}: image is {image.shape[0]}x{image.shape[1]}, model expects {expected[0]}x{expected[1]}")
        masks, probs = predict_batch(model, torch.from_numpy(image)[None, None], args.mask_source or cfg.mask_source)
        mask_path = Path(f"{image_path}.mask.pgm")
        write_pgm(mask_path, masks[0].numpy().astype(np.uint8) * 255)
        p = probs[0].tolist()
        label = CLASS_NAMES[int(np.argmax(p))]
        print(f"class={label} probs={','.join(f'{v:.6f}' for v in p)}")
        artifacts.append(str(mask_path))
        predictions.append({"image": str(image_path), "class": label, "probs": p})
    return CommandResult(artifacts=artifacts, summary=f"predicted {len(artifacts)} image(s)", data={"predictions": predictions})


def cmd_ablate(args) -> CommandResult:
    cfg = _train_config(args)
    samples = load_dataset(args.data)
    _check_shapes(cfg, samples)
    split = split_dataset(samples, seed=args.split_seed)
    table = ablate(split, cfg, args.seeds, out_dir=args.runs_dir)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out)
    json_path = out.with_suffix(".json")
    json_path.write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    print(table.render())
    return CommandResult(
        artifacts=[str(out), str(json_path)],
        summary=f"{len(table.runs)} runs over seeds {args.seeds}",
        data={"flags": table.flags, "n_runs": len(table.runs)},
    )


def _plot(report: MetricsReport, out: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    alg = np.array([r["pa_alg_mm2"] for r in report.per_sample])
    man = np.array([r["pa_man_mm2"] for r in report.per_sample])
    paths = []

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(man, alg, s=10, alpha=0.7)
    lo, hi = float(min(man.min(), alg.min())), float(max(man.max(), alg.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=1)
    pcc = "n/a" if report.pcc is None else f"{report.pcc:.3f}"
    ax.set_title(f"Plaque area, r = {pcc}")
    ax.set_xlabel("manual area (mm$^2$)")
    ax.set_ylabel("algorithm area (mm$^2$)")
    fig.tight_layout()
    paths.append(out / "correlation.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter((alg + man) / 2, alg - man, s=10, alpha=0.7)
    if report.bland_altman is not None:
        ba = report.bland_altman
        for key, style in (("bias", "-"), ("lo", "--"), ("hi", "--")):
            ax.axhline(ba[key], color="r", ls=style, lw=1)
            ax.annotate(f"{key} {ba[key]:.3f}", (1.0, ba[key]), xycoords=("axes fraction", "data"), ha="right", va="bottom")
    ax.set_xlabel("mean area (mm$^2$)")
    ax.set_ylabel("algorithm - manual (mm$^2$)")
    ax.set_title("Bland-Altman")
    fig.tight_layout()
    paths.append(out / "bland_altman.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return [str(p) for p in paths]


def cmd_report(args) -> CommandResult:
    report = MetricsReport.from_dict(json.loads(Path(args.report).read_text()))
    print(report.summary())
    if report.pcc is not None:
        print(f"PCC {report.pcc:.4f} (p={report.pcc_p:.3g})")
    if report.bland_altman is not None:
        ba = report.bland_altman
        print(f"Bland-Altman bias {ba['bias']:.4f} limits [{ba['lo']:.4f}, {ba['hi']:.4f}] mm2")
    print("confusion matrix (rows = truth):")
    for name, row in zip(CLASS_NAMES, report.confusion_matrix):
        print(f"  {name:<12}" + "".join(f"{v:>6}" for v in row))
    artifacts = []
    if args.plots:
        out = Path(args.out) if args.out else Path(args.report).parent
        out.mkdir(parents=True, exist_ok=True)
        artifacts = _plot(report, out)
    return CommandResult(artifacts=artifacts, summary=report.summary(), data={"pcc": report.pcc, "kappa": report.kappa})


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_overrides(p) -> None:
    p.add_argument("--data", required=True, help="dataset directory with manifest.csv")
    p.add_argument("--config", help="TOML or JSON training config")
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="override config batch size")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--split-seed", dest="split_seed", type=int, default=0, help="seed of the 6:2:2 split (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rccm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", type=_int_triple, default=(238, 476, 286), help="hyper,hypo,mixed counts (default 238,476,286)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=144)
    p.add_argument("--spacing", type=float, default=0.1, help="pixel spacing in mm")
    p.add_argument("--area-range", dest="area_range", type=_float_pair, default=(10.0, 50.0), help="plaque area bounds in mm2 (default 10,50)")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model and write a run directory")
    _add_train_overrides(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--run", help="run directory written by train")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--checkpoint", help="checkpoint file (default <run>/ckpt_final)")
    p.add_argument("--data", help="dataset directory (default: the one recorded in the run)")
    p.add_argument("--out", help="output directory (default <run>/eval_<split>)")
    p.add_argument("--mask-source", dest="mask_source", choices=("s4", "mean"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment and classify single images")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--run")
    p.add_argument("--image", nargs="+", required=True, help="8-bit PGM image(s)")
    p.add_argument("--mask-source", dest="mask_source", choices=("s4", "mean"))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train the four module combinations over several seeds")
    _add_train_overrides(p)
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3], help="comma-separated seeds (default 1,2,3)")
    p.add_argument("--out", required=True, help="CSV path; a JSON twin is written alongside")
    p.add_argument("--runs-dir", dest="runs_dir", help="keep per-run directories here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="print a report and optionally plot it")
    p.add_argument("--report", required=True, help="report.json from evaluate or train")
    p.add_argument("--plots", action="store_true", help="write correlation and Bland-Altman PNGs")
    p.add_argument("--out", help="plot directory (default: next to the report)")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> CommandResult:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    threads = os.environ.get("RCCM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        result = args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        result = CommandResult(exit_code=1, summary=f"{type(exc).__name__}: {exc}")
    print(result.line())
    return result


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
