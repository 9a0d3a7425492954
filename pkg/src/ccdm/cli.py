"""Command-line entry point: ``ccdm <subcommand> ...``.

Every subcommand takes an optional JSON config file; explicit flags override
its values and the merged configuration is written to ``run_manifest.json``
in the output directory. Set ``CCDM_THREADS`` to evaluate or sample several
images concurrently.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from ccdm import __version__
from ccdm.data import (AnnotatedExample, DatasetError, GeneratorSpec, exact_gt_distribution,
                       generate_dataset, load_dataset, write_dataset)
from ccdm.denoiser import DenoiserConfig
from ccdm.diffusion import cosine_schedule, uniform_tv
from ccdm.metrics import METRIC_NAMES, MetricReport, evaluate_image
from ccdm.pgm import read_image, read_label_map, write_label_map
from ccdm.sampler import sample_many, visited_steps
from ccdm.trainer import PRESETS, TrainConfig, TrainingDivergedError, TrainState, train

log = logging.getLogger("ccdm")

SAMPLES_FORMAT = "ccdm-samples/1"


class CLIError(Exception):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CCDM_THREADS", "1")))
    except ValueError:
        raise CLIError("CCDM_THREADS must be an integer") from None


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise CLIError(f"cannot read config {path}: {err}") from None


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_manifest(out: Path, command: str, config: dict, seed, started: str, artifacts: list,
                    metrics: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "git": _git_describe(),
        "started": started,
        "finished": _now(),
        "artifacts": sorted(str(a) for a in artifacts),
        "metrics": metrics or {},
    }
    _write_atomic(out / "run_manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# -- make-data ----------------------------------------------------------------------


def cmd_make_data(args) -> None:
    spec_dict = _load_json(args.spec)
    try:
        spec = GeneratorSpec.from_dict(spec_dict) if spec_dict else GeneratorSpec()
        examples = generate_dataset(spec, args.count, args.seed)
    except (DatasetError, TypeError) as err:
        raise CLIError(f"invalid generator spec: {err}") from None
    out = Path(args.out)
    started = _now()
    manifest = write_dataset(out, examples, spec)
    config = {"spec": spec.to_dict(), "count": args.count, "seed": args.seed}
    _write_manifest(out, "make-data", config, args.seed, started, [manifest.relative_to(out)])
    print(f"wrote {len(examples)} examples to {out}")


# -- train ----------------------------------------------------------------------------


def _train_config(args) -> tuple[TrainConfig, DenoiserConfig | None, dict]:
    file_cfg = _load_json(args.config)
    preset = args.preset or file_cfg.get("preset", "toy")
    if preset not in PRESETS:
        raise CLIError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = PRESETS[preset].to_dict()
    merged.update(file_cfg.get("train", {}))
    for key in ("T", "epochs", "batch_size", "seed", "lr_start", "lr_end", "polyak_alpha"):
        val = getattr(args, key)
        if val is not None:
            merged[key] = val
    try:
        cfg = TrainConfig.from_dict(merged)
    except (ValueError, TypeError) as err:
        raise CLIError(f"invalid train config: {err}") from None
    model = file_cfg.get("model")
    return cfg, model, {"preset": preset, "train": cfg.to_dict()}


def cmd_train(args) -> None:
    cfg, model_dict, effective = _train_config(args)
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise CLIError(f"data directory not found: {data_dir}")
    dataset = load_dataset(data_dir)
    val_set = load_dataset(args.val_data) if args.val_data else None
    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    state = None
    if args.resume:
        state = TrainState.load(args.resume)
        model_cfg = state.model.config
    else:
        L = dataset[0].num_classes
        base = {"num_classes": L, "image_channels": dataset[0].image.shape[0]}
        base.update(model_dict or {})
        try:
            model_cfg = DenoiserConfig.from_dict(base)
        except (ValueError, TypeError) as err:
            raise CLIError(f"invalid model config: {err}") from None
    effective["model"] = model_cfg.to_dict()
    effective["data"] = str(data_dir)
    effective["resume"] = args.resume
    _write_atomic(out / "config.json", json.dumps(effective, indent=1, sort_keys=True) + "\n")

    state = train(dataset, cfg, model_cfg, state=state, log_path=out / "run_log.csv",
                  checkpoint_dir=ckpt_dir, val_set=val_set)
    state.save(out / "final.ckpt")
    from ccdm.plotting import plot_losses

    hist = state.history
    plot_losses([h[0] for h in hist], [h[2] for h in hist], state.epoch_losses, out / "loss.png")
    artifacts = ["final.ckpt", "run_log.csv", "loss.png", "config.json"]
    artifacts += [p.relative_to(out) for p in sorted(ckpt_dir.glob("*.ckpt"))]
    metrics = {"final_epoch_loss": state.epoch_losses[-1] if state.epoch_losses else None,
               "steps": state.step, "num_params": state.num_params()}
    _write_manifest(out, "train", effective, cfg.seed, started, artifacts, metrics)
    print(f"trained {state.step} steps; checkpoint {out / 'final.ckpt'}")


# -- sample ----------------------------------------------------------------------------


def _sample_inputs(path: Path) -> list[tuple[str, np.ndarray]]:
    if path.is_dir() or path.name == "manifest.json":
        return [(ex.id, ex.image) for ex in load_dataset(path)]
    if not path.exists():
        raise CLIError(f"input not found: {path}")
    return [(path.stem, read_image(path))]


def cmd_sample(args) -> None:
    file_cfg = _load_json(args.config)
    n = args.samples if args.samples is not None else file_cfg.get("samples", 16)
    stride = args.stride if args.stride is not None else file_cfg.get("stride", 1)
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    use_polyak = not args.no_polyak and file_cfg.get("use_polyak", True)
    if n < 1:
        raise CLIError("--samples must be >= 1")
    state = TrainState.load(args.checkpoint)
    try:
        visited_steps(state.schedule.T, stride)
    except ValueError as err:
        raise CLIError(str(err)) from None
    inputs = _sample_inputs(Path(args.input))
    cfg = state.model.config
    for image_id, image in inputs:
        if image.shape[0] != cfg.image_channels:
            raise CLIError(f"{image_id}: image has {image.shape[0]} channels, checkpoint expects "
                           f"{cfg.image_channels}")
        try:
            cfg.check_spatial(*image.shape[1:])
        except ValueError as err:
            raise CLIError(f"{image_id}: {err}") from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    params = state.eval_params(use_polyak)

    def run(item):
        idx, (image_id, image) = item
        maps, probs = sample_many(state.model, params, image, state.schedule, n, stride,
                                  seed=[seed, idx], return_probs=True)
        d = out / image_id
        d.mkdir(exist_ok=True)
        names = []
        for k, lm in enumerate(maps):
            write_label_map(d / f"sample_{k:04d}.pgm", lm)
            names.append(f"{image_id}/sample_{k:04d}.pgm")
        np.save(d / "probs.npy", np.stack(probs))
        return {"id": image_id, "samples": names, "probs": f"{image_id}/probs.npy",
                "seed": [seed, idx]}

    with ThreadPoolExecutor(_threads()) as pool:
        entries = list(pool.map(run, enumerate(inputs)))
    index = {"format": SAMPLES_FORMAT, "num_classes": cfg.num_classes, "num_samples": n,
             "stride": stride, "seed": seed, "use_polyak": use_polyak, "images": entries}
    _write_atomic(out / "samples.json", json.dumps(index, indent=1, sort_keys=True) + "\n")
    from ccdm.plotting import plot_samples

    first_maps = [read_label_map(out / p, cfg.num_classes).labels for p in entries[0]["samples"]]
    plot_samples(inputs[0][1][0], first_maps, out / "samples.png")
    config = {"checkpoint": str(args.checkpoint), "input": str(args.input), "samples": n,
              "stride": stride, "seed": seed, "use_polyak": use_polyak}
    _write_manifest(out, "sample", config, seed, started, ["samples.json", "samples.png"])
    print(f"wrote {n} samples for {len(inputs)} image(s) to {out}")


# -- eval ------------------------------------------------------------------------------


def _load_predictions(path: Path):
    """Map image id -> (samples, probs or None, seed)."""
    if (path / "samples.json").exists():
        index = json.loads((path / "samples.json").read_text())
        if index.get("format") != SAMPLES_FORMAT:
            raise CLIError(f"{path}: unsupported sample index format")
        L = index["num_classes"]
        out = {}
        for e in index["images"]:
            maps = [read_label_map(path / p, L) for p in e["samples"]]
            probs_path = path / e["probs"]
            probs = list(np.load(probs_path)) if probs_path.exists() else None
            out[e["id"]] = (maps, probs, e.get("seed"))
        return out
    if (path / "manifest.json").exists():
        return {ex.id: (ex.rater_maps, None, None) for ex in load_dataset(path)}
    raise CLIError(f"{path}: neither samples.json nor manifest.json found")


def cmd_eval(args) -> None:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = sorted(set(metrics) - set(METRIC_NAMES))
    if unknown:
        raise CLIError(f"unknown metric(s) {unknown}; choose from {list(METRIC_NAMES)}")
    preds = _load_predictions(Path(args.pred))
    gt_examples: dict[str, AnnotatedExample] = {ex.id: ex for ex in load_dataset(args.gt)}
    n = args.n
    missing = sorted(set(preds) - set(gt_examples))
    if missing:
        raise CLIError(f"no ground truth for image(s) {missing[:5]}")
    for image_id, (maps, _, _) in preds.items():
        if len(maps) < n:
            raise CLIError(f"{image_id}: {len(maps)} samples available, --n {n} requested")

    def run(image_id):
        maps, probs, seed = preds[image_id]
        ex = gt_examples[image_id]
        if args.gt_mode == "exact":
            gt, weights = exact_gt_distribution(ex)
        else:
            gt, weights = ex.rater_maps, None
        row = evaluate_image(maps[:n], gt, metrics, probs=probs[:n] if probs else None,
                             exclude_self=args.exclude_self, gt_weights=weights)
        return {"image_id": image_id, "n": n, "seed": seed, **row}

    started = _now()
    with ThreadPoolExecutor(_threads()) as pool:
        rows = list(pool.map(run, sorted(preds)))
    report = MetricReport(n_samples=n, metrics=metrics, per_image=rows).finalize()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_atomic(out / "report.json", report.to_json())
    _write_atomic(out / "report.csv", report.to_csv())
    from ccdm.plotting import plot_report

    plot_report(rows, out / "report.png")
    summary = {k: getattr(report, k) for k in ("ged", "hm_iou", "diversity", "miou")}
    config = {"pred": str(args.pred), "gt": str(args.gt), "metrics": metrics, "n": n,
              "gt_mode": args.gt_mode, "exclude_self": args.exclude_self}
    _write_manifest(out, "eval", config, None, started,
                    ["report.json", "report.csv", "report.png"], summary)
    for key, val in summary.items():
        if val is not None:
            print(f"{key}\t{val:.6f}")


# -- inspect-schedule ----------------------------------------------------------------------


def cmd_inspect_schedule(args) -> None:
    sched = cosine_schedule(args.T)
    tv = uniform_tv(sched, args.L)
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "beta", "alpha_bar"])
        for t in range(1, sched.T + 1):
            w.writerow([t, repr(float(sched.beta[t])), repr(float(sched.alpha_bar[t]))])
        sys.stdout.write(buf.getvalue())
        sys.stdout.write(f"# tv_uniform,{tv!r}\n")
    else:
        print(f"{'t':>5} {'beta_t':>12} {'alpha_bar_t':>14}")
        for t in range(1, sched.T + 1):
            print(f"{t:>5} {sched.beta[t]:>12.6g} {sched.alpha_bar[t]:>14.6g}")
        print(f"TV(q(x_T|x_0), uniform) with L={args.L}: {tv:.3e}")
    if args.plot:
        from ccdm.plotting import plot_schedule

        plot_schedule(sched.alpha_bar, sched.beta, args.plot)


# -- parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccdm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="generate a synthetic multi-rater dataset")
    s.add_argument("--spec", help="generator spec JSON (default: two-mode 8x8)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", help="train a denoiser")
    s.add_argument("--config", help="JSON with optional keys preset, train, model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--val-data")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--T", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr-start", dest="lr_start", type=float)
    s.add_argument("--lr-end", dest="lr_end", type=float)
    s.add_argument("--polyak-alpha", dest="polyak_alpha", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw label maps for images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="dataset directory or a single PGM image")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--samples", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-polyak", action="store_true", help="use raw instead of averaged weights")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="score sample sets against ground truth")
    s.add_argument("--pred", required=True, help="sample directory (or a dataset directory)")
    s.add_argument("--gt", required=True, help="dataset directory or manifest.json")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", default="ged,hmiou,div,miou")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--gt-mode", choices=("raters", "exact"), default="raters")
    s.add_argument("--exclude-self", action="store_true",
                   help="drop i == j pairs from within-set GED terms")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-schedule", help="print the cosine noise schedule")
    s.add_argument("--T", type=int, default=250)
    s.add_argument("--L", type=int, default=2)
    s.add_argument("--csv", action="store_true")
    s.add_argument("--plot", help="write a schedule figure to this path")
    s.set_defaults(func=cmd_inspect_schedule)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if getattr(args, "out", None) else None
    try:
        args.func(args)
    except (CLIError, DatasetError, TrainingDivergedError, ValueError, OSError) as err:
        print(f"ccdm {args.command}: error: {err}", file=sys.stderr)
        if out is not None and out.exists():
            (out / "FAILED").write_text(f"{err}\n")
        return 1
    if out is not None and (out / "FAILED").exists():
        (out / "FAILED").unlink()
    return 0


if __name__ == "__main__":
    sys.exit(main())
