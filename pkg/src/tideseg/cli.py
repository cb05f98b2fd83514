"""Command-line entry points.

One binary with subcommands covering the whole pipeline:

    tideseg synth   --config recipe.json --out corpus/
    tideseg train   --manifest corpus/manifest.tsv --out model.npz
    tideseg infer   --checkpoint model.npz --manifest eval/manifest.tsv --out preds/
    tideseg eval    --pred preds/ --manifest eval/manifest.tsv --out reports/
    tideseg ablate  --manifest corpus/manifest.tsv --t 0,5 --out study/
    tideseg report  reports/report.json ...

Flags mirror config-file fields and take precedence over them.  Every
command appends one JSON line to ``runs.jsonl`` next to its output so a
run can be reproduced from its recorded config snapshot and seed.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime
failure.  The TIDESEG_WORKERS environment variable sets how many worker
processes an ablation grid may use (default 1).
"""
from __future__ import annotations

import argparse
import datetime
import itertools
import json
import multiprocessing
import os
import sys
import time
from pathlib import Path

from . import pipeline, synth, training
from . import network as net
from .data import load_annotation, load_manifest, read_mask, write_mask
from .errors import ConfigError, DataError, RuntimeFailure, TidesegError
from .evaluation import (
    EvalConfig,
    evaluate_frame,
    f1_score,
    format_report,
    summarize,
    write_report_record,
)

AGGREGATION_FLAGS = {
    "conv3d": "conv3d",
    "avgpool1": "avgpool_1x1",
    "avgpool3": "avgpool_3x3",
}
KERNEL_CHOICES = (1, 3, 5)


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; remap them to exit 1."""

    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _load_json(path: Path | str, what: str) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise DataError(f"{what} file {path} must hold a JSON object")
    return raw


def _network_config(args) -> net.NetworkConfig:
    d = net.NetworkConfig().to_dict()
    if getattr(args, "config", None):
        d.update(_load_json(args.config, "network config"))
    if getattr(args, "t", None) is not None:
        d["t"] = args.t
    if getattr(args, "aggregation", None):
        d["aggregation"] = AGGREGATION_FLAGS[args.aggregation]
    if getattr(args, "kernel", None) is not None:
        d["spatial_kernel"] = args.kernel
    return net.NetworkConfig.from_dict(d)


def _train_config(args) -> training.TrainConfig:
    d = training.TrainConfig().to_dict()
    if getattr(args, "train_config", None):
        d.update(_load_json(args.train_config, "train config"))
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    return training.TrainConfig.from_dict(d)


def _eval_config(args, flag: str = "eval_config") -> EvalConfig:
    d = EvalConfig().to_dict()
    if getattr(args, flag, None):
        d.update(_load_json(getattr(args, flag), "eval config"))
    return EvalConfig.from_dict(d)


def _worker_count() -> int:
    raw = os.environ.get("TIDESEG_WORKERS", "1")
    try:
        workers = int(raw)
    except ValueError:
        workers = 0
    if workers < 1:
        raise ConfigError(f"TIDESEG_WORKERS must be a positive integer, got {raw!r}")
    return workers


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _append_run_record(
    record_dir: Path,
    command: str,
    config: dict,
    seed,
    started: str,
    outputs: list[str],
    metrics: dict | None,
) -> None:
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "outputs": outputs,
        "metrics": metrics,
    }
    path = record_dir / "runs.jsonl"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def _int_list(raw: str, flag: str) -> list[int]:
    values = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            values.append(int(part))
        except ValueError:
            raise ConfigError(f"{flag} expects comma-separated integers, got {raw!r}")
    return values


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------
def cmd_synth(args) -> int:
    started = _now()
    recipe = synth.load_recipe(args.config) if args.config else synth.default_recipe()
    if args.seed is not None:
        recipe["seed"] = args.seed
    if args.t is not None:
        recipe["t"] = args.t
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = synth.corpus_from_recipe(recipe, out)
    counts = manifest.subset_counts()
    print(
        f"corpus ready: {len(manifest.entries)} entries "
        f"(base {counts['base']}, extension {counts['extension']}) in {out}"
    )
    _append_run_record(
        out,
        "synth",
        {"recipe": recipe},
        recipe["seed"],
        started,
        [str(out / "manifest.tsv")],
        {"entries": len(manifest.entries), **counts},
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------
def cmd_train(args) -> int:
    started = _now()
    cfg = _network_config(args)
    tc = _train_config(args)
    manifest = load_manifest(args.manifest)
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log = ckpt.with_suffix(".loss.jsonl")
    training.train(manifest, cfg, tc, ckpt, log)
    final = json.loads(log.read_text().splitlines()[-1])
    print(f"checkpoint written to {ckpt} (final loss {final['loss']:.4f})")
    _append_run_record(
        ckpt.parent,
        "train",
        {"network": cfg.to_dict(), "train": tc.to_dict(), "manifest": str(args.manifest)},
        tc.seed,
        started,
        [str(ckpt), str(log)],
        {"final_loss": final["loss"], "steps": final["step"]},
    )
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------
def _pred_name(target_path: str) -> str:
    return Path(target_path).stem + "_pred.png"


def cmd_infer(args) -> int:
    started = _now()
    cfg, params, _meta = net.load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    cache = training.CorpusCache(manifest, cfg.t)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = []
    for entry, sample in zip(manifest.entries, cache.samples):
        t0 = time.perf_counter()
        mask = pipeline.predict_mask(sample, cfg, params)
        seconds = time.perf_counter() - t0
        name = _pred_name(entry.target_path)
        write_mask(out / name, mask)
        timings.append({"target": entry.target_path, "pred": name, "seconds": seconds})
    with open(out / "timings.jsonl", "w", encoding="utf-8") as fh:
        for row in timings:
            fh.write(json.dumps(row) + "\n")
    mean_s = sum(r["seconds"] for r in timings) / max(len(timings), 1)
    print(f"wrote {len(timings)} masks to {out} (mean {1000 * mean_s:.1f} ms/frame)")
    _append_run_record(
        out,
        "infer",
        {"network": cfg.to_dict(), "checkpoint": str(args.checkpoint), "manifest": str(args.manifest)},
        None,
        started,
        [str(out)],
        {"frames": len(timings), "mean_seconds": mean_s},
    )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------
def cmd_eval(args) -> int:
    started = _now()
    eval_cfg = _eval_config(args, flag="config")
    manifest = load_manifest(args.manifest)
    pred_dir = Path(args.pred)
    annotations: dict[str, object] = {}
    masks, anns = [], []
    for entry in manifest.entries:
        if not entry.annotation_path:
            raise DataError(f"entry {entry.sequence_id} has no annotation; cannot evaluate")
        if entry.annotation_path not in annotations:
            annotations[entry.annotation_path] = load_annotation(
                manifest.root / entry.annotation_path
            )
        pred_path = pred_dir / _pred_name(entry.target_path)
        if not pred_path.exists():
            raise DataError(f"missing prediction for {entry.target_path}: {pred_path}")
        masks.append(read_mask(pred_path))
        anns.append(annotations[entry.annotation_path])
    results = [evaluate_frame(m, a, eval_cfg) for m, a in zip(masks, anns)]
    report = summarize(results, eval_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_record(out / "report.json", report, extra={"name": args.name})
    text = format_report(report, title=args.name)
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    _append_run_record(
        out,
        "eval",
        {"eval": eval_cfg.to_dict(), "manifest": str(args.manifest), "pred": str(pred_dir)},
        None,
        started,
        [str(out / "report.json"), str(out / "report.txt")],
        {"pr": report.pr, "re": report.re, "f1": report.f1, "mu_r": report.mu_r},
    )
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------
def _ablate_entry(job: dict) -> dict:
    manifest = load_manifest(job["manifest"])
    eval_manifest = load_manifest(job["eval_manifest"])
    cfg = net.NetworkConfig.from_dict(job["net"])
    tc = training.TrainConfig.from_dict(job["train"])
    entry_dir = Path(job["out"]) / job["slug"]
    entry_dir.mkdir(parents=True, exist_ok=True)
    params = training.train(manifest, cfg, tc, entry_dir / "model.npz", entry_dir / "loss.jsonl")
    report = pipeline.evaluate_model_on_manifest(
        eval_manifest, cfg, params, EvalConfig.from_dict(job["eval"])
    )
    return {
        "label": job["label"],
        "t": cfg.t,
        "aggregation": cfg.aggregation,
        "kernel": cfg.spatial_kernel,
        "mu_r": report.mu_r,
        "fp": report.fp,
        "fp_danger": report.fp_danger,
        "f1": report.f1,
        "f1_danger": report.f1_danger,
        "pr": report.pr,
        "re": report.re,
    }


def _format_ablation_table(rows: list[dict]) -> str:
    lines = [
        f"{'config':<24} {'mu_R':>6} {'FP':>12} {'F1':>15}",
    ]
    for r in rows:
        lines.append(
            f"{r['label']:<24} {100 * r['mu_r']:>6.1f} "
            f"{r['fp']:>5} ({r['fp_danger']:>4}) "
            f"{r['f1']:>6.1f} ({r['f1_danger']:>5.1f})"
        )
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    started = _now()
    ts = _int_list(args.t_values, "--t")
    kernels = _int_list(args.kernel_values, "--kernel")
    aggs = [a.strip() for a in args.aggregation_values.split(",") if a.strip()]
    for k in kernels:
        if k not in KERNEL_CHOICES:
            raise ConfigError(f"--kernel values must be one of {KERNEL_CHOICES}, got {k}")
    for a in aggs:
        if a not in AGGREGATION_FLAGS:
            raise ConfigError(
                f"--aggregation values must be one of {sorted(AGGREGATION_FLAGS)}, got {a!r}"
            )
    grid = list(itertools.product(ts, aggs, kernels))
    if not grid:
        raise ConfigError("ablation grid is empty; give at least one --t/--aggregation/--kernel")

    base_net = net.NetworkConfig().to_dict()
    if args.config:
        base_net.update(_load_json(args.config, "network config"))
    tc = _train_config(args)
    eval_cfg = _eval_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    for t, agg, kernel in grid:
        d = dict(base_net)
        d.update({"t": t, "aggregation": AGGREGATION_FLAGS[agg], "spatial_kernel": kernel})
        label = f"T={t} {AGGREGATION_FLAGS[agg]} k={kernel}"
        jobs.append(
            {
                "label": label,
                "slug": f"t{t}_{agg}_k{kernel}",
                "net": d,
                "train": tc.to_dict(),
                "eval": eval_cfg.to_dict(),
                "manifest": str(args.manifest),
                "eval_manifest": str(args.eval_manifest or args.manifest),
                "out": str(out),
            }
        )
        net.NetworkConfig.from_dict(d)  # validate every entry before any training

    workers = _worker_count()
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.get_context("spawn").Pool(min(workers, len(jobs))) as pool:
            rows = pool.map(_ablate_entry, jobs)
    else:
        rows = [_ablate_entry(job) for job in jobs]

    table = _format_ablation_table(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    with open(out / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(table)
    _append_run_record(
        out,
        "ablate",
        {
            "grid": [j["label"] for j in jobs],
            "network": base_net,
            "train": tc.to_dict(),
            "eval": eval_cfg.to_dict(),
            "manifest": str(args.manifest),
            "eval_manifest": str(args.eval_manifest or args.manifest),
        },
        tc.seed,
        started,
        [str(out / "ablation.txt"), str(out / "ablation.jsonl")],
        {"rows": len(rows)},
    )
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------
def _collect_report_rows(paths: list[str]) -> list[dict]:
    rows = []
    for raw in paths:
        path = Path(raw)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise DataError(f"report input not found: {path}")
        if path.suffix == ".jsonl":
            candidates = [json.loads(line) for line in text.splitlines() if line.strip()]
            candidates = [c.get("metrics") or c for c in candidates]
        else:
            try:
                candidates = [json.loads(text)]
            except json.JSONDecodeError as exc:
                raise DataError(f"report input {path} is not valid JSON: {exc}")
        for c in candidates:
            if not all(k in c for k in ("pr", "re", "f1")):
                continue
            rows.append(
                {
                    "name": c.get("name") or path.stem,
                    "pr": float(c["pr"]),
                    "re": float(c["re"]),
                    "f1": float(c["f1"]),
                    "mu_r": c.get("mu_r"),
                }
            )
    if not rows:
        raise DataError("no usable Pr/Re/F1 rows found in the given report files")
    return rows


def format_comparison(rows: list[dict]) -> str:
    lines = [f"{'run':<24} {'Pr':>6} {'Re':>6} {'F1':>6} {'mu_R':>6}"]
    flagged = []
    for r in rows:
        recomputed = f1_score(r["pr"], r["re"])
        suspect = abs(recomputed - r["f1"]) > 0.05
        mu = f"{100 * r['mu_r']:>6.1f}" if r.get("mu_r") is not None else f"{'-':>6}"
        mark = " !" if suspect else ""
        lines.append(
            f"{r['name']:<24} {r['pr']:>6.1f} {r['re']:>6.1f} {r['f1']:>6.1f} {mu}{mark}"
        )
        if suspect:
            flagged.append((r["name"], r["f1"], recomputed))
    for name, stored, recomputed in flagged:
        lines.append(
            f"# inconsistency: {name} stores F1={stored:.2f} but Pr/Re give {recomputed:.2f}"
        )
    return "\n".join(lines)


def cmd_report(args) -> int:
    rows = _collect_report_rows(args.records)
    table = format_comparison(rows)
    print(table)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> _Parser:
    parser = _Parser(prog="tideseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic corpus from a recipe")
    p.add_argument("--config", help="recipe JSON (defaults built in)")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--seed", type=int, help="override the recipe seed")
    p.add_argument("--t", type=int, help="override the recipe context length")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path (.npz)")
    p.add_argument("--config", help="network config JSON")
    p.add_argument("--train-config", dest="train_config", help="train config JSON")
    p.add_argument("--t", type=int, help="context length override")
    p.add_argument("--aggregation", choices=sorted(AGGREGATION_FLAGS))
    p.add_argument("--kernel", type=int, choices=KERNEL_CHOICES)
    p.add_argument("--seed", type=int, help="training seed override")
    p.add_argument("--epochs", type=int, help="epoch count override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write predicted masks for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="prediction output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against a manifest")
    p.add_argument("--pred", required=True, help="directory of *_pred.png masks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--config", help="eval config JSON")
    p.add_argument("--name", default="evaluation", help="row label in reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score a small config grid")
    p.add_argument("--manifest", required=True, help="training corpus manifest")
    p.add_argument("--eval-manifest", dest="eval_manifest", help="held-out manifest (default: training manifest)")
    p.add_argument("--out", required=True, help="study output directory")
    p.add_argument("--t", dest="t_values", default="0,5", help="comma-separated context lengths")
    p.add_argument(
        "--aggregation",
        dest="aggregation_values",
        default="conv3d",
        help="comma-separated aggregations (conv3d,avgpool1,avgpool3)",
    )
    p.add_argument("--kernel", dest="kernel_values", default="3", help="comma-separated kernels (1,3,5)")
    p.add_argument("--config", help="network config JSON")
    p.add_argument("--train-config", dest="train_config", help="train config JSON")
    p.add_argument("--eval-config", dest="eval_config", help="eval config JSON")
    p.add_argument("--seed", type=int, help="training seed override")
    p.add_argument("--epochs", type=int, help="epoch count override")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render a comparison table from stored reports")
    p.add_argument("records", nargs="+", help="report JSON files or runs.jsonl records")
    p.add_argument("--out", help="optional path for the rendered table")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise ConfigError("a subcommand is required (see tideseg --help)")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except RuntimeFailure as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except TidesegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
