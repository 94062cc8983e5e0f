"""Batch command line for the whole pipeline.

    hoidistill synth-gen | teacher-pretrain | supervise | train | infer | eval
    hoidistill ablate [--grid grid.json]
    hoidistill report RUN_DIR [RUN_DIR ...]

Stage layout under ``--out``::

    data/          synthetic dataset (unless data_dir is set)
    teacher/       frozen teacher archive + held-out accuracy
    supervision/   teacher distributions for the train split
    train/         student checkpoint + loss_curve.csv
    infer/         detections.json
    eval/          report.json + report.md

Exit codes: 0 ok, 2 config error, 3 missing input, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .branches import BASELINE, EARLY, FULL, TF, TFSTAR, VARIANTS
from .data import MissingInputError, load_labels, load_split, read_json, write_json
from .distill import (
    ROUTES,
    ConfigError,
    PairMismatchError,
    SupervisionCache,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    precompute_supervision,
    predict_student,
    predict_training_free,
    prepare_features,
    save_checkpoint,
    train,
    write_curve,
)
from .encoder import load_teacher, save_teacher
from .evaluator import detections_from_json, detections_to_json, evaluate
from .synthworld import default_label_space, generate_dataset, pretrain_teacher
from .tensorcore import NonFiniteError

log = logging.getLogger("hoidistill")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
TEACHER_GATE = 0.70

# run-level keys; everything else in a config file must be a TrainConfig field
RUN_DEFAULTS = {
    "out_dir": "runs/default",
    "data_dir": None,  # default <out_dir>/data
    "teacher_dir": None,  # default <out_dir>/teacher
    "n_train": 600,
    "n_test": 200,
    "teacher_epochs": 60,
    "teacher_lr": 3e-3,
    "eval_split": "test",
}


@dataclass
class RunConfig:
    train: TrainConfig
    out_dir: Path
    data_dir: Path
    teacher_dir: Path
    n_train: int
    n_test: int
    teacher_epochs: int
    teacher_lr: float
    eval_split: str

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        train_keys = {f.name for f in fields(TrainConfig)}
        unknown = set(doc) - train_keys - set(RUN_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        run = {**RUN_DEFAULTS, **{k: v for k, v in doc.items() if k in RUN_DEFAULTS}}
        tc = TrainConfig.from_dict({k: v for k, v in doc.items() if k in train_keys})
        out = Path(run["out_dir"])
        if run["eval_split"] not in ("train", "test"):
            raise ConfigError("eval_split must be 'train' or 'test'")
        for key in ("n_train", "n_test", "teacher_epochs"):
            if not isinstance(run[key], int) or run[key] < 1:
                raise ConfigError(f"{key} must be a positive integer")
        return cls(
            train=tc,
            out_dir=out,
            data_dir=Path(run["data_dir"]) if run["data_dir"] else out / "data",
            teacher_dir=Path(run["teacher_dir"]) if run["teacher_dir"] else out / "teacher",
            n_train=run["n_train"],
            n_test=run["n_test"],
            teacher_epochs=run["teacher_epochs"],
            teacher_lr=float(run["teacher_lr"]),
            eval_split=run["eval_split"],
        )

    def to_dict(self):
        d = self.train.to_dict()
        d.update(
            out_dir=str(self.out_dir), data_dir=str(self.data_dir), teacher_dir=str(self.teacher_dir),
            n_train=self.n_train, n_test=self.n_test, teacher_epochs=self.teacher_epochs,
            teacher_lr=self.teacher_lr, eval_split=self.eval_split,
        )
        return d

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def seed(self):
        return self.train.seed

    def stage(self, name):
        return self.out_dir / name


def git_describe():
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() or "unknown"


def write_run_record(stage_dir, command, rc: RunConfig, wall, serial, extra=None):
    doc = {
        "command": command,
        "config": rc.to_dict(),
        "config_hash": rc.config_hash(),
        "seed": rc.seed,
        "git_describe": git_describe(),
        "wall_time_s": round(wall, 3),
        "serial": bool(serial),
    }
    if extra:
        doc.update(extra)
    write_json(Path(stage_dir) / "run.json", doc)


@contextlib.contextmanager
def serial_mode(enabled):
    """Pin BLAS/OpenMP pools to one thread so float reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# -- stage helpers ---------------------------------------------------------------
def _require(path, stage):
    if not Path(path).exists():
        raise MissingInputError(f"{path} not found; run `hoidistill {stage}` first")


def _load_teacher(rc):
    _require(rc.teacher_dir / "model" / "manifest.json", "teacher-pretrain")
    return load_teacher(rc.teacher_dir / "model")


def _load_supervision(rc):
    path = rc.stage("supervision") / "train"
    _require(path / "manifest.json", "supervise")
    return SupervisionCache.load(path)


def timed_predict(rc: RunConfig, teacher, split, net=None, feats=None, cache=None):
    """Detections for ``split`` and the throughput in images per second."""
    t0 = time.perf_counter()
    if rc.train.trainable:
        dets = predict_student(net, split, teacher, rc.train, feats=feats)
    else:
        dets = predict_training_free(split, teacher, rc.train, cache)
    dt = time.perf_counter() - t0
    return dets, len(split.image_ids) / dt if dt > 0 else float("inf")


# -- commands ---------------------------------------------------------------------
def cmd_synth_gen(rc, args):
    labels = generate_dataset(rc.data_dir, seed=rc.seed, n_train=rc.n_train, n_test=rc.n_test)
    counts = labels.train_counts()
    print(f"wrote {rc.n_train}+{rc.n_test} images, {labels.n} classes "
          f"({int((counts < 10).sum())} rare) to {rc.data_dir}")
    return rc.data_dir, {}


def cmd_teacher_pretrain(rc, args):
    _require(rc.data_dir / "labels.json", "synth-gen")
    est, report = pretrain_teacher(rc.data_dir, epochs=rc.teacher_epochs, seed=rc.seed, dim=rc.train.dim,
                                   heads=rc.train.heads, lr=rc.teacher_lr, temperature=rc.train.temperature,
                                   normalize=rc.train.normalize)
    report["valid"] = report["top1"] >= TEACHER_GATE
    save_teacher(rc.teacher_dir / "model", est.teacher_)
    write_json(rc.teacher_dir / "report.json", report)
    status = "ok" if report["valid"] else f"below the {TEACHER_GATE:.0%} gate, downstream runs are invalid"
    print(f"teacher crop top-1 {report['top1']:.3f} ({status})")
    return rc.teacher_dir, {"teacher_top1": report["top1"]}


def cmd_supervise(rc, args):
    teacher = _load_teacher(rc)
    split = load_split(rc.data_dir, "train")
    cache = precompute_supervision(split, teacher, rc.train.max_pairs)
    out = rc.stage("supervision")
    cache.save(out / "train")
    print(f"cached {cache.n_vectors} teacher distributions in {out}")
    return out, {"n_vectors": cache.n_vectors}


def cmd_train(rc, args):
    out = rc.stage("train")
    if not rc.train.trainable:
        out.mkdir(parents=True, exist_ok=True)
        print(f"variant {rc.train.variant!r} is training-free; nothing to train")
        return out, {"trained": False}
    teacher = _load_teacher(rc)
    cache = _load_supervision(rc)
    split = load_split(rc.data_dir, "train")  # images + proposals only
    result = train(split, cache, teacher, rc.train)
    save_checkpoint(out / "checkpoint", result.net, rc.train)
    write_curve(out / "loss_curve.csv", result.curve)
    first = np.mean([r["total"] for r in result.curve[:50]])
    last = np.mean([r["total"] for r in result.curve[-50:]])
    print(f"trained {rc.train.variant} for {rc.train.total_iters} iters; loss {first:.4f} -> {last:.4f}")
    return out, {"trained": True, "loss_first50": float(first), "loss_last50": float(last)}


def cmd_infer(rc, args):
    teacher = _load_teacher(rc)
    split = load_split(rc.data_dir, rc.eval_split)
    net = None
    if rc.train.trainable:
        _require(rc.stage("train") / "checkpoint" / "manifest.json", "train")
        net, saved = load_checkpoint(rc.stage("train") / "checkpoint", teacher)
        if saved.variant != rc.train.variant:
            raise ConfigError(f"checkpoint is a {saved.variant!r} model, config asks for {rc.train.variant!r}")
    dets, fps = timed_predict(rc, teacher, split, net)
    out = rc.stage("infer")
    write_json(out / "detections.json", detections_to_json(dets))
    print(f"{len(dets)} detections on {len(split.image_ids)} {rc.eval_split} images ({fps:.1f} img/s)")
    return out, {"fps": fps, "n_detections": len(dets)}


def cmd_eval(rc, args):
    path = Path(args.detections) if getattr(args, "detections", None) else rc.stage("infer") / "detections.json"
    _require(path, "infer")
    labels = load_labels(rc.data_dir)
    split = load_split(rc.data_dir, rc.eval_split, with_gt=True)
    report = evaluate(detections_from_json(read_json(path)), split.gt, labels)
    out = rc.stage("eval")
    write_json(out / "report.json", report.to_json())
    (out / "report.md").write_text(report.to_markdown(rc.train.variant))
    print(report.to_markdown(rc.train.variant), end="")
    return out, {"mAP_full": report.map_full}


# -- ablation ----------------------------------------------------------------------
DEFAULT_GRID = {
    "seeds": None,  # None -> the config seed
    "variants": [BASELINE, EARLY, FULL, TF, TFSTAR],
    "routings": [["g", "g"], ["u", "u"], ["u", "g"], ["u", "g+u"], ["g+u", "g"]],
    "nprime": ["N/6", "N/2"],
}
BRANCHES = {  # (h-o, union, global) columns of the branch table
    BASELINE: ("x", "-", "-"),
    EARLY: ("x", "x (early)", "x"),
    FULL: ("x", "x (late)", "x"),
}
CSV_FIELDS = ["table", "exp", "variant", "routing_union", "routing_ho", "nprime", "seed",
              "map_full", "map_rare", "map_nonrare", "fps", "train_s", "status"]


def parse_grid(doc, n_classes):
    doc = {**DEFAULT_GRID, **(doc or {})}
    unknown = set(doc) - set(DEFAULT_GRID)
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    for v in doc["variants"]:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r} in grid")
    for r in doc["routings"]:
        if len(r) != 2 or any(x not in ROUTES for x in r):
            raise ConfigError(f"bad routing {r!r}; expected [union, ho] from {ROUTES}")
    nps = []
    for k in doc["nprime"]:
        if isinstance(k, str):
            if not k.startswith("N/") or not k[2:].isdigit() or int(k[2:]) < 1:
                raise ConfigError(f"bad nprime {k!r}; use an integer or 'N/<d>'")
            k = max(1, n_classes // int(k[2:]))
        if not isinstance(k, int) or k < 1:
            raise ConfigError(f"bad nprime {k!r}")
        if k < n_classes:
            nps.append(k)
    doc["nprime"] = sorted(set(nps))
    return doc


def ablation_cells(grid):
    """(table, exp, variant, routing_union, routing_ho, nprime), deduplicated."""
    cells = []
    for v in grid["variants"]:
        cells.append(("tab2" if v in BRANCHES else "tab1", v, v, "u", "g", None))
    for ru, rh in grid["routings"]:
        cells.append(("tab3", f"{ru}/{rh}", FULL, ru, rh, None))
    for k in grid["nprime"]:
        cells.append(("tab4", f"N'={k}", FULL, "u", "g", k))
    return cells


def _cell_key(c):
    return c[2], c[3], c[4], c[5]


def run_seed(rc: RunConfig, seed, grid, seed_dir):
    """Dataset, teacher, supervision and every grid cell for one seed."""
    base = TrainConfig.from_dict({**rc.train.to_dict(), "seed": seed})
    data_dir = seed_dir / "data"
    labels = generate_dataset(data_dir, seed=seed, n_train=rc.n_train, n_test=rc.n_test)
    est, teacher_report = pretrain_teacher(data_dir, epochs=rc.teacher_epochs, seed=seed, dim=base.dim,
                                           heads=base.heads, lr=rc.teacher_lr, temperature=base.temperature,
                                           normalize=base.normalize)
    teacher = est.teacher_
    teacher_report["valid"] = teacher_report["top1"] >= TEACHER_GATE
    save_teacher(seed_dir / "teacher" / "model", teacher)
    write_json(seed_dir / "teacher" / "report.json", teacher_report)
    train_split = load_split(data_dir, "train")
    test_split = load_split(data_dir, rc.eval_split, with_gt=True)
    cache = precompute_supervision(train_split, teacher, base.max_pairs)
    feats = prepare_features(train_split, teacher, base.max_pairs, cache, base.student_min_edge)

    rows, done = [], {}
    for cell in ablation_cells(grid):
        table, exp, variant, ru, rh, nprime = cell
        row = {"table": table, "exp": exp, "variant": variant, "routing_union": ru, "routing_ho": rh,
               "nprime": nprime if nprime else labels.n, "seed": seed}
        key = _cell_key(cell)
        if key in done:
            rows.append({**done[key], **row})
            continue
        try:
            cfg = TrainConfig.from_dict({**base.to_dict(), "variant": variant, "routing_union": ru,
                                         "routing_ho": rh, "nprime": nprime})
            cell_rc = RunConfig(**{**rc.__dict__, "train": cfg})
            t0 = time.perf_counter()
            net = None
            if cfg.trainable:
                result = train(train_split, cache, teacher, cfg, feats=feats)
                net = result.net
                cell_dir = seed_dir / "cells" / f"{variant}_{ru}_{rh}_n{row['nprime']}".replace("+", "p")
                save_checkpoint(cell_dir / "checkpoint", net, cfg)
                write_curve(cell_dir / "loss_curve.csv", result.curve)
            train_s = time.perf_counter() - t0
            # TF cells score test crops with the teacher inside the timed region
            dets, fps = timed_predict(cell_rc, teacher, test_split, net)
            rep = evaluate(dets, test_split.gt, labels)
            res = {"map_full": rep.map_full, "map_rare": rep.map_rare, "map_nonrare": rep.map_nonrare,
                   "fps": fps, "train_s": train_s, "status": "ok"}
        except (ConfigError, NonFiniteError, TrainingDivergedError, FloatingPointError, ValueError) as exc:
            log.exception("cell %s failed", exp)
            res = {"map_full": None, "map_rare": None, "map_nonrare": None, "fps": None, "train_s": None,
                   "status": f"failed: {type(exc).__name__}: {exc}"}
        done[key] = res
        rows.append({**row, **res})
    return rows, teacher_report


def _finite(vals):
    return [float(v) for v in vals if v is not None and np.isfinite(v)]


def _fmt(vals, scale=100.0, digits=2):
    if all(v is None for v in vals):
        return "FAILED"
    vals = _finite(vals)
    if not vals:
        return "n/a"
    m = scale * float(np.mean(vals))
    if len(vals) == 1:
        return f"{m:.{digits}f}"
    return f"{m:.{digits}f} ({scale * min(vals):.{digits}f}..{scale * max(vals):.{digits}f})"


def ablation_markdown(rows, seeds, teacher_reports):
    def group(table):
        out = {}
        for r in rows:
            if r["table"] == table or (table == "tab1" and r["table"] == "tab2" and r["variant"] in (BASELINE, FULL)):
                out.setdefault(r["exp"], []).append(r)
        return out

    def metrics(rs):
        return " | ".join(_fmt([r[k] for r in rs]) for k in ("map_full", "map_rare", "map_nonrare"))

    def fps(rs):
        return _fmt([r["fps"] for r in rs], scale=1.0, digits=1)

    lines = [f"# Ablations (seeds: {', '.join(map(str, seeds))})", "",
             "mAP in %, mean over seeds with (min..max) when there are several. "
             "Speed is wall-clock images/s on this machine (report-only).", ""]
    names = {BASELINE: "base", TF: "TF", TFSTAR: "TF*", FULL: "ours"}
    t1 = group("tab1")
    if t1:
        lines += ["## Speed and training-free comparison", "",
                  "| Exp | Speed (img/s) | Full | Rare | Non-Rare |", "|---|---|---|---|---|"]
        for v in (BASELINE, TF, TFSTAR, FULL):
            if v in t1:
                lines.append(f"| {names[v]} | {fps(t1[v])} | {metrics(t1[v])} |")
        lines.append("")
    t2 = group("tab2")
    if t2:
        lines += ["## Branches", "", "| Exp | h-o | union | global | Full | Rare | Non-Rare | Speed (img/s) |",
                  "|---|---|---|---|---|---|---|---|"]
        for v in (BASELINE, EARLY, FULL):
            if v in t2:
                lines.append(f"| {v} | {' | '.join(BRANCHES[v])} | {metrics(t2[v])} | {fps(t2[v])} |")
        lines.append("")
    t3 = group("tab3")
    if t3:
        lines += ["## Supervision routing (global branch always on, fed by d_g)", "",
                  "| Exp | union | h-o | Full | Rare | Non-Rare |", "|---|---|---|---|---|---|"]
        for i, (exp, rs) in enumerate(t3.items()):
            lines.append(f"| {i} | {rs[0]['routing_union']} | {rs[0]['routing_ho']} | {metrics(rs)} |")
        lines.append("")
    t4 = group("tab4")
    if t4 or FULL in t2:
        lines += ["## Training on N' of N classes, evaluated on all N", "", "| N' | Full | Rare | Non-Rare |",
                  "|---|---|---|---|"]
        for exp, rs in t4.items():
            lines.append(f"| {rs[0]['nprime']} | {metrics(rs)} |")
        if FULL in t2:
            lines.append(f"| {t2[FULL][0]['nprime']} | {metrics(t2[FULL])} |")
        lines.append("")
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        lines += ["## Failed cells", ""] + [f"- seed {r['seed']} {r['exp']}: {r['status']}" for r in failed] + [""]
    lines += ["## Teacher", "", "| seed | crop top-1 | valid |", "|---|---|---|"]
    for s, rep in zip(seeds, teacher_reports):
        lines.append(f"| {s} | {rep['top1']:.3f} | {'yes' if rep['valid'] else 'no (run invalid)'} |")
    return "\n".join(lines) + "\n"


def write_rows_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})


def cmd_ablate(rc, args):
    grid_doc = json.loads(Path(args.grid).read_text()) if args.grid else None
    grid = parse_grid(grid_doc, default_label_space().n)
    seeds = grid["seeds"] or [rc.seed]
    out = rc.stage("ablate")
    rows, reports = [], []
    for seed in seeds:
        seed_rows, rep = run_seed(rc, seed, grid, out / f"seed{seed}")
        rows += seed_rows
        reports.append(rep)
    write_rows_csv(out / "ablation.csv", rows)
    md = ablation_markdown(rows, seeds, reports)
    (out / "ablation.md").write_text(md)
    print(md, end="")
    return out, {"n_cells": len(rows), "n_failed": sum(r["status"] != "ok" for r in rows)}


# -- report ------------------------------------------------------------------------
REPORT_KEYS = ("variant", "routing_union", "routing_ho", "nprime", "seed", "gamma", "lr", "total_iters")


def collect_runs(dirs):
    runs, skipped = [], []
    for d in dirs:
        d = Path(d)
        rep, rec = d / "eval" / "report.json", d / "eval" / "run.json"
        if not (rep.exists() and rec.exists()):
            skipped.append(str(d))
            continue
        runs.append({"dir": str(d), "report": read_json(rep), "config": read_json(rec)["config"]})
    return runs, skipped


def summarize_runs(runs, skipped):
    """Merged markdown table; seeds of otherwise identical configs are aggregated."""
    deltas = [k for k in REPORT_KEYS if len({json.dumps(r["config"].get(k)) for r in runs}) > 1]
    groups = {}
    for r in runs:
        key = tuple(json.dumps(r["config"].get(k)) for k in deltas if k != "seed")
        groups.setdefault(key, []).append(r)
    cols = [k for k in deltas if k != "seed"]
    lines = ["| runs | " + " | ".join(cols + ["seeds", "Full", "Rare", "Non-Rare"]) + " |",
             "|" + "---|" * (len(cols) + 5)]
    table_rows = []
    for key, rs in groups.items():
        vals = {m: [r["report"][m] for r in rs] for m in ("mAP_full", "mAP_rare", "mAP_nonrare")}
        cells = [str(len(rs))] + [json.loads(k) if k != "null" else "-" for k in key]
        cells.append(",".join(str(r["config"].get("seed")) for r in rs))
        cells += [_pm(vals[m]) for m in ("mAP_full", "mAP_rare", "mAP_nonrare")]
        lines.append("| " + " | ".join(str(c) for c in cells) + " |")
        table_rows.append({"group": dict(zip(cols, [json.loads(k) for k in key])), "n": len(rs),
                           **{f"{m}_mean": float(np.mean(v)) for m, v in vals.items()},
                           **{f"{m}_min": float(np.min(v)) for m, v in vals.items()},
                           **{f"{m}_max": float(np.max(v)) for m, v in vals.items()}})
    if skipped:
        lines += ["", "skipped:"] + [f"- {s}" for s in skipped]
    return "\n".join(lines) + "\n", table_rows


def _pm(vals):
    """mean ± half-range, in %"""
    vals = _finite(vals)
    if not vals:
        return "n/a"
    m, lo, hi = 100 * np.mean(vals), 100 * np.min(vals), 100 * np.max(vals)
    return f"{m:.2f}" if len(vals) == 1 else f"{m:.2f} ± {(hi - lo) / 2:.2f}"


def cmd_report(rc, args):
    runs, skipped = collect_runs(args.runs)
    md, table_rows = summarize_runs(runs, skipped)
    out = rc.stage("report")
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.md").write_text(md)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dir", *REPORT_KEYS, "mAP_full", "mAP_rare", "mAP_nonrare"])
        for r in runs:
            w.writerow([r["dir"], *[r["config"].get(k) for k in REPORT_KEYS],
                        r["report"]["mAP_full"], r["report"]["mAP_rare"], r["report"]["mAP_nonrare"]])
    with open(out / "loss_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "iter", "L_g", "L_u", "L_ho", "total", "lr"])
        for r in runs:
            curve = Path(r["dir"]) / "train" / "loss_curve.csv"
            if curve.exists():
                with open(curve) as src:
                    for row in csv.DictReader(src):
                        w.writerow([r["dir"], row["iter"], row["L_g"], row["L_u"], row["L_ho"], row["total"], row["lr"]])
    write_json(out / "summary.json", {"groups": table_rows, "skipped": skipped})
    print(md, end="")
    return out, {"n_runs": len(runs), "skipped": skipped}


# -- entry point ---------------------------------------------------------------------
COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "teacher-pretrain": cmd_teacher_pretrain,
    "supervise": cmd_supervise,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (TrainConfig keys plus run keys)")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--serial", action="store_true", help="single-threaded, bit-exact execution")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--routing", action="append", default=[], metavar="BRANCH=ROUTE",
                        help="supervision route per branch, e.g. union=u or ho=g+u")
    common.add_argument("--nprime", type=int, help="train on a random subset of this many classes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hoidistill", description="Zero-shot HOI detection by multi-level distillation.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "eval":
            sp.add_argument("--detections", help="detections JSON (default <out>/infer/detections.json)")
        if name == "ablate":
            sp.add_argument("--grid", help="grid JSON: seeds, variants, routings, nprime")
        if name == "report":
            sp.add_argument("runs", nargs="+", help="run directories")
    return p


def resolve_config(args):
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInputError(f"config file {path} not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if args.out:
        doc["out_dir"] = args.out
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.variant:
        doc["variant"] = args.variant
    if args.nprime is not None:
        doc["nprime"] = args.nprime
    for spec in args.routing:
        branch, _, route = spec.partition("=")
        if branch not in ("global", "union", "ho") or not route:
            raise ConfigError(f"bad --routing {spec!r}; expected global|union|ho=ROUTE")
        doc[f"routing_{branch}"] = route
    return RunConfig.from_dict(doc)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        rc = resolve_config(args)
        with serial_mode(args.serial):
            stage_dir, extra = COMMANDS[args.command](rc, args)
        write_run_record(stage_dir, args.command, rc, time.perf_counter() - t0, args.serial, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except PairMismatchError as exc:
        print(f"stale input: {exc}; rerun `hoidistill supervise`", file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
