"""Command-line front end: ``celltissue <command> [options]``.

Every command writes a JSON envelope (``<out-dir>/<command>.json`` unless
``--json`` names another path, ``-`` for stdout) and prints a short human
summary.  Settings resolve as flags > environment > ``--config`` file >
built-in defaults, and the resolved values are echoed into the envelope
together with where each one came from.

Exit codes: 0 success, 1 invalid input or failed check, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__

ENV_ROOT = "CELLTISSUE_DATA_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("celltissue")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    """A command ran but its result fails a check; the envelope is still written."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


# -- helpers -----------------------------------------------------------------

def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _names(text):
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    # feature-sharing configs contain commas themselves, so variants split on ';' when one is present
    sep = ";" if ";" in str(text) else None
    if sep:
        return [v.strip() for v in str(text).split(sep) if v.strip()]
    out, parts = [], str(text).split(",")
    i = 0
    while i < len(parts):
        part = parts[i].strip()
        if part.startswith("feature-sharing:") or part.lower().startswith("featuresharing:"):
            part = ",".join(p.strip() for p in parts[i:i + 3])
            i += 3
        else:
            i += 1
        if part:
            out.append(part)
    return out


def _paths(value):
    return [str(value)] if isinstance(value, (str, Path)) else [str(v) for v in value]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _pmap(fn, items, jobs):
    """Order-stable map, in worker processes when ``jobs > 1``."""
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _expand(paths, suffixes):
    """Files given directly, plus the matching files of any directory, in sorted order."""
    out = []
    for p in paths or []:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in suffixes))
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")
    return out


def _require(cfg, key, flag=None):
    if cfg.get(key) in (None, "", []):
        raise UsageError(f"--{(flag or key).replace('_', '-')} is required")
    return cfg[key]


def _geometry(cfg):
    from .geometry import PatchGeometry
    return PatchGeometry(c_x=cfg["c_x"], c_y=cfg["c_y"], mpp_cell=cfg["mpp"], cell_side_px=cfg["cell_side"],
                         fov_ratio=cfg["fov_ratio"], tissue_store_downsample=cfg["downsample"])


def _read_mask(path):
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image
    return np.asarray(Image.open(path))


def _load_records(cfg, check_files=True):
    from .dataio import load_dataset
    root = _require(cfg, "root")
    records = load_dataset(root, check_files=check_files)
    subset = cfg.get("subset", "all")
    if subset and subset != "all":
        records = [r for r in records if r.subset == subset]
    return records


# -- commands ----------------------------------------------------------------
# each returns (result dict, summary text); raise CheckFailed for a failed check

def _mask_problems(rec):
    from .dataio import validate_mask_codes
    return validate_mask_codes(rec)


def cmd_validate(cfg):
    from .dataio import DatasetValidationError, load_dataset
    root = _require(cfg, "root")
    try:
        records = load_dataset(root, check_files=cfg["check_files"], cell_classes=tuple(cfg["classes"]))
        problems = []
    except DatasetValidationError as exc:
        records, problems = [], list(exc.problems)
    if records and cfg["check_files"]:
        for found in _pmap(_mask_problems, records, cfg["jobs"]):
            problems.extend(found)
    counts = Counter(r.subset for r in records)
    result = {"root": str(root), "n_records": len(records), "pairs_per_subset": dict(sorted(counts.items())),
              "n_points": sum(len(r.cell_points) for r in records), "problems": problems}
    if problems:
        raise CheckFailed(f"{len(problems)} problem(s) in {root}:\n  " + "\n  ".join(problems[:20]), result)
    return result, f"{root}: {len(records)} pairs valid"


def cmd_split(cfg):
    from .dataio import MANIFEST_NAME, split_wsis
    wsi_organs = {}
    manifest = None
    if cfg.get("wsis"):
        with open(cfg["wsis"], newline="") as fh:
            for row in csv.DictReader(fh):
                wsi_organs[row["wsi_id"]] = row["organ"]
    else:
        root = Path(_require(cfg, "root", "root or --wsis"))
        manifest = root / MANIFEST_NAME
        doc = json.loads(manifest.read_text())
        for rec in doc.get("records", []):
            prev = wsi_organs.setdefault(rec["wsi_id"], rec["organ"])
            if prev != rec["organ"]:
                raise ValueError(f"wsi {rec['wsi_id']} listed under organs {prev!r} and {rec['organ']!r}")
    if not wsi_organs:
        raise ValueError("no WSIs to split")
    assignment = split_wsis(wsi_organs, cfg["ratios"], seed=cfg["seed"])
    out = Path(cfg["assignments"] or Path(cfg["out_dir"]) / "split.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wsi_id", "organ", "subset"])
        for wsi in sorted(assignment):
            w.writerow([wsi, wsi_organs[wsi], assignment[wsi]])
    per_organ: dict = {}
    for wsi, subset in assignment.items():
        per_organ.setdefault(wsi_organs[wsi], Counter())[subset] += 1
    if cfg["write_manifest"] and manifest is not None:
        doc = json.loads(manifest.read_text())
        for rec in doc["records"]:
            rec["subset"] = assignment[rec["wsi_id"]]
        manifest.write_text(json.dumps(doc, indent=2))
    result = {"seed": cfg["seed"], "ratios": cfg["ratios"], "assignment_file": str(out),
              "assignment": dict(sorted(assignment.items())),
              "per_organ": {o: dict(sorted(c.items())) for o, c in sorted(per_organ.items())}}
    totals = Counter(assignment.values())
    return result, f"split {len(assignment)} WSIs (seed {cfg['seed']}): " + \
        ", ".join(f"{k} {totals[k]}" for k in ("train", "val", "test")) + f"; written to {out}"


def _stats_chunk(records):
    from .stats import class_counts, cooccurrence
    return cooccurrence(records), class_counts(records)


def cmd_stats(cfg):
    from .stats import CooccurrenceTable, dataset_summary, ratios_from_counts
    records = _load_records(cfg)
    jobs = cfg["jobs"]
    chunks = [records[i::jobs] for i in range(jobs)] if jobs > 1 else [records]
    table, cells, pixels = CooccurrenceTable(), Counter(), Counter()
    for t, (c, p) in _pmap(_stats_chunk, chunks, jobs):
        table = table + t
        cells.update(c)
        pixels.update(p)
    ratios = ratios_from_counts(cells, pixels)
    out = Path(cfg["csv"] or Path(cfg["out_dir"]) / "cooccurrence.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table.to_csv())
    outside = table.fraction_outside(1)
    result = {"n_records": len(records), "class_ratios": ratios, "cooccurrence": table.to_dict(),
              "tc_outside_ca": outside, "summary": dataset_summary(records), "csv": str(out)}
    lines = [f"{len(records)} pairs, {ratios['n_cells']} cells"]
    lines.append("cells:  " + "  ".join(f"{k} {100 * v:.2f}%" for k, v in ratios["cell"].items()))
    lines.append("tissue: " + "  ".join(f"{k} {100 * v:.2f}%" for k, v in ratios["tissue"].items()))
    if outside is not None:
        lines.append(f"TC outside CA: {100 * outside:.2f}%")
    return result, "\n".join(lines)


def _rasterize_one(task):
    from .labels import radius_in_pixels, rasterize_points, read_points_csv
    path, out_dir, side, radius_um, mpp, n_classes = task
    pts = read_points_csv(path)
    maps = rasterize_points(pts, side, radius_um, mpp, n_classes)
    out = Path(out_dir) / f"{Path(path).stem}_labels.npy"
    np.save(out, maps.astype(np.uint8))
    return {"points": str(path), "output": str(out), "n_points": len(pts),
            "radius_px": radius_in_pixels(radius_um, mpp),
            "pixels_per_channel": [int(v) for v in maps.reshape(maps.shape[0], -1).sum(axis=1)]}


def cmd_rasterize(cfg):
    paths = _expand(_require(cfg, "points"), {".csv"})
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(str(p), str(out_dir), cfg["side"], cfg["radius_um"], cfg["mpp"], cfg["n_classes"]) for p in paths]
    files = _pmap(_rasterize_one, tasks, cfg["jobs"])
    r = files[0]["radius_px"] if files else None
    return {"files": files}, f"rasterized {len(files)} file(s) at radius {r} px into {out_dir}"


def _detect_one(task):
    from .postprocess import detect, write_detections_csv
    path, out_dir, min_distance, threshold = task
    prob = np.load(path)
    dets = detect(prob, min_distance, threshold)
    out = Path(out_dir) / f"{Path(path).stem}.csv"
    write_detections_csv(out, dets)
    return {"probability_map": str(path), "output": str(out), "n_detections": len(dets),
            "per_class": dict(sorted(Counter(str(d.class_id) for d in dets).items()))}


def cmd_detect(cfg):
    paths = _expand(_require(cfg, "prob"), {".npy"})
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(str(p), str(out_dir), cfg["min_distance"], cfg["threshold"]) for p in paths]
    files = _pmap(_detect_one, tasks, cfg["jobs"])
    n = sum(f["n_detections"] for f in files)
    return {"files": files}, f"{n} detections from {len(files)} map(s) written to {out_dir}"


def _constrain_one(task):
    from .geometry import PatchGeometry
    from .postprocess import apply_tissue_constraint, read_detections_csv, write_detections_csv
    det_path, mask_path, geom_dict, out_path, bidirectional = task
    dets = read_detections_csv(det_path)
    mask = _read_mask(mask_path)
    new, flagged = apply_tissue_constraint(dets, mask, PatchGeometry.from_dict(geom_dict), bidirectional)
    write_detections_csv(out_path, new)
    changed = sum(a.class_id != b.class_id for a, b in zip(dets, new))
    return {"detections": str(det_path), "mask": str(mask_path), "output": str(out_path),
            "n_in": len(dets), "n_out": len(new), "n_relabelled": changed, "outside_tissue": flagged}


def cmd_constrain(cfg):
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    if cfg.get("det_dir"):
        if len(cfg["det_dir"]) != 1:
            raise UsageError("constrain takes a single --det-dir")
        for rec in _load_records(cfg, check_files=False):
            det = Path(cfg["det_dir"][0]) / f"{rec.pair_id}.csv"
            if det.exists():
                tasks.append((str(det), str(rec.tissue_mask_path), rec.geometry.to_dict(),
                              str(out_dir / det.name), cfg["bidirectional"]))
    else:
        dets = _require(cfg, "detections")
        masks = _require(cfg, "mask")
        if len(dets) != len(masks):
            raise UsageError("give one --mask per --detections file")
        geom = _geometry(cfg).to_dict()
        for d, m in zip(dets, masks):
            tasks.append((str(d), str(m), geom, str(out_dir / Path(d).name), cfg["bidirectional"]))
    files = _pmap(_constrain_one, tasks, cfg["jobs"])
    changed = sum(f["n_relabelled"] for f in files)
    return {"files": files, "n_relabelled": changed}, \
        f"relabelled {changed} detection(s) in {len(files)} file(s); outputs in {out_dir}"


def _match_one(task):
    from .labels import read_points_csv
    from .metrics import match_detections
    from .postprocess import read_detections_csv
    det_path, gt, radius, classes = task
    dets = read_detections_csv(det_path) if det_path else []
    gts = read_points_csv(gt) if isinstance(gt, str) else gt
    return match_detections(dets, gts, radius, classes).to_dict()


def _pair_by_stem(dets, gts):
    d = {p.stem: p for p in dets}
    g = {p.stem: p for p in gts}
    if set(d) != set(g):
        raise ValueError(f"detection and ground-truth files differ: only detections {sorted(set(d) - set(g))}, "
                         f"only ground truth {sorted(set(g) - set(d))}")
    return [(str(d[k]), str(g[k])) for k in sorted(d)]


def cmd_eval(cfg):
    from .metrics import (aggregate_runs, counts_from_mapping, f1_from_counts, format_mean_ci,
                          per_organ_report, sum_counts)
    classes = tuple(cfg["classes"])
    radius = cfg["radius"]
    if cfg.get("det_dir"):
        records = _load_records(cfg, check_files=False)
        runs = []
        for det_dir in cfg["det_dir"]:
            tasks = []
            for rec in records:
                det = Path(det_dir) / f"{rec.pair_id}.csv"
                tasks.append((str(det) if det.exists() else None, rec.cell_points, radius, classes))
            counts = [counts_from_mapping(c) for c in _pmap(_match_one, tasks, cfg["jobs"])]
            report = f1_from_counts(sum_counts(counts))
            organs = per_organ_report((r.organ, c) for r, c in zip(records, counts))
            report.per_organ = {o: rep.to_dict() for o, rep in organs.items()}
            runs.append(report)
        report = runs[0]
        if len(runs) > 1:
            scores = [r.mean_f1 for r in runs]
            mean, hw = aggregate_runs(scores)
            report.runs = {"scores": scores, "mean": mean, "ci_half_width": hw,
                           "display": format_mean_ci(mean, hw)}
    else:
        dets = _expand(_require(cfg, "det"), {".csv"})
        gts = _expand(_require(cfg, "gt"), {".csv"})
        if len(dets) == len(gts) and all(Path(p).is_file() for p in (cfg["det"] + cfg["gt"])):
            pairs = [(str(a), str(b)) for a, b in zip(dets, gts)]
        else:
            pairs = _pair_by_stem(dets, gts)
        counts = [counts_from_mapping(c) for c in
                  _pmap(_match_one, [(a, b, radius, classes) for a, b in pairs], cfg["jobs"])]
        if not counts:
            raise ValueError("no detection/ground-truth file pairs")
        report = f1_from_counts(sum_counts(counts))
    result = report.to_dict()
    result["radius_px"] = radius
    summary = f"mean F1 {report.mean_f1:.4f}  (" + ", ".join(
        f"class {k}: {'n/a' if v is None else f'{v:.4f}'}" for k, v in report.per_class.items()) + ")"
    if report.runs:
        summary += f"\nover {len(report.runs['scores'])} runs: {report.runs['display']}"
    return result, summary


def cmd_consensus(cfg):
    from .labels import merge_annotations, read_points_csv, write_points_csv
    a = read_points_csv(_require(cfg, "a"))
    b = read_points_csv(_require(cfg, "b"))
    report = merge_annotations(a, b, cfg["radius"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    merged = out_dir / "consensus_points.csv"
    write_points_csv(merged, report.agreed)
    result = report.to_dict()
    result["agreed_points_file"] = str(merged)
    return result, (f"{len(report.agreed)} agreed, {len(report.class_conflicts)} class conflicts, "
                    f"{len(report.only_a)} only in A, {len(report.only_b)} only in B")


def cmd_pair_tiger(cfg):
    import warnings

    from .dataio import RoiSpec, pair_overlapping, pair_roi_in_region
    doc = json.loads(Path(_require(cfg, "spec")).read_text())
    specs = doc if isinstance(doc, list) else doc.get("regions", [doc])
    out, caught = [], []
    for i, raw in enumerate(specs):
        spec = RoiSpec.from_dict(raw)
        mode = cfg["mode"]
        if mode == "auto":
            mode = "overlapping" if spec.source_kind == "fully_overlapping" else "roi-in-region"
        fn = pair_overlapping if mode == "overlapping" else pair_roi_in_region
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            pairs = fn(spec, cell_side=cfg["cell_side"], tissue_side=cfg["tissue_side"])
        caught.extend(f"region {i}: {x.message}" for x in w)
        out.append({"region": i, "mode": mode, "n_pairs": len(pairs), "pairs": [p.to_dict() for p in pairs]})
    total = sum(r["n_pairs"] for r in out)
    return {"regions": out, "n_pairs": total, "warnings": caught}, \
        f"{total} pairs from {len(out)} region(s)" + (f"; {len(caught)} warning(s)" if caught else "")


def _synth_samples(cfg):
    from .tinynet.experiment import split_samples
    from .tinynet.synth import SynthParams, synth_generate
    n_train, n_val, n_test = cfg["n_train"], cfg["n_val"], cfg["n_test"]
    seed = cfg["data_seed"] if "data_seed" in cfg else cfg["seed"]
    samples = synth_generate(n_train + n_val + n_test, SynthParams(ambiguity=cfg["ambiguity"]), seed=seed)
    return split_samples(samples, n_train, n_val)


def _data_splits(cfg):
    """Train/val/test samples from ``--root`` if given, else freshly generated synthetic data."""
    if cfg.get("root"):
        from .tinynet.experiment import samples_from_records
        samples = samples_from_records(_load_records({**cfg, "subset": "all"}))
        by = {s: [x for x in samples if x.subset == s] for s in ("train", "val", "test")}
        if not by["train"]:
            raise ValueError(f"dataset {cfg['root']} has no training pairs")
        return by["train"], by["val"], by["test"]
    return _synth_samples(cfg)


def cmd_synth(cfg):
    from .dataio import save_manifest, write_pair
    from .labels import TC
    from .postprocess import TISSUE_CA
    from .geometry import cell_to_tissue_point
    root = Path(cfg["root"] or Path(cfg["out_dir"]) / "synth")
    train, val, test = _synth_samples(cfg)
    records = []
    n_amb = n_tc = n_tc_ca = 0
    for s in train + val + test:
        records.append(write_pair(root, s.pair_id, s.wsi_id, s.organ, s.subset, s.geometry, s.cell_image,
                                  s.tissue_image, s.tissue_mask, s.cell_points,
                                  meta={"ambiguous": [bool(a) for a in s.ambiguous]}))
        n_amb += sum(s.ambiguous)
        for p in s.cell_points:
            if p.class_id == TC:
                n_tc += 1
                tx, ty, _ = cell_to_tissue_point(p.x, p.y, s.geometry, s.tissue_mask.shape[0], snap=True)
                n_tc_ca += int(s.tissue_mask[ty, tx] == TISSUE_CA)
    manifest = save_manifest(records, root)
    n_cells = sum(len(r.cell_points) for r in records)
    result = {"root": str(root), "manifest": str(manifest),
              "n_pairs": {"train": len(train), "val": len(val), "test": len(test)},
              "n_cells": n_cells, "ambiguous_fraction": n_amb / n_cells if n_cells else 0.0,
              "tc_in_ca_fraction": n_tc_ca / n_tc if n_tc else None}
    return result, f"wrote {len(records)} synthetic pairs ({n_cells} cells) to {root}"


def _train_config(cfg):
    from .tinynet.experiment import TrainConfig
    return TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})


def cmd_train(cfg):
    from .tinynet.experiment import evaluate, train_model
    train, val, test = _data_splits(cfg)
    tc = _train_config(cfg)
    net, hist = train_model(cfg["variant"], train, val, tc, seed=cfg["seed"])
    prefix = Path(cfg["weights"] or Path(cfg["out_dir"]) / "model")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    bin_path, json_path = net.save(prefix)
    result = {"variant": net.variant.name, "seed": cfg["seed"], "weights": str(bin_path),
              "weights_manifest": str(json_path), "n_params": net.n_params(), "history": hist}
    summary = f"trained {net.variant.name} for {tc.epochs} epochs in {hist['seconds']:.1f}s"
    if test:
        result["test"] = evaluate(net, test, tc)
        summary += f"; test mean F1 {result['test']['mean_f1']:.4f}"
    return result, summary + f"; weights in {bin_path}"


def _table_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mean_f1", "ci_half_width", "display", "ambiguous_mean_f1",
                    "appearance_only_bound", "p_value_vs_baseline", "scores"])
        for name, row in result["variants"].items():
            w.writerow([name, f"{row['mean']:.6f}",
                        "" if row.get("ci_half_width") is None else f"{row['ci_half_width']:.6f}",
                        row["display"], f"{row['ambiguous_mean_f1']:.6f}", f"{row['appearance_only_bound']:.6f}",
                        "" if row.get("p_value_vs_baseline") is None else f"{row['p_value_vs_baseline']:.6g}",
                        " ".join(f"{s:.6f}" for s in row["scores"])])


def cmd_experiment(cfg):
    from .tinynet.experiment import format_table, run_experiment
    from .tinynet.model import ModelVariant
    variants = [ModelVariant.parse(v) for v in cfg["variants"]]
    train, val, test = _data_splits(cfg)
    if not test:
        raise ValueError("experiment needs a non-empty test split")
    t0 = time.time()
    result = run_experiment(variants, train, val, test, n_runs=cfg["runs"], cfg=_train_config(cfg),
                            base_seed=cfg["seed"], baseline=cfg["baseline"], jobs=cfg["jobs"])
    result["seconds"] = time.time() - t0
    table = Path(cfg["csv"] or Path(cfg["out_dir"]) / "experiment.csv")
    table.parent.mkdir(parents=True, exist_ok=True)
    _table_csv(result, table)
    result["table_csv"] = str(table)
    return result, format_table(result)


def _gradcheck_one(task):
    from .tinynet.train import grad_check
    name, seed, n_weights, h = task
    return grad_check(name, seed=seed, n_weights=n_weights, h=h)


def cmd_gradcheck(cfg):
    from .tinynet.model import ALL_BASE_VARIANTS, ModelVariant, enumerate_sharing_configs
    if cfg["variants"] == ["all"]:
        variants = [v.name for v in ALL_BASE_VARIANTS] + ["feature-sharing:both,both,both"]
    elif cfg["variants"] == ["all-sharing"]:
        variants = [v.name for v in enumerate_sharing_configs()]
    else:
        variants = [ModelVariant.parse(v).name for v in cfg["variants"]]
    tasks = [(v, cfg["seed"], cfg["n_weights"], cfg["h"]) for v in variants]
    checks = _pmap(_gradcheck_one, tasks, cfg["jobs"])
    worst = max(c["max_relative_error"] for c in checks)
    result = {"tolerance": cfg["tolerance"], "max_relative_error": worst, "checks": checks}
    lines = [f"{c['variant']:<34} max rel err {c['max_relative_error']:.2e}  ({c['n_checked']} weights, "
             f"{c['n_kink_skips']} kink skips)" for c in checks]
    text = "\n".join(lines)
    if worst >= cfg["tolerance"]:
        raise CheckFailed(f"gradient check failed (max {worst:.2e} >= {cfg['tolerance']:.0e})\n{text}", result)
    return result, text


# -- parser ------------------------------------------------------------------

COMMON = {"out_dir": ".", "json": None, "jobs": 1, "quiet": False}

_TRAIN_DEFAULTS = {"epochs": 20, "batch_size": 4, "lr_cell": 2e-3, "lr_tissue": 2e-3, "dropout_cell": 0.1,
                   "dropout_tissue": 0.1, "augment": True, "photometric_strength": 1.0, "eval_every": 5,
                   "label_radius_px": 3, "min_distance": 3, "threshold": 0.5, "match_radius_px": 6.0,
                   "dtype": "float32", "detach_injection": False}
_DATA_DEFAULTS = {"root": None, "n_train": 64, "n_val": 16, "n_test": 32, "data_seed": 0, "ambiguity": 0.7}
_GEOM_DEFAULTS = {"c_x": 0.5, "c_y": 0.5, "mpp": 0.2, "cell_side": 1024, "fov_ratio": 4, "downsample": 4}

COMMANDS = {
    "validate": (cmd_validate, "check a dataset manifest and its files",
                 {"root": None, "check_files": True, "classes": [1, 2]}),
    "split": (cmd_split, "assign WSIs to train/val/test per organ",
              {"root": None, "wsis": None, "seed": 0, "ratios": [0.6, 0.2, 0.2], "assignments": None,
               "write_manifest": False}),
    "stats": (cmd_stats, "class ratios and cell/tissue co-occurrence",
              {"root": None, "subset": "all", "csv": None}),
    "rasterize": (cmd_rasterize, "point annotations to disk label maps (.npy)",
                  {"points": None, "side": 1024, "radius_um": 1.4, "mpp": 0.2, "n_classes": 2}),
    "detect": (cmd_detect, "probability maps (.npy) to detection CSVs",
               {"prob": None, "min_distance": 7, "threshold": 0.5}),
    "constrain": (cmd_constrain, "relabel detections by the tissue class beneath them (TC-on-CA)",
                  {"detections": None, "mask": None, "root": None, "det_dir": None, "subset": "all",
                   "bidirectional": True, **_GEOM_DEFAULTS}),
    "eval": (cmd_eval, "distance-matched per-class and mean F1",
             {"det": None, "gt": None, "root": None, "det_dir": None, "subset": "test", "radius": 15.0,
              "classes": [1, 2]}),
    "consensus": (cmd_consensus, "merge two annotators' point sets",
                  {"a": None, "b": None, "radius": 15.0}),
    "pair-tiger": (cmd_pair_tiger, "derive cell/tissue patch pairs from TIGER-style ROI specs",
                   {"spec": None, "mode": "auto", "cell_side": 128, "tissue_side": 512}),
    "synth": (cmd_synth, "write a synthetic cell/tissue dataset",
              {**{k: v for k, v in _DATA_DEFAULTS.items() if k != "data_seed"}, "seed": 0}),
    "train": (cmd_train, "train one model variant and save its weights",
              {**_DATA_DEFAULTS, **_TRAIN_DEFAULTS, "variant": "cell-only", "seed": 0, "weights": None}),
    "experiment": (cmd_experiment, "multi-run variant comparison with significance tests",
                   {**_DATA_DEFAULTS, **_TRAIN_DEFAULTS, "variants": ["cell-only", "pred-to-inter-2"],
                    "runs": 5, "seed": 0, "baseline": "cell-only", "csv": None}),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the hand-written gradients",
                  {"variants": ["all"], "seed": 0, "n_weights": 200, "h": 1e-5, "tolerance": 1e-4}),
}

# flag spelling, argparse kwargs and a converter for config-file strings
_OPTIONS = {
    "root": (dict(help=f"dataset root (overrides ${ENV_ROOT})"), str),
    "check_files": (dict(action=argparse.BooleanOptionalAction, help="open every referenced file"), None),
    "classes": (dict(type=_ints, help="cell class ids, comma separated"), _ints),
    "wsis": (dict(help="CSV with wsi_id,organ columns (instead of --root)"), str),
    "seed": (dict(type=int), int),
    "data_seed": (dict(type=int, help="seed of the synthetic data"), int),
    "ratios": (dict(type=_floats, help="train,val,test fractions"), _floats),
    "assignments": (dict(help="output CSV of WSI assignments"), str),
    "write_manifest": (dict(action=argparse.BooleanOptionalAction, help="store the split in manifest.json"), None),
    "subset": (dict(choices=["all", "train", "val", "test"]), str),
    "csv": (dict(help="output CSV table path"), str),
    "points": (dict(nargs="+", help="point CSV files or directories"), None),
    "side": (dict(type=int, help="patch side in pixels"), int),
    "radius_um": (dict(type=float), float),
    "mpp": (dict(type=float, help="microns per pixel of the cell patch"), float),
    "n_classes": (dict(type=int), int),
    "prob": (dict(nargs="+", help="(C+1,H,W) .npy probability maps or directories"), None),
    "min_distance": (dict(type=int), int),
    "threshold": (dict(type=float), float),
    "detections": (dict(nargs="+", help="detection CSV files"), None),
    "mask": (dict(nargs="+", help="tissue mask PNG/.npy files, one per detection file"), None),
    "det_dir": (dict(nargs="+", help="directories of <pair_id>.csv detections (dataset mode; eval accepts "
                                     "one per run)"), _paths),
    "bidirectional": (dict(action=argparse.BooleanOptionalAction,
                           help="also force BC on background tissue (default on)"), None),
    "c_x": (dict(type=float, help="normalized cell-patch center x in the tissue patch"), float),
    "c_y": (dict(type=float, help="normalized cell-patch center y in the tissue patch"), float),
    "cell_side": (dict(type=int), int),
    "fov_ratio": (dict(type=int), int),
    "downsample": (dict(type=int, help="tissue storage downsample factor"), int),
    "det": (dict(nargs="+", help="detection CSV files or directories"), None),
    "gt": (dict(nargs="+", help="ground-truth point CSV files or directories"), None),
    "radius": (dict(type=float, help="match radius in pixels"), float),
    "a": (dict(help="first annotator's CSV"), str),
    "b": (dict(help="second annotator's CSV"), str),
    "spec": (dict(help="JSON ROI spec (object, list, or {'regions': [...]})"), str),
    "mode": (dict(choices=["auto", "overlapping", "roi-in-region"]), str),
    "tissue_side": (dict(type=int), int),
    "n_train": (dict(type=int), int),
    "n_val": (dict(type=int), int),
    "n_test": (dict(type=int), int),
    "ambiguity": (dict(type=float, help="fraction of cells whose class only tissue context reveals"), float),
    "variant": (dict(help="model variant, e.g. cell-only or pred-to-inter-2"), str),
    "variants": (dict(type=_names, help="comma-separated variants ('all' or 'all-sharing' for gradcheck)"),
                 _names),
    "weights": (dict(help="output prefix for .bin/.json weights"), str),
    "runs": (dict(type=int), int),
    "baseline": (dict(), str),
    "n_weights": (dict(type=int), int),
    "h": (dict(type=float, help="finite-difference step"), float),
    "tolerance": (dict(type=float), float),
    "out_dir": (dict(help="directory for outputs"), str),
    "json": (dict(help="JSON result path ('-' for stdout)"), str),
    "jobs": (dict(type=int, help="worker processes for per-item work"), int),
    "quiet": (dict(action="store_true", help="suppress the human summary"), None),
}
for _k, _v in _TRAIN_DEFAULTS.items():
    if _k not in _OPTIONS:
        if isinstance(_v, bool):
            _OPTIONS[_k] = (dict(action=argparse.BooleanOptionalAction), None)
        else:
            _OPTIONS[_k] = (dict(type=type(_v)), type(_v))
_OPTIONS["dtype"] = (dict(choices=["float32", "float64"]), str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="celltissue", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (_, help_, defaults) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON config file (flags override it)")
        for key in list(defaults) + list(COMMON):
            kwargs = dict(_OPTIONS[key][0])
            default = {**COMMON, **defaults}[key]
            if default is not None and kwargs.get("action") != "store_true":
                kwargs["help"] = (kwargs.get("help", "") + f" (default: {_show(default)})").strip()
            p.add_argument("--" + key.replace("_", "-"), dest=key, **kwargs)
    return parser


def _show(v):
    return ",".join(str(x) for x in v) if isinstance(v, list) else v


def _load_config(path, command, defaults):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"invalid config {path}: expected a JSON object")
    flat = {k: v for k, v in doc.items() if not isinstance(v, dict) or k not in COMMANDS}
    section = doc.get(command, {})
    if not isinstance(section, dict):
        raise UsageError(f"invalid config {path}: section {command!r} must be an object")
    known = set(defaults) | set(COMMON)
    unknown = sorted(k.replace("-", "_") for k in section if k.replace("-", "_") not in known)
    unknown += sorted(k for k in flat if k.replace("-", "_") not in known and k.replace("-", "_") not in _OPTIONS)
    if unknown:
        raise UsageError(f"invalid config {path}: unknown keys {unknown} for {command}")
    merged = {k.replace("-", "_"): v for k, v in flat.items() if k.replace("-", "_") in known}
    merged.update({k.replace("-", "_"): v for k, v in section.items()})
    out = {}
    for key, value in merged.items():
        conv = _OPTIONS[key][1]
        try:
            out[key] = conv(value) if conv is not None and value is not None else value
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config {path}: {key}={value!r} ({exc})") from exc
    return out


def resolve_config(command: str, given: dict) -> tuple[dict, dict]:
    """Merge defaults, config file, environment and flags; returns ``(config, sources)``."""
    defaults = {**COMMON, **COMMANDS[command][2]}
    cfg = dict(defaults)
    sources = {k: "default" for k in cfg}
    if given.get("config"):
        for k, v in _load_config(given["config"], command, defaults).items():
            cfg[k] = v
            sources[k] = "config"
    if "root" in defaults and os.environ.get(ENV_ROOT):
        cfg["root"] = os.environ[ENV_ROOT]
        sources["root"] = "env"
    for k, v in given.items():
        if k in ("command", "config"):
            continue
        cfg[k] = v
        sources[k] = "flag"
    _check(command, cfg)
    return cfg, sources


def _check(command, cfg):
    if cfg["jobs"] < 1:
        raise UsageError("--jobs must be at least 1")
    for key in ("epochs", "runs", "batch_size", "n_weights", "side", "cell_side", "tissue_side", "n_classes"):
        if key in cfg and cfg[key] is not None and cfg[key] < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be positive")
    for key in ("radius", "threshold", "min_distance", "n_train", "n_val", "n_test", "h"):
        if key in cfg and cfg[key] is not None and cfg[key] < 0:
            raise UsageError(f"--{key.replace('_', '-')} must not be negative")
    if "ambiguity" in cfg and not 0 <= cfg["ambiguity"] <= 1:
        raise UsageError("--ambiguity must lie in [0, 1]")
    if command == "experiment" and cfg["runs"] < 2:
        raise UsageError("--runs must be at least 2 for confidence intervals and significance tests")
    if command in ("train", "experiment"):
        from .tinynet.model import ModelVariant
        try:
            for v in ([cfg["variant"]] if command == "train" else cfg["variants"]):
                ModelVariant.parse(v)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


def _write_envelope(envelope, cfg):
    text = json.dumps(_jsonable(envelope), indent=2, allow_nan=False)
    target = cfg.get("json")
    if target == "-":
        sys.stdout.write(text + "\n")
        return None
    path = Path(target or Path(cfg["out_dir"]) / f"{envelope['command']}.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")
    return path


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_USAGE
    if not ns.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    given = {k: v for k, v in vars(ns).items()}
    command = given.pop("command")
    try:
        cfg, sources = resolve_config(command, given)
    except UsageError as exc:
        print(f"celltissue {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    envelope = {"command": command, "tool_version": __version__, "config": cfg, "config_sources": sources}
    from .dataio import DatasetValidationError
    from .geometry import GeometryError
    from .metrics import MetricError
    code, summary = EXIT_OK, ""
    try:
        result, summary = COMMANDS[command][0](cfg)
        envelope.update(ok=True, result=result, errors=[])
    except UsageError as exc:
        print(f"celltissue {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailed as exc:
        code = EXIT_INVALID
        envelope.update(ok=False, result=exc.result or {}, errors=[str(exc)])
    except DatasetValidationError as exc:
        code = EXIT_INVALID
        envelope.update(ok=False, result={}, errors=list(exc.problems))
    except (GeometryError, MetricError, ValueError, KeyError, FileNotFoundError,
            FloatingPointError, OSError) as exc:
        code = EXIT_INVALID
        envelope.update(ok=False, result={}, errors=[f"{type(exc).__name__}: {exc}"])
    envelope["exit_code"] = code
    path = _write_envelope(envelope, cfg)
    if code != EXIT_OK:
        for err in envelope["errors"]:
            print(f"celltissue {command}: {err}", file=sys.stderr)
    elif not cfg["quiet"] and cfg.get("json") != "-":
        print(summary)
    if path is not None and not cfg["quiet"] and cfg.get("json") != "-":
        print(f"result: {path}", file=sys.stderr if code else sys.stdout)
    return code


if __name__ == "__main__":
    sys.exit(main())
