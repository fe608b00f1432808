"""Training loop, evaluation and the multi-run variant comparison."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from ..metrics import (aggregate_runs, f1_from_counts, format_mean_ci, match_detections,
                       significance_test, sum_counts)
from ..postprocess import detect
from .augment import augment_pair
from .model import Kind, ModelVariant, NetSpec, BranchSpec, TinyNet
from .synth import SynthSample, cell_target, mean_f1_for_guessing, tissue_target
from .train import Adam, Batch, train_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr_cell: float = 2e-3
    lr_tissue: float = 2e-3
    dropout_cell: float = 0.1
    dropout_tissue: float = 0.1
    augment: bool = True
    photometric_strength: float = 1.0
    eval_every: int = 5
    label_radius_px: int = 3
    min_distance: int = 3
    threshold: float = 0.5
    match_radius_px: float = 6.0
    dtype: str = "float32"
    detach_injection: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def make_batch(samples: Sequence[SynthSample], label_radius_px: int, dtype=np.float32) -> Batch:
    x_s = np.stack([s.cell_image for s in samples]).astype(dtype) - 0.5
    x_l = np.stack([s.tissue_image for s in samples]).astype(dtype) - 0.5
    y_cell = np.stack([cell_target(s, label_radius_px) for s in samples]).astype(dtype)
    tt = [tissue_target(s.tissue_mask) for s in samples]
    y_t = np.stack([t[0] for t in tt]).astype(dtype)
    valid = np.stack([t[1] for t in tt]).astype(dtype)
    centers = [(s.geometry.c_x, s.geometry.c_y) for s in samples]
    return Batch(x_s, y_cell, centers, x_l, y_t, valid)


def predict_samples(net: TinyNet, samples: Sequence[SynthSample], label_radius_px: int, chunk: int = 16):
    cells, tissues = [], []
    for i in range(0, len(samples), chunk):
        b = make_batch(samples[i:i + chunk], label_radius_px, net.dtype)
        y_l_t = b.y_tissue if net.variant.kind is Kind.LABEL_LEAKING else None
        c, t = net.predict(b.x_s, b.x_l, b.centers, y_l_t)
        cells.extend(c.astype(float))
        tissues.extend(t.astype(float) if t is not None else [None] * len(c))
    return cells, tissues


def _ambiguous_subset(dets, sample: SynthSample, radius: float):
    """Detections whose nearest GT within ``radius`` is ambiguous, and the ambiguous GTs."""
    gts = sample.cell_points
    amb_gt = [g for g, a in zip(gts, sample.ambiguous) if a]
    if not gts:
        return [], amb_gt
    gx = np.array([g.x for g in gts])
    gy = np.array([g.y for g in gts])
    keep = []
    for d in dets:
        d2 = (gx - d.x) ** 2 + (gy - d.y) ** 2
        j = int(np.argmin(d2))
        if d2[j] <= radius ** 2 and sample.ambiguous[j]:
            keep.append(d)
    return keep, amb_gt


def evaluate(net: TinyNet, samples: Sequence[SynthSample], cfg: TrainConfig) -> dict:
    """Mean F1 overall and on the ambiguous subset, plus tissue IoU when available."""
    cells, tissues = predict_samples(net, samples, cfg.label_radius_px)
    all_counts, amb_counts = [], []
    inter = np.zeros(2)
    union = np.zeros(2)
    n_amb_tc = n_amb = 0
    for s, prob, tprob in zip(samples, cells, tissues):
        dets = detect(prob, cfg.min_distance, cfg.threshold, validate=False)
        all_counts.append(match_detections(dets, s.cell_points, cfg.match_radius_px))
        amb_dets, amb_gt = _ambiguous_subset(dets, s, cfg.match_radius_px)
        amb_counts.append(match_detections(amb_dets, amb_gt, cfg.match_radius_px))
        n_amb += len(amb_gt)
        n_amb_tc += sum(g.class_id == 1 for g in amb_gt)
        if tprob is not None:
            pred = tprob.argmax(axis=0)
            truth, valid = tissue_target(s.tissue_mask)
            truth = truth.argmax(axis=0)
            ok = valid[0] > 0
            for k in range(2):
                inter[k] += np.sum((pred == k) & (truth == k) & ok)
                union[k] += np.sum(((pred == k) | (truth == k)) & ok)
    overall = f1_from_counts(sum_counts(all_counts))
    out = {"mean_f1": overall.mean_f1, "per_class_f1": {str(k): v for k, v in overall.per_class.items()}}
    amb_total = sum_counts(amb_counts)
    if amb_total.all_classes():
        try:
            out["ambiguous_mean_f1"] = f1_from_counts(amb_total).mean_f1
        except ValueError:
            out["ambiguous_mean_f1"] = float("nan")
    p_tc = n_amb_tc / n_amb if n_amb else 0.5
    out["ambiguous_tc_fraction"] = p_tc
    out["appearance_only_bound"] = mean_f1_for_guessing(p_tc)
    if union.sum() > 0:
        out["tissue_miou"] = float(np.mean(inter / np.maximum(union, 1)))
    return out


def build_net(variant: ModelVariant, cfg: TrainConfig, seed: int) -> TinyNet:
    spec = NetSpec(cell=BranchSpec(dropout=cfg.dropout_cell), tissue=BranchSpec(dropout=cfg.dropout_tissue),
                   detach_injection=cfg.detach_injection)
    return TinyNet(variant, spec, seed=seed, dtype=np.dtype(cfg.dtype))


def train_model(variant: ModelVariant | str, train: Sequence[SynthSample], val: Sequence[SynthSample] | None,
                cfg: TrainConfig = TrainConfig(), seed: int = 0) -> tuple[TinyNet, dict]:
    """Train one variant; keeps the weights from the evaluation with the best validation mean F1."""
    variant = ModelVariant.parse(variant) if isinstance(variant, str) else variant
    rng = np.random.default_rng(seed)
    net = build_net(variant, cfg, seed)
    opt = Adam(cfg.lr_cell, cfg.lr_tissue)
    dtype = net.dtype
    history = {"loss_cell": [], "loss_tissue": [], "val": []}
    best = (-math.inf, None, -1)
    t0 = time.time()
    n = len(train)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            chunk = [train[j] for j in order[i:i + cfg.batch_size]]
            if cfg.augment:
                chunk = [augment_pair(s, rng, cfg.photometric_strength) for s in chunk]
            lc, lt = train_step(net, make_batch(chunk, cfg.label_radius_px, dtype), opt, rng)
            history["loss_cell"].append(lc)
            history["loss_tissue"].append(lt)
        last = epoch == cfg.epochs - 1
        if val and ((epoch + 1) % cfg.eval_every == 0 or last):
            score = evaluate(net, val, cfg)["mean_f1"]
            history["val"].append((epoch + 1, score))
            log.info("%s seed=%d epoch=%d val_f1=%.4f", variant.name, seed, epoch + 1, score)
            if score > best[0]:
                best = (score, {k: v.copy() for k, v in net.params.items()}, epoch + 1)
    if best[1] is not None:
        net.params = best[1]
    history["best_epoch"] = best[2]
    history["seconds"] = time.time() - t0
    return net, history


def _train_and_evaluate(task) -> dict:
    variant, train, val, test, cfg, seed = task
    net, hist = train_model(variant, train, val, cfg, seed=seed)
    ev = evaluate(net, test, cfg)
    ev.update(seed=seed, best_epoch=hist["best_epoch"], seconds=hist["seconds"])
    return ev


def run_experiment(variants: Sequence[ModelVariant | str], train: Sequence[SynthSample],
                   val: Sequence[SynthSample], test: Sequence[SynthSample], n_runs: int = 5,
                   cfg: TrainConfig = TrainConfig(), base_seed: int = 0, baseline: str = "cell-only",
                   jobs: int = 1) -> dict:
    """Train every variant ``n_runs`` times (run ``r`` uses seed ``base_seed + r`` for all variants).

    With ``jobs > 1`` the runs execute in worker processes; every run is
    seeded on its own, so the result does not depend on ``jobs``.
    """
    variants = [ModelVariant.parse(v) if isinstance(v, str) else v for v in variants]
    tasks = [(v, train, val, test, cfg, base_seed + r) for v in variants for r in range(n_runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_and_evaluate, tasks))
    else:
        results = [_train_and_evaluate(t) for t in tasks]
    rows = {}
    for i, v in enumerate(variants):
        runs = results[i * n_runs:(i + 1) * n_runs]
        scores = [e["mean_f1"] for e in runs]
        row = {"runs": runs, "scores": scores}
        if n_runs >= 2:
            mean, hw = aggregate_runs(scores)
            row.update(mean=mean, ci_half_width=hw, display=format_mean_ci(mean, hw))
        else:
            row.update(mean=scores[0], ci_half_width=None, display=f"{100 * scores[0]:.2f}")
        amb = [e.get("ambiguous_mean_f1", float("nan")) for e in runs]
        row["ambiguous_mean_f1"] = float(np.nanmean(amb)) if not np.all(np.isnan(amb)) else float("nan")
        row["appearance_only_bound"] = float(np.mean([e["appearance_only_bound"] for e in runs]))
        rows[v.name] = row
    if baseline in rows and n_runs >= 2:
        base_scores = rows[baseline]["scores"]
        for name, row in rows.items():
            if name != baseline:
                row["p_value_vs_baseline"] = significance_test(row["scores"], base_scores)
                row["delta_vs_baseline"] = row["mean"] - rows[baseline]["mean"]
    return {"variants": rows, "n_runs": n_runs, "base_seed": base_seed, "config": cfg.to_dict(),
            "baseline": baseline}


def format_table(result: dict) -> str:
    lines = [f"{'variant':<34} {'test mean F1':>14} {'ambig. F1':>10} {'p vs base':>10}"]
    for name, row in result["variants"].items():
        p = row.get("p_value_vs_baseline")
        lines.append(f"{name:<34} {row['display']:>14} {100 * row['ambiguous_mean_f1']:>10.2f} "
                     f"{(f'{p:.2g}' if p is not None else '-'):>10}")
    return "\n".join(lines)


def samples_from_records(records) -> list[SynthSample]:
    """Load on-disk pair records into in-memory samples for training and evaluation."""
    out = []
    for rec in records:
        amb = rec.meta.get("ambiguous") or [False] * len(rec.cell_points)
        out.append(SynthSample(rec.load_cell_image(), rec.load_tissue_image(), rec.load_tissue_mask(),
                               list(rec.cell_points), [bool(a) for a in amb], rec.geometry,
                               wsi_id=rec.wsi_id, organ=rec.organ, pair_id=rec.pair_id, subset=rec.subset))
    return out


def split_samples(samples: Sequence[SynthSample], n_train: int, n_val: int):
    train = [replace(s, subset="train") for s in samples[:n_train]]
    val = [replace(s, subset="val") for s in samples[n_train:n_train + n_val]]
    test = [replace(s, subset="test") for s in samples[n_train + n_val:]]
    return train, val, test
