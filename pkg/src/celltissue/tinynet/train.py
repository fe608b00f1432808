"""Losses, Adam, training steps and the finite-difference gradient check."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .model import Kind, ModelVariant, NetSpec, TinyNet


@dataclass
class Batch:
    x_s: np.ndarray
    y_cell: np.ndarray
    centers: list
    x_l: np.ndarray | None = None
    y_tissue: np.ndarray | None = None
    tissue_valid: np.ndarray | None = None

    def __len__(self):
        return self.x_s.shape[0]


def dice_loss(pred: np.ndarray, target: np.ndarray, eps: float = 1e-6) -> float:
    """Soft Dice loss on plain arrays ``(C, H, W)`` or ``(N, C, H, W)``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.ndim == 3:
        pred, target = pred[None], target[None]
    return float(ag.dice_loss(ag.const(pred), target, eps=eps).value)


@dataclass
class Adam:
    lr_cell: float = 1e-3
    lr_tissue: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, net: TinyNet, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for name, g in grads.items():
            lr = self.lr_cell if net.param_group(name) == "cell" else self.lr_tissue
            if lr == 0:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            net.params[name] -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def loss_graph(net: TinyNet, batch: Batch, training: bool, rng, pvars: dict,
               loss_weights=(1.0, 1.0)):
    """Build the total-loss Var; returns ``(total, cell_loss, tissue_loss_or_None)``."""
    y_l_t = batch.y_tissue if net.variant.kind is Kind.LABEL_LEAKING else None
    cell_p, tissue_p = net.forward(batch.x_s, batch.x_l, batch.centers, y_l_t, training=training,
                                   rng=rng, pvars=pvars)
    cell_loss = ag.dice_loss(cell_p, batch.y_cell.astype(net.dtype, copy=False))
    w_cell, w_tissue = loss_weights
    total = cell_loss if w_cell == 1 else _scale(cell_loss, w_cell)
    tissue_loss = None
    if tissue_p is not None:
        tissue_loss = ag.dice_loss(tissue_p, batch.y_tissue.astype(net.dtype, copy=False), batch.tissue_valid)
        total = ag.add(total, tissue_loss if w_tissue == 1 else _scale(tissue_loss, w_tissue))
    return total, cell_loss, tissue_loss


def _scale(x: ag.Var, k: float) -> ag.Var:
    return ag.Var(x.value * k, (x,), lambda g: (g * k,), "scale")


def compute_grads(net: TinyNet, batch: Batch, training=True, rng=None, loss_weights=(1.0, 1.0)):
    pvars = {k: ag.Var(p, name=k) for k, p in net.params.items()}
    total, cell_loss, tissue_loss = loss_graph(net, batch, training, rng, pvars, loss_weights)
    ag.backward(total)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in pvars.items()}
    return grads, float(cell_loss.value), (float(tissue_loss.value) if tissue_loss is not None else None)


def train_step(net: TinyNet, batch: Batch, opt: Adam, rng: np.random.Generator,
               loss_weights=(1.0, 1.0)) -> tuple[float, float | None]:
    """One Adam step on ``batch``; returns ``(cell_loss, tissue_loss)`` before the update."""
    grads, lc, lt = compute_grads(net, batch, True, rng, loss_weights)
    if not np.isfinite(lc) or (lt is not None and not np.isfinite(lt)):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise FloatingPointError(
            f"non-finite loss (cell={lc}, tissue={lt}) at Adam step {opt.t + 1}; "
            f"non-finite gradients in {bad or 'none'}"
        )
    opt.step(net, grads)
    return lc, lt


# -- gradient verification ----------------------------------------------------

def _random_batch(rng, spec: NetSpec, n: int, cell_side: int, tissue_side: int, dtype) -> Batch:
    x_s = rng.normal(size=(n, 3, cell_side, cell_side)).astype(dtype)
    x_l = rng.normal(size=(n, 3, tissue_side, tissue_side)).astype(dtype)
    cidx = rng.integers(0, spec.n_cell_classes + 1, size=(n, cell_side, cell_side))
    tidx = rng.integers(0, spec.n_tissue_classes + 1, size=(n, tissue_side, tissue_side))
    y_cell = (np.arange(spec.n_cell_classes + 1)[None, :, None, None] == cidx[:, None]).astype(dtype)
    y_tissue = (np.arange(spec.n_tissue_classes + 1)[None, :, None, None] == tidx[:, None]).astype(dtype)
    # window offsets on the coarsest tissue grid must be integers
    coarse = tissue_side // 4
    side = coarse // spec.fov_ratio
    centers = []
    for _ in range(n):
        top, left = rng.integers(0, coarse - side + 1, size=2)
        centers.append(((left + side / 2) / coarse, (top + side / 2) / coarse))
    valid = (rng.random((n, 1, tissue_side, tissue_side)) > 0.1).astype(dtype)
    return Batch(x_s, y_cell, centers, x_l, y_tissue, valid)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor stops round-off on near-zero entries dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(variant: ModelVariant | str, seed: int = 0, n_weights: int = 200, h: float = 1e-5,
               cell_side: int = 16, tissue_side: int = 16, batch_size: int = 2,
               spec: NetSpec | None = None, net: TinyNet | None = None, batch: Batch | None = None) -> dict:
    """Compare backprop against central differences on sampled weights.

    Weights are drawn from every parameter tensor (so every layer kind and
    every cross-branch adapter is covered).  Dropout masks are frozen by
    reseeding for each evaluation.  A coordinate whose ``+-h`` perturbation
    flips any ReLU sign sits on a kink where central differences are not
    valid; it is replaced by another draw and counted in ``n_kink_skips``.
    """
    rng = np.random.default_rng(seed)
    if net is None:
        spec = spec or NetSpec(fov_ratio=4)
        net = TinyNet(variant, spec, seed=seed, dtype=np.float64)
        # non-zero biases so bias gradients are exercised away from symmetric points
        for k in net.params:
            if k.endswith(".b"):
                net.params[k] = rng.normal(0, 0.1, size=net.params[k].shape)
    if batch is None:
        batch = _random_batch(rng, net.spec, batch_size, cell_side, tissue_side, np.float64)
    drop_seed = int(rng.integers(1 << 31))

    def evaluate():
        pvars = {k: ag.Var(p, name=k) for k, p in net.params.items()}
        with ag.record_relu_masks() as masks:
            total, _, _ = loss_graph(net, batch, True, np.random.default_rng(drop_seed), pvars)
        return float(total.value), masks

    pvars = {k: ag.Var(p, name=k) for k, p in net.params.items()}
    with ag.record_relu_masks() as base_masks:
        total, _, _ = loss_graph(net, batch, True, np.random.default_rng(drop_seed), pvars)
    ag.backward(total)
    grads = {k: v.grad for k, v in pvars.items()}

    names = sorted(net.params)
    per_tensor = max(1, -(-n_weights // len(names)))
    worst, checked, skipped = 0.0, 0, 0
    coverage = {}
    for name in names:
        arr = net.params[name]
        done, tries = 0, 0
        while done < per_tensor and tries < 20 * per_tensor:
            tries += 1
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            lp, mp = evaluate()
            arr[idx] = orig - h
            lm, mm = evaluate()
            arr[idx] = orig
            if any((a != b).any() for a, b in zip(mp, base_masks)) or \
                    any((a != b).any() for a, b in zip(mm, base_masks)):
                skipped += 1
                continue
            numeric = (lp - lm) / (2 * h)
            analytic = float(grads[name][idx]) if grads[name] is not None else 0.0
            worst = max(worst, relative_error(analytic, numeric))
            done += 1
        coverage[name] = done
        checked += done
    return {
        "variant": net.variant.name,
        "max_relative_error": worst,
        "n_checked": checked,
        "n_kink_skips": skipped,
        "h": h,
        "coverage": coverage,
    }
