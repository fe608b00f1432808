"""Dual-branch micro network with every cell/tissue integration variant.

Each branch is a two-level encoder/decoder::

    enc1 (3x3, s1) -> enc2 (3x3, s2) -> enc3 (3x3, s2)      "after encoder"   H/4
    bottleneck (3x3)                                        "after bottleneck" H/4
    up2 + skip enc2 -> dec1 ; up2 + skip enc1 -> dec2       "after decoder"   H
    head (3x3) -> softmax

The bottleneck stands in for the ASPP module of the full-size model.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from ..geometry import pool_pad_matrix, resize_matrix, window_on_grid
from . import autograd as ag

POSITIONS = ("encoder", "bottleneck", "decoder")
SHARING_MODES = ("none", "t2c", "c2t", "both")


class Kind(str, Enum):
    CELL_ONLY = "cell-only"
    LABEL_LEAKING = "tissue-label-leaking"
    PRED_TO_INPUT = "pred-to-input"
    PRED_TO_INTER_1 = "pred-to-inter-1"
    PRED_TO_INTER_2 = "pred-to-inter-2"
    PRED_TO_OUTPUT = "pred-to-output"
    FEATURE_SHARING = "feature-sharing"


# where each injection variant concatenates the tissue prediction
INJECTION_SITE = {
    Kind.PRED_TO_INPUT: "input",
    Kind.PRED_TO_INTER_1: "encoder",
    Kind.PRED_TO_INTER_2: "bottleneck",
    Kind.PRED_TO_OUTPUT: "decoder",
}


@dataclass(frozen=True)
class ModelVariant:
    kind: Kind
    sharing: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.FEATURE_SHARING:
            if len(self.sharing) != len(POSITIONS) or any(m not in SHARING_MODES for m in self.sharing):
                raise ValueError(f"feature sharing needs one of {SHARING_MODES} at each of {POSITIONS}")
        elif self.sharing:
            raise ValueError("sharing config only applies to feature-sharing")

    @property
    def name(self) -> str:
        if self.kind is Kind.FEATURE_SHARING:
            return f"{self.kind.value}:{','.join(self.sharing)}"
        return self.kind.value

    @property
    def uses_tissue_branch(self) -> bool:
        return self.kind not in (Kind.CELL_ONLY, Kind.LABEL_LEAKING)

    @classmethod
    def parse(cls, text: str) -> "ModelVariant":
        """``cell-only``, ``pred-to-inter-2``, ``feature-sharing:both,none,t2c`` ...

        CamelCase spellings such as ``PredToInter2`` are accepted too.
        """
        name, _, cfg = text.strip().partition(":")
        key = name.replace("-", "").replace("_", "").lower()
        kind = next((k for k in Kind if k.value.replace("-", "") == key), None)
        if kind is None:
            raise ValueError(f"unknown variant {name!r}; expected one of {[k.value for k in Kind]}")
        if kind is Kind.FEATURE_SHARING:
            return cls(kind, tuple(cfg.split(",")) if cfg else ("both",) * 3)
        return cls(kind)

    def __str__(self):
        return self.name


def enumerate_sharing_configs() -> list[ModelVariant]:
    """All ``4**3`` feature-sharing configurations in a fixed order."""
    return [ModelVariant(Kind.FEATURE_SHARING, cfg) for cfg in itertools.product(SHARING_MODES, repeat=3)]


ALL_BASE_VARIANTS = [ModelVariant(k) for k in Kind if k is not Kind.FEATURE_SHARING]


@dataclass(frozen=True)
class BranchSpec:
    widths: tuple = (8, 16)
    bottleneck: int = 32
    kernel: int = 3
    dropout: float = 0.1


@dataclass(frozen=True)
class NetSpec:
    cell: BranchSpec = BranchSpec()
    tissue: BranchSpec = BranchSpec(dropout=0.1)
    n_cell_classes: int = 2
    n_tissue_classes: int = 1
    adapter_channels: int = 8
    fov_ratio: int = 4
    inject_mode: str = "bilinear"
    detach_injection: bool = False


def _he(rng, shape):
    fan_in = shape[1] * shape[2] * shape[3]
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class TinyNet:
    """Weights and forward pass for one :class:`ModelVariant`."""

    def __init__(self, variant: ModelVariant | str, spec: NetSpec = NetSpec(), seed: int = 0,
                 dtype=np.float64):
        self.variant = ModelVariant.parse(variant) if isinstance(variant, str) else variant
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self._resize_cache: dict = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # -- construction --------------------------------------------------------

    def _extra(self, branch: str, site: str) -> int:
        """Extra input channels concatenated into ``branch`` after ``site``."""
        v, s = self.variant, self.spec
        t_out = s.n_tissue_classes + 1
        if branch == "cell":
            if v.kind is Kind.LABEL_LEAKING and site == "input":
                return t_out
            if INJECTION_SITE.get(v.kind) == site:
                return t_out
        if v.kind is Kind.FEATURE_SHARING and site in POSITIONS:
            mode = v.sharing[POSITIONS.index(site)]
            wanted = "t2c" if branch == "cell" else "c2t"
            if mode in (wanted, "both"):
                return s.adapter_channels
        return 0

    def _conv(self, rng, name, c_in, c_out, k):
        self.params[f"{name}.w"] = _he(rng, (c_out, c_in, k, k)).astype(self.dtype)
        self.params[f"{name}.b"] = np.zeros(c_out, dtype=self.dtype)

    def _build_branch(self, rng, branch, bs: BranchSpec, c_in, c_out):
        w1, w2 = bs.widths
        k = bs.kernel
        self._conv(rng, f"{branch}.enc1", c_in + self._extra(branch, "input"), w1, k)
        self._conv(rng, f"{branch}.enc2", w1, w2, k)
        self._conv(rng, f"{branch}.enc3", w2, w2, k)
        self._conv(rng, f"{branch}.bott", w2 + self._extra(branch, "encoder"), bs.bottleneck, k)
        self._conv(rng, f"{branch}.dec1", bs.bottleneck + self._extra(branch, "bottleneck") + w2, w2, k)
        self._conv(rng, f"{branch}.dec2", w2 + w1, w1, k)
        self._conv(rng, f"{branch}.head", w1 + self._extra(branch, "decoder"), c_out, k)

    def _build(self, rng):
        s = self.spec
        self._build_branch(rng, "cell", s.cell, 3, s.n_cell_classes + 1)
        if self.variant.uses_tissue_branch:
            self._build_branch(rng, "tissue", s.tissue, 3, s.n_tissue_classes + 1)
        if self.variant.kind is Kind.FEATURE_SHARING:
            widths = {"encoder": (s.cell.widths[1], s.tissue.widths[1]),
                      "bottleneck": (s.cell.bottleneck, s.tissue.bottleneck),
                      "decoder": (s.cell.widths[0], s.tissue.widths[0])}
            for pos, mode in zip(POSITIONS, self.variant.sharing):
                c_w, t_w = widths[pos]
                if mode in ("t2c", "both"):
                    self._conv(rng, f"t2c.{pos}", t_w, s.adapter_channels, 3)
                if mode in ("c2t", "both"):
                    self._conv(rng, f"c2t.{pos}", c_w, s.adapter_channels, 3)

    # -- alignment operators -------------------------------------------------

    def _crop_mats(self, centers, grid, out_side, mode):
        key = ("crop", tuple(centers), grid, out_side, mode)
        if key not in self._resize_cache:
            ry, rx = [], []
            for c_x, c_y in centers:
                win = window_on_grid(c_x, c_y, self.spec.fov_ratio, grid)
                ry.append(resize_matrix(win.top, win.side, out_side, mode, grid))
                rx.append(resize_matrix(win.left, win.side, out_side, mode, grid))
            self._resize_cache[key] = (np.stack(ry).astype(self.dtype), np.stack(rx).astype(self.dtype))
        return self._resize_cache[key]

    def _pool_mats(self, centers, in_side, grid):
        key = ("pool", tuple(centers), in_side, grid)
        if key not in self._resize_cache:
            py, px = [], []
            for c_x, c_y in centers:
                win = window_on_grid(c_x, c_y, self.spec.fov_ratio, grid)
                py.append(pool_pad_matrix(win.top, win.side, in_side, grid))
                px.append(pool_pad_matrix(win.left, win.side, in_side, grid))
            self._resize_cache[key] = (np.stack(py).astype(self.dtype), np.stack(px).astype(self.dtype))
        return self._resize_cache[key]

    def tissue_to_cell(self, x: ag.Var, centers, out_side: int, mode: str | None = None) -> ag.Var:
        ry, rx = self._crop_mats(centers, x.value.shape[-1], out_side, mode or self.spec.inject_mode)
        return ag.linear_resize(x, ry, rx)

    def cell_to_tissue(self, x: ag.Var, centers, grid: int) -> ag.Var:
        py, px = self._pool_mats(centers, x.value.shape[-1], grid)
        return ag.linear_resize(x, py, px)

    # -- forward -------------------------------------------------------------

    def forward(self, x_s: np.ndarray, x_l: np.ndarray | None = None, centers: Sequence | None = None,
                y_l_t: np.ndarray | None = None, training: bool = False,
                rng: np.random.Generator | None = None, pvars: dict | None = None):
        """Return ``(cell_prob, tissue_prob)`` as autograd Vars (tissue is None without a tissue branch).

        ``x_s`` is ``(N, 3, H, W)``; ``x_l`` ``(N, 3, S, S)`` on the stored
        tissue grid; ``centers`` a list of ``(c_x, c_y)``; ``y_l_t`` the
        one-hot tissue labels ``(N, T+1, S, S)`` for the label-leaking probe.
        """
        v = self.variant
        if x_s.ndim != 4 or x_s.shape[1] != 3:
            raise ValueError(f"cell input must be (N, 3, H, W), got {x_s.shape}")
        if pvars is None:
            pvars = {k: ag.Var(p, name=k) for k, p in self.params.items()}
        if v.kind is Kind.LABEL_LEAKING and y_l_t is None:
            raise ValueError("tissue-label-leaking needs tissue labels y_l_t")
        needs_tissue = v.uses_tissue_branch or v.kind is Kind.LABEL_LEAKING
        if needs_tissue and centers is None:
            raise ValueError(f"{v.name} needs the cell-patch centers")
        if v.uses_tissue_branch and x_l is None:
            raise ValueError(f"{v.name} needs the tissue patch x_l")
        if training and rng is None:
            rng = np.random.default_rng(0)
        H = x_s.shape[-1]
        if H % 4:
            raise ValueError("cell side must be divisible by 4")
        P = lambda name: (pvars[f"{name}.w"], pvars[f"{name}.b"])  # noqa: E731
        xs = ag.const(x_s.astype(self.dtype, copy=False))
        centers = [tuple(map(float, c)) for c in centers] if centers is not None else None

        def conv(h, name, stride=1):
            w, b = P(name)
            return ag.conv2d(h, w, b, stride)

        def enc(branch, h, p):
            e1 = ag.spatial_dropout(ag.relu(conv(h, f"{branch}.enc1")), p, rng, training)
            e2 = ag.spatial_dropout(ag.relu(conv(e1, f"{branch}.enc2", 2)), p, rng, training)
            e3 = ag.spatial_dropout(ag.relu(conv(e2, f"{branch}.enc3", 2)), p, rng, training)
            return e1, e2, e3

        def dec1(branch, b, e2):
            return ag.relu(conv(ag.concat([ag.upsample2(b), e2]), f"{branch}.dec1"))

        def dec2(branch, d1, e1):
            return ag.relu(conv(ag.concat([ag.upsample2(d1), e1]), f"{branch}.dec2"))

        def head(branch, d):
            return ag.softmax(conv(d, f"{branch}.head"))

        s = self.spec
        tissue_prob = None

        if v.kind is Kind.FEATURE_SHARING:
            xl = ag.const(x_l.astype(self.dtype, copy=False))
            c1, c2, c3 = enc("cell", xs, s.cell.dropout)
            t1, t2, t3 = enc("tissue", xl, s.tissue.dropout)
            c3, t3 = self._exchange("encoder", c3, t3, centers, pvars)
            cb = ag.relu(conv(c3, "cell.bott"))
            tb = ag.relu(conv(t3, "tissue.bott"))
            cb, tb = self._exchange("bottleneck", cb, tb, centers, pvars)
            cd = dec2("cell", dec1("cell", cb, c2), c1)
            td = dec2("tissue", dec1("tissue", tb, t2), t1)
            cd, td = self._exchange("decoder", cd, td, centers, pvars)
            return head("cell", cd), head("tissue", td)

        inject = None
        if v.uses_tissue_branch:
            xl = ag.const(x_l.astype(self.dtype, copy=False))
            t1, t2, t3 = enc("tissue", xl, s.tissue.dropout)
            tb = ag.relu(conv(t3, "tissue.bott"))
            tissue_prob = head("tissue", dec2("tissue", dec1("tissue", tb, t2), t1))
            inject = ag.detach(tissue_prob) if s.detach_injection else tissue_prob
        site = INJECTION_SITE.get(v.kind)

        def maybe_inject(h, here):
            if site != here:
                return h
            side = h.value.shape[-1]
            if side * 4 != H and side != H:
                raise AssertionError("injection resolution mismatch")
            msg = self.tissue_to_cell(inject, centers, side)
            assert msg.value.shape[-2:] == h.value.shape[-2:]
            return ag.concat([h, msg])

        h = xs
        if v.kind is Kind.LABEL_LEAKING:
            leak = self.tissue_to_cell(ag.const(y_l_t.astype(self.dtype, copy=False)), centers, H, "nearest")
            h = ag.concat([h, leak])
        h = maybe_inject(h, "input")
        c1, c2, c3 = enc("cell", h, s.cell.dropout)
        c3 = maybe_inject(c3, "encoder")
        cb = maybe_inject(ag.relu(conv(c3, "cell.bott")), "bottleneck")
        cd = maybe_inject(dec2("cell", dec1("cell", cb, c2), c1), "decoder")
        return head("cell", cd), tissue_prob

    def _exchange(self, pos, fc, ft, centers, pvars):
        mode = self.variant.sharing[POSITIONS.index(pos)]
        to_cell, to_tissue = [], []
        if mode in ("t2c", "both"):
            a = ag.conv2d(ft, pvars[f"t2c.{pos}.w"], pvars[f"t2c.{pos}.b"])
            to_cell.append(self.tissue_to_cell(a, centers, fc.value.shape[-1]))
        if mode in ("c2t", "both"):
            a = ag.conv2d(fc, pvars[f"c2t.{pos}.w"], pvars[f"c2t.{pos}.b"])
            to_tissue.append(self.cell_to_tissue(a, centers, ft.value.shape[-1]))
        return ag.concat([fc] + to_cell), ag.concat([ft] + to_tissue)

    def predict(self, x_s, x_l=None, centers=None, y_l_t=None):
        cell, tissue = self.forward(x_s, x_l, centers, y_l_t, training=False)
        return cell.value, (tissue.value if tissue is not None else None)

    # -- parameters ----------------------------------------------------------

    def param_group(self, name: str) -> str:
        """``cell`` or ``tissue``: which branch's learning rate applies."""
        if name.startswith("tissue.") or name.startswith("c2t."):
            return "tissue"
        return "cell"

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def save(self, prefix: str | Path) -> tuple[Path, Path]:
        """Flat little-endian float64 ``.bin`` plus a ``.json`` manifest of names and shapes."""
        prefix = Path(prefix)
        bin_path = prefix.with_suffix(".bin")
        json_path = prefix.with_suffix(".json")
        entries, offset, chunks = [], 0, []
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            chunks.append(arr.ravel())
        bin_path.write_bytes(np.concatenate(chunks).tobytes() if chunks else b"")
        meta = {
            "variant": self.variant.name,
            "spec": _spec_to_dict(self.spec),
            "dtype": "float64",
            "n_values": offset,
            "tensors": entries,
        }
        json_path.write_text(json.dumps(meta, indent=2))
        return bin_path, json_path

    @classmethod
    def load(cls, prefix: str | Path, dtype=np.float64) -> "TinyNet":
        prefix = Path(prefix)
        meta = json.loads(prefix.with_suffix(".json").read_text())
        flat = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
        if flat.size != meta["n_values"]:
            raise ValueError("weight file size does not match its manifest")
        net = cls(meta["variant"], _spec_from_dict(meta["spec"]), dtype=dtype)
        names = {e["name"] for e in meta["tensors"]}
        if names != set(net.params):
            raise ValueError("weight manifest does not match the variant's parameters")
        for e in meta["tensors"]:
            size = int(np.prod(e["shape"]))
            arr = flat[e["offset"]:e["offset"] + size].reshape(e["shape"])
            if arr.shape != net.params[e["name"]].shape:
                raise ValueError(f"shape mismatch for {e['name']}")
            net.params[e["name"]] = arr.astype(dtype)
        return net


def _spec_to_dict(spec: NetSpec) -> dict:
    def branch(b: BranchSpec):
        return {"widths": list(b.widths), "bottleneck": b.bottleneck, "kernel": b.kernel, "dropout": b.dropout}

    return {
        "cell": branch(spec.cell), "tissue": branch(spec.tissue),
        "n_cell_classes": spec.n_cell_classes, "n_tissue_classes": spec.n_tissue_classes,
        "adapter_channels": spec.adapter_channels, "fov_ratio": spec.fov_ratio,
        "inject_mode": spec.inject_mode, "detach_injection": spec.detach_injection,
    }


def _spec_from_dict(d: dict) -> NetSpec:
    def branch(b):
        return BranchSpec(tuple(b["widths"]), b["bottleneck"], b["kernel"], b["dropout"])

    return NetSpec(branch(d["cell"]), branch(d["tissue"]), d["n_cell_classes"], d["n_tissue_classes"],
                   d["adapter_channels"], d["fov_ratio"], d["inject_mode"], d["detach_injection"])
