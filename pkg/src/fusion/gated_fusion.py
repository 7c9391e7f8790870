# src/fusion/gated_fusion.py
"""
Bidirectional gated RoI fusion.

One stage squeezes each input volume to a channel vector with global average
pooling, unifies both vectors to a common width, and predicts one gate vector
per branch through Linear-ReLU-Linear. The gated sum S = a_v * v + a_p * p is
refined by 3x3x3 convolutions and added back to S. Three stages run in cascade:
stage 1 fuses (voxel, point), every later stage fuses (previous output, point).
The cascade result is the elementwise mean of the stage outputs.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.nn.bundle import TensorSpec, WeightBundle
from src.nn.functional import affine_forward, conv3d_backward, conv3d_forward, global_avg_pool, relu, sigmoid
from src.roi.pooling import FeatureVolume, VolumeTag
from src.utils.errors import BundleError, ShapeError

logger = logging.getLogger(__name__)

NUM_STAGES = 3
ADAPTER_PREFIX = "bgrf.adapter"


class GateMode(Enum):
    SIGMOID = "sigmoid"     # independent gates in (0, 1)
    SOFTMAX = "softmax"     # complementary gates, a_v + a_p = 1


@dataclass(frozen=True)
class FusionConfig:
    channels: int = 128
    unify_channels: int = 64
    gate_hidden: int = 64
    refine_depth: int = 1
    gate_mode: GateMode = GateMode.SIGMOID

    def __post_init__(self):
        object.__setattr__(self, "gate_mode", GateMode(self.gate_mode))
        if min(self.channels, self.unify_channels, self.gate_hidden) < 1:
            raise ValueError("fusion widths must be >= 1")
        if self.refine_depth < 1:
            raise ValueError(f"refine_depth must be >= 1, got {self.refine_depth}")


class Affine(NamedTuple):
    W: np.ndarray
    b: np.ndarray


class GateBranch(NamedTuple):
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


@dataclass(frozen=True)
class BgrfStageWeights:
    unify_v: Affine
    unify_p: Affine
    gate_v: GateBranch
    gate_p: GateBranch
    refine: Tuple[Affine, ...] = field(default_factory=tuple)

    def __post_init__(self):
        c = self.gate_v.W2.shape[0]
        cu = self.unify_v.W.shape[0]
        for name, branch in (("unify_v", self.unify_v), ("unify_p", self.unify_p)):
            if branch.W.shape != (cu, c) or branch.b.shape != (cu,):
                raise ShapeError(f"{name} must map {c} -> {cu} channels, got {branch.W.shape}")
        for name, gate in (("gate_v", self.gate_v), ("gate_p", self.gate_p)):
            hidden = gate.W1.shape[0]
            if gate.W1.shape != (hidden, cu) or gate.b1.shape != (hidden,) \
                    or gate.W2.shape != (c, hidden) or gate.b2.shape != (c,):
                raise ShapeError(f"{name} shapes do not form a {cu} -> {c} gating branch")
        if not self.refine:
            raise ShapeError("a fusion stage needs at least one refinement conv")
        for i, conv in enumerate(self.refine):
            if conv.W.shape != (c, c, 3, 3, 3) or conv.b.shape != (c,):
                raise ShapeError(f"refine.{i} must be a ({c}, {c}, 3, 3, 3) kernel, got {conv.W.shape}")

    @property
    def channels(self) -> int:
        return int(self.gate_v.W2.shape[0])

    def named(self) -> Dict[str, np.ndarray]:
        tensors = {}
        for branch in ("unify_v", "unify_p"):
            affine = getattr(self, branch)
            tensors[f"{branch}.W"], tensors[f"{branch}.b"] = affine.W, affine.b
        for branch in ("gate_v", "gate_p"):
            for part, value in getattr(self, branch)._asdict().items():
                tensors[f"{branch}.{part}"] = value
        for i, conv in enumerate(self.refine):
            tensors[f"refine.{i}.W"], tensors[f"refine.{i}.b"] = conv.W, conv.b
        return tensors

    @classmethod
    def from_named(cls, tensors: Dict[str, np.ndarray]) -> "BgrfStageWeights":
        def t(name):
            if name not in tensors:
                raise BundleError(f"fusion stage is missing tensor '{name}'")
            return np.asarray(tensors[name], dtype=np.float64)

        depth = 0
        while f"refine.{depth}.W" in tensors:
            depth += 1
        return cls(
            unify_v=Affine(t("unify_v.W"), t("unify_v.b")),
            unify_p=Affine(t("unify_p.W"), t("unify_p.b")),
            gate_v=GateBranch(*(t(f"gate_v.{p}") for p in GateBranch._fields)),
            gate_p=GateBranch(*(t(f"gate_p.{p}") for p in GateBranch._fields)),
            refine=tuple(Affine(t(f"refine.{i}.W"), t(f"refine.{i}.b")) for i in range(depth)),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.named().values()]).astype(np.float64)

    def from_vector(self, vector: np.ndarray) -> "BgrfStageWeights":
        """Same layout as to_vector; shapes are taken from self."""
        named = self.named()
        total = sum(np.size(value) for value in named.values())
        if total != np.size(vector):
            raise ShapeError(f"vector has {np.size(vector)} values, stage holds {total}")
        tensors, offset = {}, 0
        for name, value in named.items():
            size = np.size(value)
            tensors[name] = np.asarray(vector[offset:offset + size], dtype=np.float64).reshape(np.shape(value))
            offset += size
        return BgrfStageWeights.from_named(tensors)


class CascadeOutput(NamedTuple):
    stages: Tuple[FeatureVolume, ...]
    average: FeatureVolume


# ─── Weight manifests ──────────────────────────────────────────────────────────

def stage_prefix(stage: int) -> str:
    return f"bgrf.stage{stage}"


def bgrf_manifest(cfg: FusionConfig, map_channels: Optional[int] = None) -> List[TensorSpec]:
    c, cu, hidden = cfg.channels, cfg.unify_channels, cfg.gate_hidden
    specs = []
    if map_channels is not None and map_channels != c:
        specs += [TensorSpec(f"{ADAPTER_PREFIX}.W", (c, map_channels)),
                  TensorSpec(f"{ADAPTER_PREFIX}.b", (c,), fan_in=map_channels)]
    for stage in range(1, NUM_STAGES + 1):
        p = stage_prefix(stage)
        for branch in ("unify_v", "unify_p"):
            specs += [TensorSpec(f"{p}.{branch}.W", (cu, c)),
                      TensorSpec(f"{p}.{branch}.b", (cu,), fan_in=c)]
        for branch in ("gate_v", "gate_p"):
            specs += [TensorSpec(f"{p}.{branch}.W1", (hidden, cu)),
                      TensorSpec(f"{p}.{branch}.b1", (hidden,), fan_in=cu),
                      TensorSpec(f"{p}.{branch}.W2", (c, hidden)),
                      TensorSpec(f"{p}.{branch}.b2", (c,), fan_in=hidden)]
        for i in range(cfg.refine_depth):
            specs += [TensorSpec(f"{p}.refine.{i}.W", (c, c, 3, 3, 3)),
                      TensorSpec(f"{p}.refine.{i}.b", (c,), fan_in=c * 27)]
    return specs


def load_cascade_weights(bundle: WeightBundle) -> List[BgrfStageWeights]:
    """Stage weights 1..3 from a bundle; a missing stage or tensor raises BundleError."""
    stages = []
    for stage in range(1, NUM_STAGES + 1):
        prefix = stage_prefix(stage) + "."
        tensors = {name[len(prefix):]: bundle.get(name) for name in bundle.names() if name.startswith(prefix)}
        if not tensors:
            raise BundleError(f"weight bundle has no tensors for fusion stage {stage}")
        stages.append(BgrfStageWeights.from_named(tensors))
    return stages


def load_adapter(bundle: WeightBundle) -> Optional[Affine]:
    if f"{ADAPTER_PREFIX}.W" not in bundle:
        return None
    return Affine(bundle.get(f"{ADAPTER_PREFIX}.W"), bundle.get(f"{ADAPTER_PREFIX}.b"))


def adapt_channels(volume: FeatureVolume, adapter: Affine) -> FeatureVolume:
    """Per-cell affine map of the channel vector, C_map -> C."""
    cells_last = np.moveaxis(volume.data, 0, -1)
    out = affine_forward(adapter.W, adapter.b, cells_last)
    return FeatureVolume(np.moveaxis(out, -1, 0), volume.tag)


# ─── One fusion stage ──────────────────────────────────────────────────────────

def _branch_logits(vol: np.ndarray, unify: Affine, gate: GateBranch) -> np.ndarray:
    unified = relu(affine_forward(unify.W, unify.b, global_avg_pool(vol)))
    hidden = relu(affine_forward(gate.W1, gate.b1, unified))
    return affine_forward(gate.W2, gate.b2, hidden)


def _gates_from_logits(zv: np.ndarray, zp: np.ndarray, mode: GateMode) -> Tuple[np.ndarray, np.ndarray]:
    if GateMode(mode) is GateMode.SOFTMAX:
        av = sigmoid(zv - zp)
        return av, 1.0 - av
    return sigmoid(zv), sigmoid(zp)


def stage_gates(
    v_vol: np.ndarray,
    p_vol: np.ndarray,
    weights: BgrfStageWeights,
    mode: GateMode = GateMode.SIGMOID,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel gate vectors (a_v, a_p)."""
    zv = _branch_logits(v_vol, weights.unify_v, weights.gate_v)
    zp = _branch_logits(p_vol, weights.unify_p, weights.gate_p)
    return _gates_from_logits(zv, zp, mode)


def weighted_sum(v_vol: np.ndarray, p_vol: np.ndarray, a_v: np.ndarray, a_p: np.ndarray) -> np.ndarray:
    v, p = np.asarray(v_vol, dtype=np.float64), np.asarray(p_vol, dtype=np.float64)
    return a_v[:, None, None, None] * v + a_p[:, None, None, None] * p


def refine(s: np.ndarray, convs: Sequence[Affine]) -> np.ndarray:
    """3x3x3 convs, stride 1, padding 1; ReLU between consecutive convs only."""
    x = s
    for i, conv in enumerate(convs):
        x = conv3d_forward(conv.W, conv.b, x, stride=1, padding=1)
        if i < len(convs) - 1:
            x = relu(x)
    return x


def _check_pair(v: np.ndarray, p: np.ndarray, weights: BgrfStageWeights) -> None:
    if v.shape != p.shape:
        raise ShapeError(f"voxel volume {v.shape} and point volume {p.shape} differ")
    if v.ndim != 4 or v.shape[0] != weights.channels:
        raise ShapeError(f"stage weights expect {weights.channels} channels, got volume {v.shape}")


def gated_fuse_stage(
    v_vol: FeatureVolume,
    p_vol: FeatureVolume,
    weights: BgrfStageWeights,
    mode: GateMode = GateMode.SIGMOID,
) -> FeatureVolume:
    v, p = v_vol.data, p_vol.data
    _check_pair(v, p, weights)
    a_v, a_p = stage_gates(v, p, weights, mode)
    s = weighted_sum(v, p, a_v, a_p)
    return FeatureVolume(s + refine(s, weights.refine), VolumeTag.FUSED)


def stage_weight_gradients(
    v_vol: np.ndarray,
    p_vol: np.ndarray,
    weights: BgrfStageWeights,
    grad_out: Optional[np.ndarray] = None,
    mode: GateMode = GateMode.SIGMOID,
) -> Dict[str, np.ndarray]:
    """
    Backward pass of one stage. grad_out defaults to ones (loss = sum of the
    output). Returns gradients keyed like BgrfStageWeights.named(), plus
    "input_v" and "input_p" for the two volumes.
    """
    v, p = np.asarray(v_vol, dtype=np.float64), np.asarray(p_vol, dtype=np.float64)
    _check_pair(v, p, weights)
    mode = GateMode(mode)
    g_out = np.ones_like(v) if grad_out is None else np.asarray(grad_out, dtype=np.float64)
    cells = v[0].size

    # forward, keeping intermediates
    cache = {}
    for tag, vol, unify, gate in (("v", v, weights.unify_v, weights.gate_v),
                                  ("p", p, weights.unify_p, weights.gate_p)):
        pooled = global_avg_pool(vol)
        pre_u = affine_forward(unify.W, unify.b, pooled)
        unified = relu(pre_u)
        pre_h = affine_forward(gate.W1, gate.b1, unified)
        hidden = relu(pre_h)
        cache[tag] = (pooled, pre_u, unified, pre_h, hidden, affine_forward(gate.W2, gate.b2, hidden))
    a_v, a_p = _gates_from_logits(cache["v"][5], cache["p"][5], mode)
    s = weighted_sum(v, p, a_v, a_p)
    layer_inputs, pre_acts = [], []
    x = s
    for i, conv in enumerate(weights.refine):
        layer_inputs.append(x)
        pre = conv3d_forward(conv.W, conv.b, x, stride=1, padding=1)
        pre_acts.append(pre)
        x = relu(pre) if i < len(weights.refine) - 1 else pre

    grads: Dict[str, np.ndarray] = {}
    # refinement, last conv first
    g = g_out
    for i in reversed(range(len(weights.refine))):
        if i < len(weights.refine) - 1:
            g = g * (pre_acts[i] > 0)
        g, grads[f"refine.{i}.W"], grads[f"refine.{i}.b"] = conv3d_backward(
            weights.refine[i].W, layer_inputs[i], g, stride=1, padding=1)
    d_s = g_out + g

    d_av = (d_s * v).reshape(v.shape[0], -1).sum(axis=1)
    d_ap = (d_s * p).reshape(p.shape[0], -1).sum(axis=1)
    if mode is GateMode.SOFTMAX:
        d_zv = (d_av - d_ap) * a_v * (1.0 - a_v)
        d_zp = -d_zv
    else:
        d_zv = d_av * a_v * (1.0 - a_v)
        d_zp = d_ap * a_p * (1.0 - a_p)

    direct = {"v": a_v[:, None, None, None] * d_s, "p": a_p[:, None, None, None] * d_s}
    for tag, d_z, unify, gate in (("v", d_zv, weights.unify_v, weights.gate_v),
                                  ("p", d_zp, weights.unify_p, weights.gate_p)):
        pooled, pre_u, unified, pre_h, hidden, _ = cache[tag]
        grads[f"gate_{tag}.W2"] = np.outer(d_z, hidden)
        grads[f"gate_{tag}.b2"] = d_z
        d_pre_h = (np.asarray(gate.W2, dtype=np.float64).T @ d_z) * (pre_h > 0)
        grads[f"gate_{tag}.W1"] = np.outer(d_pre_h, unified)
        grads[f"gate_{tag}.b1"] = d_pre_h
        d_pre_u = (np.asarray(gate.W1, dtype=np.float64).T @ d_pre_h) * (pre_u > 0)
        grads[f"unify_{tag}.W"] = np.outer(d_pre_u, pooled)
        grads[f"unify_{tag}.b"] = d_pre_u
        d_pooled = np.asarray(unify.W, dtype=np.float64).T @ d_pre_u
        grads[f"input_{tag}"] = direct[tag] + d_pooled[:, None, None, None] / cells
    return grads


# ─── Cascade ───────────────────────────────────────────────────────────────────

def cascade(
    v_vol: FeatureVolume,
    p_vol: FeatureVolume,
    stages: Sequence[BgrfStageWeights],
    mode: GateMode = GateMode.SIGMOID,
) -> CascadeOutput:
    if len(stages) != NUM_STAGES:
        raise BundleError(f"cascade needs {NUM_STAGES} stage weight sets, got {len(stages)}")
    outputs = []
    current = v_vol
    for weights in stages:
        current = gated_fuse_stage(current, p_vol, weights, mode)
        outputs.append(current)
    average = np.mean(np.stack([o.data for o in outputs]), axis=0)
    return CascadeOutput(tuple(outputs), FeatureVolume(average, VolumeTag.FUSED))


def flatten_for_head(volume: FeatureVolume) -> np.ndarray:
    """Row-major [c, ix, iy, iz] flattening, length C * g^3."""
    return np.ascontiguousarray(volume.data).reshape(-1).copy()
