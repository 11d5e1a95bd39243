"""Desk-scale analyses over materialized networks.

Covers the growth measurements (canonical-form term counts and receptive
fields per depth) and the two parameter-editing studies: low-rank updates
applied layer-wise, and structured channel pruning, both verified through
the lowering.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from .errors import RankError, ShapeError, SpecError
from .lowering import lower_conv2d_I_O, lower_conv3d
from .netspec import (
    Conv2dSpec,
    Conv3dSpec,
    MaterializedNetwork,
    MeanPoolSpec,
    NetworkSpec,
    ResidualBlockSpec,
    forward,
    materialize,
    random_input,
    to_expandable,
)
from .reference import ConvParams
from .tensor import Tensor, TensorShape


# ---------------------------------------------------------------------------
# canonical term growth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TermCountRow:
    prefix_len: int
    n_terms: int | None
    note: str = ""


def count_uat_terms(net: NetworkSpec) -> list[TermCountRow]:
    """Number of sigma terms in the canonical form of every network prefix.

    Prefixes that do not form an expandable network on their own (e.g. a
    conv stack cut mid-pooling) get ``n_terms=None`` with the reason.
    """
    rows = []
    for k in range(1, len(net.layers) + 1):
        prefix = replace(net, layers=net.layers[:k])
        try:
            exp = to_expandable(materialize(prefix))
            rows.append(TermCountRow(prefix_len=k, n_terms=exp.chain.canonical.n_terms))
        except SpecError as exc:
            rows.append(TermCountRow(prefix_len=k, n_terms=None, note=str(exc)))
    if not rows:
        raise SpecError("empty networks cannot be expanded")
    return rows


# ---------------------------------------------------------------------------
# receptive field
# ---------------------------------------------------------------------------


def receptive_field(net: NetworkSpec) -> list[dict[str, int]]:
    """Receptive-field extent per spatial axis after each layer.

    Uses the standard recurrence rf += (k - 1) * jump; jump *= stride,
    starting from rf = 1, jump = 1.  Only conv/pool stacks are meaningful
    here; attention mixes every token, so the notion does not apply.
    """
    axes: tuple[str, ...] | None = None
    rf: dict[str, int] = {}
    jump: dict[str, int] = {}
    out = []
    for i, spec in enumerate(net.layers):
        if isinstance(spec, (Conv2dSpec, Conv3dSpec)):
            layer_axes = ("H", "W") if isinstance(spec, Conv2dSpec) else ("H", "W", "D")
            extents = dict(zip(layer_axes, spec.kernel))
            stride = spec.stride
        elif isinstance(spec, MeanPoolSpec):
            layer_axes = ("H", "W")
            extents = dict(zip(layer_axes, spec.window))
            stride = spec.stride
        else:
            raise SpecError(
                f"layer {i} ({spec.kind}): receptive field is defined for conv/pool stacks only"
            )
        if axes is None:
            axes = layer_axes
            rf = {a: 1 for a in axes}
            jump = {a: 1 for a in axes}
        elif layer_axes != axes:
            raise SpecError(f"layer {i}: spatial rank changes mid-network")
        for a in axes:
            rf[a] = rf[a] + (extents[a] - 1) * jump[a]
            jump[a] = jump[a] * stride
        out.append(dict(rf))
    if not out:
        raise SpecError("no layers")
    return out


# ---------------------------------------------------------------------------
# low-rank updates
# ---------------------------------------------------------------------------

_ATTN_TARGETS = ("w_q", "w_k", "w_v", "w_o", "w_2", "w_3")
_RESIDUAL_TARGETS = ("w_1", "w_2")


@dataclass(frozen=True)
class LoraDelta:
    """Low-rank update W <- W + b @ a for one layer.

    For conv layers the kernel is treated as its (C_O) x (C_I*kh*kw[*kd])
    reshaping; ``target`` picks the matrix for attention (w_q..w_o, w_2,
    w_3) and residual (w_1, w_2) layers.
    """

    layer: int
    a: np.ndarray  # (r, n)
    b: np.ndarray  # (m, r)
    target: str = "w_2"

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError("factors must be matrices")
        if a.shape[0] != b.shape[1]:
            raise ShapeError(f"factor ranks disagree: a is {a.shape}, b is {b.shape}")
        r = a.shape[0]
        if r < 1:
            raise RankError("rank must be >= 1")
        if r > min(b.shape[0], a.shape[1]):
            raise RankError(
                f"rank {r} exceeds min(target dims) = {min(b.shape[0], a.shape[1])}"
            )
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def update(self) -> np.ndarray:
        return self.b @ self.a


def _target_matrix(rt, target: str) -> np.ndarray:
    spec = rt.spec
    if isinstance(spec, (Conv2dSpec, Conv3dSpec)):
        w = rt.conv_weights.data
        return w.reshape(w.shape[0], -1)
    if rt.attn_params is not None:
        if target not in _ATTN_TARGETS:
            raise SpecError(f"unknown attention target {target!r} (have {_ATTN_TARGETS})")
        return getattr(rt.attn_params, target)
    if rt.residual is not None:
        if target not in _RESIDUAL_TARGETS:
            raise SpecError(f"unknown residual target {target!r} (have {_RESIDUAL_TARGETS})")
        return getattr(rt.residual, target)
    raise SpecError(f"layer {rt.index} ({spec.kind}) has no adjustable matrix")


def apply_lora(net: MaterializedNetwork, delta: LoraDelta) -> MaterializedNetwork:
    """A copy of the network with the targeted matrix replaced by W + BA."""
    if not 0 <= delta.layer < len(net.layers):
        raise SpecError(f"no layer {delta.layer} in a {len(net.layers)}-layer network")
    new = copy.deepcopy(net)
    rt = new.layers[delta.layer]
    current = _target_matrix(rt, delta.target)
    update = delta.update()
    if update.shape != current.shape:
        raise ShapeError(
            f"update shape {update.shape} does not match target {current.shape}"
        )
    patched = current + update
    spec = rt.spec
    if isinstance(spec, (Conv2dSpec, Conv3dSpec)):
        kshape = rt.conv_weights.data.shape
        rt.conv_weights = Tensor(rt.conv_weights.shape, patched.reshape(kshape))
    elif rt.attn_params is not None:
        rt.attn_params = replace(rt.attn_params, **{delta.target: patched})
    else:
        rt.residual = replace(rt.residual, **{delta.target: patched})
    return new


def _lower_conv_layer(rt, probe_shape: TensorShape):
    probe = Tensor(probe_shape, np.zeros(probe_shape.extents))
    lower = lower_conv2d_I_O if isinstance(rt.spec, Conv2dSpec) else lower_conv3d
    return lower(probe, rt.conv_params, rt.conv_weights)


def lora_equivalence_check(
    net: MaterializedNetwork, delta: LoraDelta, x: Tensor, sigma: str | None = None
) -> dict:
    """Verify the low-rank update behaves linearly through the lowering.

    Checks (for conv targets) that lowering the patched kernel equals the
    lowered original plus the lowered update, entrywise; that untouched
    layers lower to bit-identical matrices; and that the patched network's
    output matches direct evaluation with W + BA.
    """
    sigma = net.activation if sigma is None else sigma
    patched = apply_lora(net, delta)
    report: dict = {"layer": delta.layer, "target": delta.target, "rank": delta.rank}

    rt = net.layers[delta.layer]
    if isinstance(rt.spec, (Conv2dSpec, Conv3dSpec)):
        base_form = _lower_conv_layer(rt, rt.in_shape)
        patched_form = _lower_conv_layer(patched.layers[delta.layer], rt.in_shape)
        kshape = rt.conv_weights.data.shape
        delta_rt = copy.deepcopy(rt)
        delta_rt.conv_weights = Tensor(
            rt.conv_weights.shape, delta.update().reshape(kshape)
        )
        delta_form = _lower_conv_layer(delta_rt, rt.in_shape)
        lin = np.max(
            np.abs(
                patched_form.weight_matrix
                - (base_form.weight_matrix + delta_form.weight_matrix)
            )
        )
        report["lowering_linearity_max_abs"] = float(lin)

    untouched = []
    for i, (a, b) in enumerate(zip(net.layers, patched.layers)):
        if i == delta.layer or not isinstance(a.spec, (Conv2dSpec, Conv3dSpec)):
            continue
        fa = _lower_conv_layer(a, a.in_shape)
        fb = _lower_conv_layer(b, b.in_shape)
        untouched.append(bool(np.array_equal(fa.weight_matrix, fb.weight_matrix)))
    report["untouched_layers_identical"] = all(untouched) if untouched else True

    out_base = forward(net, x, sigma)[-1].flat
    out_patched = forward(patched, x, sigma)[-1].flat
    report["output_max_abs_change"] = float(np.max(np.abs(out_patched - out_base)))
    return report


# ---------------------------------------------------------------------------
# structured pruning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PruneMask:
    """Output channels to remove from one conv layer, either listed outright
    or selected by a kernel-norm threshold."""

    layer: int
    channels: tuple[int, ...] | None = None
    threshold: float | None = None

    def __post_init__(self):
        if (self.channels is None) == (self.threshold is None):
            raise SpecError("give exactly one of channels / threshold")
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(sorted(set(int(c) for c in self.channels))))


def resolve_mask(net: MaterializedNetwork, mask: PruneMask) -> tuple[int, ...]:
    """The concrete channel indices a mask removes."""
    if not 0 <= mask.layer < len(net.layers):
        raise SpecError(f"no layer {mask.layer} in a {len(net.layers)}-layer network")
    rt = net.layers[mask.layer]
    if not isinstance(rt.spec, (Conv2dSpec, Conv3dSpec)):
        raise SpecError(f"layer {mask.layer} ({rt.spec.kind}): pruning targets conv layers")
    n_out = rt.conv_params.out_channels
    if mask.channels is not None:
        channels = mask.channels
        if any(c < 0 or c >= n_out for c in channels):
            raise SpecError(f"channel indices out of range 0..{n_out - 1}: {channels}")
    else:
        w = rt.conv_weights.data
        norms = np.sqrt((w.reshape(n_out, -1) ** 2).sum(axis=1))
        channels = tuple(int(c) for c in np.flatnonzero(norms < mask.threshold))
    if len(channels) >= n_out:
        raise SpecError("pruning every channel leaves nothing")
    return channels


def channel_norms(net: MaterializedNetwork, layer: int) -> np.ndarray:
    rt = net.layers[layer]
    w = rt.conv_weights.data
    return np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1))


def prune(net: MaterializedNetwork, mask: PruneMask) -> MaterializedNetwork:
    """Remove the masked output channels and shrink the first downstream conv
    layer's matching input channels (pooling passes channels through)."""
    channels = resolve_mask(net, mask)
    keep = [c for c in range(net.layers[mask.layer].conv_params.out_channels) if c not in channels]

    new = copy.deepcopy(net)
    spec = new.spec
    layers = list(spec.layers)
    layers[mask.layer] = replace(layers[mask.layer], out_channels=len(keep))
    rt = new.layers[mask.layer]
    kept_w = rt.conv_weights.data[keep]
    kept_bias = None if rt.conv_params.bias is None else rt.conv_params.bias[keep]
    rt.conv_params = replace(rt.conv_params, out_channels=len(keep), bias=kept_bias)
    axes = list(rt.conv_weights.shape.dims)
    axes[0] = ("C_O", len(keep))
    rt.conv_weights = Tensor(TensorShape(axes), kept_w)

    # shrink the first conv layer downstream that consumes these channels
    for later in new.layers[mask.layer + 1 :]:
        if isinstance(later.spec, MeanPoolSpec):
            continue
        if isinstance(later.spec, (Conv2dSpec, Conv3dSpec)):
            later.conv_params = replace(later.conv_params, in_channels=len(keep))
            kept_in = later.conv_weights.data[:, keep]
            laxes = list(later.conv_weights.shape.dims)
            laxes[1] = ("C_I", len(keep))
            later.conv_weights = Tensor(TensorShape(laxes), kept_in)
            break
        raise SpecError(
            f"layer {later.index} ({later.spec.kind}) downstream of the pruned layer "
            "cannot absorb a channel change"
        )

    from .netspec import infer_shapes

    new_spec = replace(spec, layers=tuple(layers))
    new.spec = new_spec
    new.shapes = infer_shapes(new_spec)
    for rt2, in_shape, out_shape in zip(new.layers, new.shapes, new.shapes[1:]):
        rt2.in_shape = in_shape
        rt2.out_shape = out_shape
    return new


def prune_impact(
    net: MaterializedNetwork,
    mask: PruneMask,
    inputs: list[Tensor],
    sigma: str | None = None,
) -> dict:
    """Output deviation between the original and pruned networks.

    When the channel change survives to the network output (no downstream
    conv re-mixes), the comparison restricts the original output to the
    surviving channels.
    """
    sigma = net.activation if sigma is None else sigma
    channels = resolve_mask(net, mask)
    pruned = prune(net, mask)
    n_out = net.layers[mask.layer].conv_params.out_channels
    keep = [c for c in range(n_out) if c not in channels]

    devs = []
    for x in inputs:
        a = forward(net, x, sigma)[-1]
        b = forward(pruned, x, sigma)[-1]
        if a.shape == b.shape:
            devs.append(float(np.max(np.abs(a.data - b.data))))
        else:
            devs.append(float(np.max(np.abs(a.data[keep] - b.data))))
    return {
        "layer": mask.layer,
        "pruned_channels": list(channels),
        "inputs": len(inputs),
        "max_deviation": max(devs),
        "mean_deviation": float(np.mean(devs)),
        "per_input": devs,
    }
