"""Network description files: schema, validation, weights, and execution.

A description is UTF-8 JSON::

    {
      "input_shape": [["C_I", 1], ["H", 6], ["W", 6]],
      "seed": 7,
      "activation": "relu",
      "layers": [
        {"kind": "conv2d", "out_channels": 2, "kernel": [2, 2],
         "stride": 1, "padding": 0, "bias": true},
        ...
      ]
    }

Layer kinds and their fields (stride defaults to 1, padding to 0,
bias to false):

* ``conv2d``    out_channels, kernel [kh, kw], stride, padding, bias
* ``conv3d``    out_channels, kernel [kh, kw, kd], stride, padding, bias
* ``mean_pool`` window [kh, kw], stride
* ``residual_block`` hidden_dim (optional; defaults to the flat input size)
* ``patchify``  patch [ph, pw]
* ``mha``       heads
* ``ffn``       hidden_dim
* ``transformer_block`` heads, hidden_dim

All weights are drawn uniformly from [-1, 1) out of a single splitmix
stream seeded with ``seed``, layer by layer in declaration order (kernel
then bias for convolutions; w_1, b_1, w_2, b_2 for residual blocks;
q, k, v, o projections then the FFN stages for attention layers), so a
description plus its seed pins every number in the network.

Execution conventions: convolutions apply the network activation after the
layer; pooling and patchify are linear; residual, FFN, and transformer
blocks use the activation only inside their own structure.  All stage
values are :class:`~uatcv.tensor.Tensor`; token matrices use axes
(token, feature).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import (
    CapacityError,
    ParseError,
    ShapeError,
    SpecError,
    ValidationError,
)
from .lowering import (
    LoweredForm,
    extract_mha_effective_matrix,
    lower_conv2d_I_O,
    lower_conv3d,
    lower_ffn,
    lower_mean_pool,
)
from .reference import (
    ACTIVATIONS,
    AttnParams,
    ConvParams,
    PoolParams,
    activation,
    conv2d_direct,
    conv3d_direct,
    ffn_direct,
    mean_pool_direct,
    mha_direct,
    patchify,
    transformer_block_direct,
)
from .tensor import AXIS_NAMES, SplitMix64, Tensor, TensorShape, flatten
from . import symbolic
from .symbolic import (
    ChainStage,
    bias_atom,
    build_residual_chain,
    build_transformer_chain,
    dense_chain,
    weight_atom,
)


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2dSpec:
    kind = "conv2d"
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0
    bias: bool = False
    in_channels: int | None = None  # optional assertion against the shape chain


@dataclass(frozen=True)
class Conv3dSpec:
    kind = "conv3d"
    out_channels: int
    kernel: tuple[int, int, int]
    stride: int = 1
    padding: int = 0
    bias: bool = False
    in_channels: int | None = None


@dataclass(frozen=True)
class MeanPoolSpec:
    kind = "mean_pool"
    window: tuple[int, int]
    stride: int = 1


@dataclass(frozen=True)
class ResidualBlockSpec:
    kind = "residual_block"
    hidden_dim: int | None = None


@dataclass(frozen=True)
class PatchifySpec:
    kind = "patchify"
    patch: tuple[int, int]


@dataclass(frozen=True)
class MhaSpec:
    kind = "mha"
    heads: int


@dataclass(frozen=True)
class FfnSpec:
    kind = "ffn"
    hidden_dim: int


@dataclass(frozen=True)
class TransformerBlockSpec:
    kind = "transformer_block"
    heads: int
    hidden_dim: int


LayerSpec = (
    Conv2dSpec
    | Conv3dSpec
    | MeanPoolSpec
    | ResidualBlockSpec
    | PatchifySpec
    | MhaSpec
    | FfnSpec
    | TransformerBlockSpec
)

_LAYER_KINDS: dict[str, type] = {
    cls.kind: cls
    for cls in (
        Conv2dSpec,
        Conv3dSpec,
        MeanPoolSpec,
        ResidualBlockSpec,
        PatchifySpec,
        MhaSpec,
        FfnSpec,
        TransformerBlockSpec,
    )
}

_TUPLE_FIELDS = {"kernel", "window", "patch"}


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: TensorShape
    seed: int
    activation: str
    layers: tuple[LayerSpec, ...]


# ---------------------------------------------------------------------------
# parsing and emission
# ---------------------------------------------------------------------------


def _require_int(value, what: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{what} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValidationError(f"{what} must be >= {minimum}, got {value}")
    return value


def _parse_layer(index: int, obj) -> LayerSpec:
    where = f"layer {index}"
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object, got {type(obj).__name__}")
    if "kind" not in obj:
        raise ParseError(f"{where}: missing 'kind'")
    kind = obj["kind"]
    if kind not in _LAYER_KINDS:
        raise ParseError(f"{where}: unknown kind {kind!r} (allowed: {sorted(_LAYER_KINDS)})")
    cls = _LAYER_KINDS[kind]
    spec_fields = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in obj.items():
        if key == "kind":
            continue
        if key not in spec_fields:
            raise ParseError(f"{where}: unknown field {key!r} for kind {kind!r}")
        if key in _TUPLE_FIELDS:
            if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            ):
                raise ParseError(f"{where}: {key} must be a list of integers")
            kwargs[key] = tuple(value)
        elif key == "bias":
            if not isinstance(value, bool):
                raise ParseError(f"{where}: bias must be a boolean")
            kwargs[key] = value
        elif key in ("hidden_dim", "in_channels") and value is None:
            kwargs[key] = None
        else:
            kwargs[key] = _require_int(value, f"{where}: {key}")
    try:
        spec = cls(**kwargs)
    except TypeError as exc:
        raise ParseError(f"{where}: {exc}") from None
    _validate_layer_fields(index, spec)
    return spec


def _validate_layer_fields(index: int, spec: LayerSpec) -> None:
    where = f"layer {index} ({spec.kind})"
    if isinstance(spec, (Conv2dSpec, Conv3dSpec)):
        want = 2 if isinstance(spec, Conv2dSpec) else 3
        if len(spec.kernel) != want:
            raise ValidationError(f"{where}: kernel needs {want} extents, got {spec.kernel}")
        if any(k < 1 for k in spec.kernel):
            raise ValidationError(f"{where}: kernel extents must be >= 1")
        if spec.out_channels < 1:
            raise ValidationError(f"{where}: out_channels must be >= 1")
        if spec.in_channels is not None and spec.in_channels < 1:
            raise ValidationError(f"{where}: in_channels must be >= 1")
        if spec.stride < 1 or spec.padding < 0:
            raise ValidationError(f"{where}: stride must be >= 1 and padding >= 0")
    elif isinstance(spec, MeanPoolSpec):
        if len(spec.window) != 2 or any(k < 1 for k in spec.window):
            raise ValidationError(f"{where}: window needs 2 extents >= 1, got {spec.window}")
        if spec.stride < 1:
            raise ValidationError(f"{where}: stride must be >= 1")
    elif isinstance(spec, PatchifySpec):
        if len(spec.patch) != 2 or any(k < 1 for k in spec.patch):
            raise ValidationError(f"{where}: patch needs 2 extents >= 1, got {spec.patch}")
    elif isinstance(spec, ResidualBlockSpec):
        if spec.hidden_dim is not None and spec.hidden_dim < 1:
            raise ValidationError(f"{where}: hidden_dim must be >= 1")
    elif isinstance(spec, MhaSpec):
        if spec.heads < 1:
            raise ValidationError(f"{where}: heads must be >= 1")
    elif isinstance(spec, FfnSpec):
        if spec.hidden_dim < 1:
            raise ValidationError(f"{where}: hidden_dim must be >= 1")
    elif isinstance(spec, TransformerBlockSpec):
        if spec.heads < 1 or spec.hidden_dim < 1:
            raise ValidationError(f"{where}: heads and hidden_dim must be >= 1")


def parse_spec_text(text: str | bytes) -> NetworkSpec:
    """Parse and validate a network description from JSON text."""
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"top level must be an object, got {type(doc).__name__}")
    allowed = {"input_shape", "seed", "activation", "layers"}
    unknown = set(doc) - allowed
    if unknown:
        raise ParseError(f"unknown top-level fields: {sorted(unknown)}")
    for key in allowed:
        if key not in doc:
            raise ParseError(f"missing top-level field {key!r}")

    raw_shape = doc["input_shape"]
    if not isinstance(raw_shape, list) or not raw_shape:
        raise ParseError("input_shape must be a non-empty list of [axis, extent] pairs")
    dims = []
    for item in raw_shape:
        if (
            not isinstance(item, list)
            or len(item) != 2
            or not isinstance(item[0], str)
            or isinstance(item[1], bool)
            or not isinstance(item[1], int)
        ):
            raise ParseError(f"input_shape entries must be [axis, extent], got {item!r}")
        if item[0] not in AXIS_NAMES:
            raise ParseError(f"unknown axis {item[0]!r} (allowed: {AXIS_NAMES})")
        dims.append((item[0], item[1]))
    try:
        input_shape = TensorShape(dims)
    except (ShapeError, CapacityError) as exc:
        raise ValidationError(f"input_shape: {exc}") from None

    seed = _require_int(doc["seed"], "seed")
    act = doc["activation"]
    if not isinstance(act, str) or act not in ACTIVATIONS:
        raise ParseError(f"activation must be one of {sorted(ACTIVATIONS)}, got {act!r}")

    if not isinstance(doc["layers"], list):
        raise ParseError("layers must be a list")
    layers = tuple(_parse_layer(i, obj) for i, obj in enumerate(doc["layers"]))

    net = NetworkSpec(input_shape=input_shape, seed=seed, activation=act, layers=layers)
    infer_shapes(net)  # raises ValidationError on a broken chain
    return net


def parse_spec(path: str | Path) -> NetworkSpec:
    """Parse and validate a network description file."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {p}: {exc}") from None
    except UnicodeDecodeError as exc:
        raise ParseError(f"{p} is not UTF-8: {exc}") from None
    return parse_spec_text(text)


def emit_spec(net: NetworkSpec) -> str:
    """Canonical JSON text for a network description (round-trips through
    :func:`parse_spec_text`)."""
    layers = []
    for spec in net.layers:
        obj: dict = {"kind": spec.kind}
        for f in fields(spec):
            value = getattr(spec, f.name)
            if isinstance(value, tuple):
                value = list(value)
            obj[f.name] = value
        layers.append(obj)
    doc = {
        "input_shape": [[a, n] for a, n in net.input_shape.dims],
        "seed": net.seed,
        "activation": net.activation,
        "layers": layers,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------


def _infer_one(index: int, spec: LayerSpec, shape: TensorShape) -> TensorShape:
    where = f"layer {index} ({spec.kind})"
    try:
        if isinstance(spec, (Conv2dSpec, Conv3dSpec)):
            want = ("C_I", "H", "W") if isinstance(spec, Conv2dSpec) else ("C_I", "H", "W", "D")
            if shape.axes != want:
                raise ValidationError(
                    f"{where}: needs input axes {want}, previous layer produced {shape}"
                )
            if spec.in_channels is not None and spec.in_channels != shape.extent("C_I"):
                producer = f"layer {index - 1}" if index > 0 else "the network input"
                raise ValidationError(
                    f"{where}: declares in_channels={spec.in_channels} but {producer} "
                    f"produces {shape.extent('C_I')} channels"
                )
            params = ConvParams(
                in_channels=shape.extent("C_I"),
                out_channels=spec.out_channels,
                kernel=spec.kernel,
                stride=spec.stride,
                padding=spec.padding,
            )
            outs = params.out_extents(shape.extents[1:])
            dims = [("C_I", spec.out_channels), ("H", outs[0]), ("W", outs[1])]
            if isinstance(spec, Conv3dSpec):
                dims.append(("D", outs[2]))
            return TensorShape(dims)
        if isinstance(spec, MeanPoolSpec):
            if shape.axes != ("C_I", "H", "W"):
                raise ValidationError(
                    f"{where}: needs input axes (C_I, H, W), previous layer produced {shape}"
                )
            params = PoolParams(window=spec.window, stride=spec.stride)
            h_out, w_out = params.out_extents(shape.extents[1:])
            return TensorShape([("C_I", shape.extent("C_I")), ("H", h_out), ("W", w_out)])
        if isinstance(spec, PatchifySpec):
            if shape.axes not in (("H", "W"), ("H", "W", "C_I")):
                raise ValidationError(
                    f"{where}: needs input axes (H, W[, C_I]), previous layer produced {shape}"
                )
            ph, pw = spec.patch
            h, w = shape.extent("H"), shape.extent("W")
            if h % ph != 0 or w % pw != 0:
                raise ValidationError(f"{where}: patch {spec.patch} does not divide ({h}, {w})")
            c = shape.extent("C_I") if "C_I" in shape.axes else 1
            return TensorShape(
                [("token", (h // ph) * (w // pw)), ("feature", ph * pw * c)]
            )
        if isinstance(spec, ResidualBlockSpec):
            return shape
        if isinstance(spec, (MhaSpec, FfnSpec, TransformerBlockSpec)):
            if shape.axes != ("token", "feature"):
                raise ValidationError(
                    f"{where}: needs input axes (token, feature), previous layer produced {shape}"
                )
            if isinstance(spec, (MhaSpec, TransformerBlockSpec)):
                d = shape.extent("feature")
                if d % spec.heads != 0:
                    raise ValidationError(
                        f"{where}: heads {spec.heads} must divide feature dim {d}"
                    )
            return shape
    except (ShapeError, CapacityError) as exc:
        raise ValidationError(f"{where}: {exc}") from None
    raise ParseError(f"{where}: unknown layer kind")


def infer_shapes(net: NetworkSpec) -> list[TensorShape]:
    """Shapes through the network: element 0 is the input shape, element
    i + 1 the output of layer i.  Raises ValidationError on a broken chain."""
    shapes = [net.input_shape]
    for i, spec in enumerate(net.layers):
        shapes.append(_infer_one(i, spec, shapes[-1]))
    return shapes


# ---------------------------------------------------------------------------
# weight materialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualWeights:
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray


@dataclass
class RtLayer:
    """One materialized layer: the spec plus its drawn weights and shapes."""

    index: int
    spec: LayerSpec
    in_shape: TensorShape
    out_shape: TensorShape
    conv_params: ConvParams | None = None
    conv_weights: Tensor | None = None
    pool_params: PoolParams | None = None
    attn_params: AttnParams | None = None
    residual: ResidualWeights | None = None


@dataclass
class MaterializedNetwork:
    spec: NetworkSpec
    shapes: list[TensorShape]
    layers: list[RtLayer]

    @property
    def activation(self) -> str:
        return self.spec.activation


def _draw(gen: SplitMix64, *shape: int) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    return gen.uniform(n, -1.0, 1.0).reshape(shape)


def _materialize_layer(
    gen: SplitMix64, index: int, spec: LayerSpec, in_shape: TensorShape, out_shape: TensorShape
) -> RtLayer:
    rt = RtLayer(index=index, spec=spec, in_shape=in_shape, out_shape=out_shape)
    if isinstance(spec, (Conv2dSpec, Conv3dSpec)):
        c_in = in_shape.extent("C_I")
        weights = _draw(gen, spec.out_channels, c_in, *spec.kernel)
        bias = _draw(gen, spec.out_channels) if spec.bias else None
        rt.conv_params = ConvParams(
            in_channels=c_in,
            out_channels=spec.out_channels,
            kernel=spec.kernel,
            stride=spec.stride,
            padding=spec.padding,
            bias=bias,
        )
        axes = ["C_O", "C_I", "H", "W"] + (["D"] if isinstance(spec, Conv3dSpec) else [])
        rt.conv_weights = Tensor(
            TensorShape(list(zip(axes, weights.shape))), weights
        )
    elif isinstance(spec, MeanPoolSpec):
        rt.pool_params = PoolParams(window=spec.window, stride=spec.stride)
    elif isinstance(spec, ResidualBlockSpec):
        dim = in_shape.size
        hidden = spec.hidden_dim if spec.hidden_dim is not None else dim
        rt.residual = ResidualWeights(
            w_1=_draw(gen, hidden, dim),
            b_1=_draw(gen, hidden),
            w_2=_draw(gen, dim, hidden),
            b_2=_draw(gen, dim),
        )
    elif isinstance(spec, (MhaSpec, FfnSpec, TransformerBlockSpec)):
        d = in_shape.extent("feature")
        heads = spec.heads if isinstance(spec, (MhaSpec, TransformerBlockSpec)) else 1
        if isinstance(spec, MhaSpec):
            q, k, v, o = (_draw(gen, d, d) for _ in range(4))
            w2 = np.zeros((d, 1))
            w3 = np.zeros((1, d))
            b2 = np.zeros(1)
            b3 = np.zeros(d)
        elif isinstance(spec, FfnSpec):
            q = k = v = o = np.zeros((d, d))
            w2 = _draw(gen, d, spec.hidden_dim)
            w3 = _draw(gen, spec.hidden_dim, d)
            b2 = _draw(gen, spec.hidden_dim)
            b3 = _draw(gen, d)
        else:
            q, k, v, o = (_draw(gen, d, d) for _ in range(4))
            w2 = _draw(gen, d, spec.hidden_dim)
            w3 = _draw(gen, spec.hidden_dim, d)
            b2 = _draw(gen, spec.hidden_dim)
            b3 = _draw(gen, d)
        rt.attn_params = AttnParams(
            model_dim=d, heads=heads, w_q=q, w_k=k, w_v=v, w_o=o,
            w_2=w2, w_3=w3, b_2=b2, b_3=b3,
        )
    return rt


def materialize(net: NetworkSpec) -> MaterializedNetwork:
    """Draw every layer's weights from the description's seed."""
    shapes = infer_shapes(net)
    gen = SplitMix64(net.seed)
    layers = [
        _materialize_layer(gen, i, spec, shapes[i], shapes[i + 1])
        for i, spec in enumerate(net.layers)
    ]
    return MaterializedNetwork(spec=net, shapes=shapes, layers=layers)


def random_input(net: NetworkSpec, seed: int) -> Tensor:
    """Deterministic uniform [-1, 1) input tensor for the network."""
    gen = SplitMix64(seed)
    return Tensor(net.input_shape, gen.uniform(net.input_shape.size, -1.0, 1.0).reshape(
        net.input_shape.extents
    ))


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def _tokens(value: Tensor) -> np.ndarray:
    return value.data.reshape(value.shape.extent("token"), value.shape.extent("feature"))


def apply_layer(rt: RtLayer, value: Tensor, sigma: str) -> Tensor:
    """Run one materialized layer on a stage value."""
    act = activation(sigma)
    spec = rt.spec
    if isinstance(spec, Conv2dSpec):
        out = conv2d_direct(value, rt.conv_params, rt.conv_weights)
        arr = act(out.data)
        return Tensor(rt.out_shape, arr)
    if isinstance(spec, Conv3dSpec):
        out = conv3d_direct(value, rt.conv_params, rt.conv_weights)
        return Tensor(rt.out_shape, act(out.data))
    if isinstance(spec, MeanPoolSpec):
        return Tensor(rt.out_shape, mean_pool_direct(value, rt.pool_params).data)
    if isinstance(spec, PatchifySpec):
        return Tensor(rt.out_shape, patchify(value, spec.patch))
    if isinstance(spec, ResidualBlockSpec):
        v = value.flat
        r = rt.residual
        out = v + r.w_2 @ act(r.w_1 @ v + r.b_1) + r.b_2
        return Tensor(rt.out_shape, out.reshape(rt.out_shape.extents))
    if isinstance(spec, MhaSpec):
        return Tensor(rt.out_shape, mha_direct(_tokens(value), rt.attn_params))
    if isinstance(spec, FfnSpec):
        return Tensor(rt.out_shape, ffn_direct(_tokens(value), rt.attn_params, sigma))
    if isinstance(spec, TransformerBlockSpec):
        return Tensor(
            rt.out_shape, transformer_block_direct(_tokens(value), rt.attn_params, sigma)
        )
    raise SpecError(f"layer {rt.index}: unknown kind {spec.kind!r}")


def forward(net: MaterializedNetwork, x: Tensor, sigma: str | None = None) -> list[Tensor]:
    """Stage values through the network: element 0 is x, element i + 1 the
    output of layer i (activation applied where the layer calls for it)."""
    sigma = net.activation if sigma is None else sigma
    if x.shape != net.spec.input_shape:
        raise ShapeError(f"input shape {x.shape} != declared {net.spec.input_shape}")
    values = [x]
    for rt in net.layers:
        values.append(apply_layer(rt, values[-1], sigma))
    return values


# ---------------------------------------------------------------------------
# per-layer lowering and verification
# ---------------------------------------------------------------------------


@dataclass
class LayerCheck:
    """Result of verifying one layer's matrix-vector realization against its
    direct computation at one input."""

    index: int
    kind: str
    max_abs_diff: float
    forms: list[LoweredForm]
    note: str = ""


def _dense_form(matrix: np.ndarray, bias: np.ndarray | None, x: np.ndarray) -> LoweredForm:
    """A dense matrix as a lowered stage: W' = matrix^T so the diamond
    product reproduces ``matrix @ x``."""
    from .lowering import WeightIndexMap

    m, n = matrix.shape
    i, j = (g.reshape(-1) for g in np.indices((m, n)))
    return LoweredForm(
        weight_matrix=matrix.T.copy(),
        input_vector=np.asarray(x, dtype=np.float64),
        output_len=m,
        input_index_map=np.arange(n).reshape(-1, 1),
        weight_index_map=WeightIndexMap(rows=j, cols=i, sources=np.stack([i, j], axis=1)),
        layout_note="dense stage: W' = matrix^T over the flat input",
        bias=None if bias is None else np.asarray(bias, dtype=np.float64),
    )


def check_layer(rt: RtLayer, value: Tensor, sigma: str) -> LayerCheck:
    """Compare the layer's matrix-vector path against the direct path at
    ``value`` (pre-activation for convolutions)."""
    spec = rt.spec
    if isinstance(spec, Conv2dSpec):
        form = lower_conv2d_I_O(value, rt.conv_params, rt.conv_weights)
        direct = conv2d_direct(value, rt.conv_params, rt.conv_weights)
        diff = np.max(np.abs(form.evaluate() - flatten(direct)))
        return LayerCheck(rt.index, spec.kind, float(diff), [form])
    if isinstance(spec, Conv3dSpec):
        form = lower_conv3d(value, rt.conv_params, rt.conv_weights)
        direct = conv3d_direct(value, rt.conv_params, rt.conv_weights)
        target = flatten(direct, ("C_O", "D", "H", "W"))
        diff = np.max(np.abs(form.evaluate() - target))
        return LayerCheck(rt.index, spec.kind, float(diff), [form])
    if isinstance(spec, MeanPoolSpec):
        form = lower_mean_pool(value, rt.pool_params)
        direct = mean_pool_direct(value, rt.pool_params)
        diff = np.max(np.abs(form.evaluate() - flatten(direct)))
        return LayerCheck(rt.index, spec.kind, float(diff), [form])
    if isinstance(spec, PatchifySpec):
        from .reference import unpatchify

        rows = patchify(value, spec.patch)
        back = unpatchify(rows, value.shape, spec.patch)
        diff = np.max(np.abs(back.data - value.data))
        return LayerCheck(rt.index, spec.kind, float(diff), [], note="reassembly")
    if isinstance(spec, ResidualBlockSpec):
        act = activation(sigma)
        r = rt.residual
        v = value.flat
        direct = v + r.w_2 @ act(r.w_1 @ v + r.b_1) + r.b_2
        stage1 = _dense_form(r.w_1, r.b_1, v)
        stage2 = _dense_form(r.w_2, r.b_2, act(stage1.evaluate()))
        lowered = v + stage2.evaluate()
        diff = np.max(np.abs(direct - lowered))
        return LayerCheck(rt.index, spec.kind, float(diff), [stage1, stage2], note="dense stages")
    if isinstance(spec, MhaSpec):
        tokens = _tokens(value)
        m = extract_mha_effective_matrix(tokens, rt.attn_params)
        direct = mha_direct(tokens, rt.attn_params)
        diff = np.max(np.abs(m @ tokens.reshape(-1) - direct.reshape(-1)))
        return LayerCheck(rt.index, spec.kind, float(diff), [], note="effective matrix")
    if isinstance(spec, FfnSpec):
        tokens = _tokens(value)
        stage1, stage2 = lower_ffn(tokens, rt.attn_params, sigma)
        direct = ffn_direct(tokens, rt.attn_params, sigma)
        diff = np.max(np.abs(stage2.evaluate() - direct.reshape(-1)))
        return LayerCheck(rt.index, spec.kind, float(diff), [stage1, stage2])
    if isinstance(spec, TransformerBlockSpec):
        tokens = _tokens(value)
        m = extract_mha_effective_matrix(tokens, rt.attn_params)
        h_flat = m @ tokens.reshape(-1)
        h = h_flat.reshape(tokens.shape)
        stage1, stage2 = lower_ffn(h, rt.attn_params, sigma)
        lowered = h_flat + stage2.evaluate()
        direct = transformer_block_direct(tokens, rt.attn_params, sigma)
        diff = np.max(np.abs(lowered - direct.reshape(-1)))
        return LayerCheck(rt.index, spec.kind, float(diff), [stage1, stage2], note="mha+ffn")
    raise SpecError(f"layer {rt.index}: unknown kind {spec.kind!r}")


def verify_network(
    net: MaterializedNetwork, trials: int, tol: float, sigma: str | None = None
) -> dict:
    """Run ``trials`` random-input sweeps, checking every layer per trial.

    Returns a summary dict; ``passed`` is False as soon as any layer's
    max-abs diff exceeds ``tol`` in any trial.
    """
    sigma = net.activation if sigma is None else sigma
    per_layer = [0.0] * len(net.layers)
    for t in range(trials):
        x = random_input(net.spec, seed=net.spec.seed + 1 + t)
        values = [x]
        for rt in net.layers:
            check = check_layer(rt, values[-1], sigma)
            per_layer[rt.index] = max(per_layer[rt.index], check.max_abs_diff)
            values.append(apply_layer(rt, values[-1], sigma))
    worst = max(per_layer) if per_layer else 0.0
    return {
        "trials": trials,
        "tolerance": tol,
        "per_layer_max_abs_diff": per_layer,
        "max_abs_diff": worst,
        "passed": bool(worst <= tol),
    }


# ---------------------------------------------------------------------------
# bridge to the symbolic expansion
# ---------------------------------------------------------------------------


@dataclass
class ExpandableNetwork:
    """A network mapped onto one of the expandable chain families, together
    with the numeric binding of its primitive atoms."""

    family: str  # "vgg" | "residual" | "transformer"
    chain: object
    binding: dict[str, np.ndarray]
    preprocessing: str | None = None  # e.g. patchify note for token models


def _conv_chain(net: MaterializedNetwork) -> ExpandableNetwork:
    stages: list[ChainStage] = []
    binding: dict[str, np.ndarray] = {}
    pending: list[tuple] = []  # pool atoms waiting to fold into the next stage
    stage_idx = 0
    pool_idx = 0
    for rt in net.layers:
        value_shape = rt.in_shape
        probe = Tensor(value_shape, np.zeros(value_shape.extents))
        if isinstance(rt.spec, (Conv2dSpec, Conv3dSpec)):
            lower = lower_conv2d_I_O if isinstance(rt.spec, Conv2dSpec) else lower_conv3d
            form = lower(probe, rt.conv_params, rt.conv_weights)
            sub = symbolic._sub(stage_idx)
            w = weight_atom(symbolic._name("W", sub))
            binding[w.name] = form.weight_matrix.T
            weights = [w]
            for p_atom, p_matrix in pending:
                weights.append(p_atom)
                binding[p_atom.name] = p_matrix
            pending = []
            b = None
            if form.bias is not None:
                b = bias_atom(symbolic._name("b", sub))
                binding[b.name] = form.bias
            stages.append(ChainStage(weights=tuple(weights), bias=b))
            stage_idx += 1
        elif isinstance(rt.spec, MeanPoolSpec):
            form = lower_mean_pool(probe, rt.pool_params)
            p_atom = weight_atom(symbolic._name("P", symbolic._sub(pool_idx)))
            pool_idx += 1
            pending.insert(0, (p_atom, form.weight_matrix.T))
        else:
            raise SpecError(
                f"layer {rt.index} ({rt.spec.kind}) breaks the feed-forward chain"
            )
    if pending:
        raise SpecError("chain must end with an activation stage, not pooling")
    if not stages:
        raise SpecError("nothing to expand: no activation stages")
    chain = dense_chain(stages, net.spec.input_shape.size, {})
    return ExpandableNetwork(family="vgg", chain=chain, binding=binding)


def _residual_chain(net: MaterializedNetwork) -> ExpandableNetwork:
    dim = net.spec.input_shape.size
    hiddens = []
    for rt in net.layers:
        hiddens.append(len(rt.residual.b_1))
    if len(set(hiddens)) != 1:
        raise SpecError("residual chains with mixed hidden dims are not expandable")
    chain = build_residual_chain(len(net.layers), dim, hiddens[0])
    binding: dict[str, np.ndarray] = {}
    for k, rt in enumerate(net.layers):
        r = rt.residual
        sub = symbolic._sub(k)
        binding[symbolic._name("W", f"{sub},1")] = r.w_1
        binding[symbolic._name("W", f"{sub},2")] = r.w_2
        binding[symbolic._name("b", f"{sub},1", prime=False)] = r.b_1
        binding[symbolic._name("b", f"{sub},2", prime=False)] = r.b_2
    return ExpandableNetwork(family="residual", chain=chain, binding=binding)


def _transformer_chain(net: MaterializedNetwork) -> ExpandableNetwork:
    layers = list(net.layers)
    preprocessing = None
    if layers and isinstance(layers[0].spec, PatchifySpec):
        preprocessing = (
            f"patchify {layers[0].spec.patch} reshapes the image into the token matrix"
        )
        layers = layers[1:]
    if not layers or not all(isinstance(rt.spec, TransformerBlockSpec) for rt in layers):
        raise SpecError("transformer expansion needs patchify? + transformer_block+ layers")
    shape = layers[0].in_shape
    tokens, d = shape.extent("token"), shape.extent("feature")
    heads = {rt.spec.heads for rt in layers}
    hidden = {rt.spec.hidden_dim for rt in layers}
    if len(heads) != 1 or len(hidden) != 1:
        raise SpecError("transformer chains with mixed heads/hidden dims are not expandable")
    chain = build_transformer_chain(len(layers), tokens, d, heads.pop(), hidden.pop())
    binding: dict[str, np.ndarray] = {}
    eye = np.eye(tokens)
    for k, rt in enumerate(layers):
        p = rt.attn_params
        q_key, k_key, v_key, o_key = chain.proj_keys[k]
        binding[q_key], binding[k_key] = p.w_q, p.w_k
        binding[v_key], binding[o_key] = p.w_v, p.w_o
        w2_key, w3_key, b2_key, b3_key = chain.raw_keys[k]
        binding[w2_key], binding[w3_key] = p.w_2, p.w_3
        binding[b2_key], binding[b3_key] = p.b_2, p.b_3
        w2a, w3a, b2a, b3a = chain.ffn_atoms[k]
        binding[w2a.name] = np.kron(eye, p.w_2.T)
        binding[w3a.name] = np.kron(eye, p.w_3.T)
        binding[b2a.name] = np.tile(p.b_2, tokens)
        binding[b3a.name] = np.tile(p.b_3, tokens)
    return ExpandableNetwork(
        family="transformer", chain=chain, binding=binding, preprocessing=preprocessing
    )


def to_expandable(net: MaterializedNetwork) -> ExpandableNetwork:
    """Map a network onto an expandable chain family, or raise SpecError.

    Families: feed-forward conv/pool stacks (pooling folds into the next
    stage's merged weight), residual-block stacks, and patchify-headed
    transformer-block stacks.
    """
    kinds = {rt.spec.kind for rt in net.layers}
    if not net.layers:
        raise SpecError("empty networks cannot be expanded")
    if kinds <= {"conv2d", "conv3d", "mean_pool"}:
        return _conv_chain(net)
    if kinds == {"residual_block"}:
        return _residual_chain(net)
    if kinds <= {"patchify", "transformer_block"} and "transformer_block" in kinds:
        return _transformer_chain(net)
    raise SpecError(
        f"network with layer kinds {sorted(kinds)} does not match an expandable family"
    )


def _chain_order(shape: TensorShape) -> tuple[str, ...] | None:
    # 3-D stages flatten depth-outermost inside each channel block
    if shape.axes == ("C_I", "H", "W", "D"):
        return ("C_I", "D", "H", "W")
    return None


def expandable_input(net: MaterializedNetwork, x: Tensor) -> np.ndarray:
    """The flat vector the expanded form consumes for input ``x`` (patchify
    preprocessing applied when present)."""
    if net.layers and isinstance(net.layers[0].spec, PatchifySpec):
        return patchify(x, net.layers[0].spec.patch).reshape(-1)
    return flatten(x, _chain_order(x.shape))


def expandable_output(net: MaterializedNetwork, value: Tensor) -> np.ndarray:
    """A network output tensor flattened in the expanded form's order."""
    return flatten(value, _chain_order(value.shape))
