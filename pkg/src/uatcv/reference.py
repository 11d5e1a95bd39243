"""Direct, definition-level implementations of every layer operation.

These are the ground truth the lowerings are verified against: plain
sliding-window convolution, windowed mean pooling, patch extraction, and
textbook multi-head attention / feed-forward blocks.  No clever data
layouts; outputs are computed position by position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import RangeError, ShapeError
from .tensor import Tensor, TensorShape, as_matrix, as_vector


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def identity(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def logistic(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": relu,
    "identity": identity,
    "logistic": logistic,
}


def activation(name: str) -> Callable[[np.ndarray], np.ndarray]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise RangeError(f"unknown activation {name!r} (have {sorted(ACTIVATIONS)})") from None


@dataclass(frozen=True)
class ConvParams:
    """Convolution geometry: 2-D when ``kernel`` has two extents, 3-D with three.

    ``padding`` is symmetric zero-padding on every spatial axis; ``bias`` is an
    optional per-output-channel vector.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: int = 1
    padding: int = 0
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        if len(self.kernel) not in (2, 3) or any(k < 1 for k in self.kernel):
            raise ShapeError(f"kernel must have 2 or 3 extents >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None:
            b = as_vector(self.bias)
            if b.shape[0] != self.out_channels:
                raise ShapeError(f"bias length {b.shape[0]} != out_channels {self.out_channels}")
            object.__setattr__(self, "bias", b)

    @property
    def ndim(self) -> int:
        return len(self.kernel)

    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def out_extents(self, spatial: tuple[int, ...]) -> tuple[int, ...]:
        if len(spatial) != self.ndim:
            raise ShapeError(f"{self.ndim}-D conv applied to spatial extents {spatial}")
        outs = []
        for ext, k in zip(spatial, self.kernel):
            padded = ext + 2 * self.padding
            if k > padded:
                raise ShapeError(f"kernel extent {k} exceeds padded input extent {padded}")
            outs.append((padded - k) // self.stride + 1)
        return tuple(outs)


@dataclass(frozen=True)
class PoolParams:
    """Mean-pooling window and stride (channels handled independently)."""

    window: tuple[int, int]
    stride: int = 1

    def __post_init__(self):
        if len(self.window) != 2 or any(k < 1 for k in self.window):
            raise ShapeError(f"window must have 2 extents >= 1, got {self.window}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")

    def out_extents(self, spatial: tuple[int, int]) -> tuple[int, int]:
        outs = []
        for ext, k in zip(spatial, self.window):
            if k > ext:
                raise ShapeError(f"window extent {k} exceeds input extent {ext}")
            outs.append((ext - k) // self.stride + 1)
        return tuple(outs)


@dataclass(frozen=True)
class AttnParams:
    """Multi-head attention projections plus the two FFN stages.

    Matrices act on row vectors: for a token matrix X (n x d) the queries are
    ``X @ w_q`` and the FFN hidden layer is ``sigma(X @ w_2 + b_2)``.
    """

    model_dim: int
    heads: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_2: np.ndarray
    w_3: np.ndarray
    b_2: np.ndarray
    b_3: np.ndarray

    def __post_init__(self):
        d = self.model_dim
        if d < 1 or self.heads < 1 or d % self.heads != 0:
            raise ShapeError(f"head count {self.heads} must divide model dim {d}")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            m = as_matrix(getattr(self, name))
            if m.shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {m.shape}")
            object.__setattr__(self, name, m)
        w2 = as_matrix(self.w_2)
        w3 = as_matrix(self.w_3)
        if w2.shape[0] != d:
            raise ShapeError(f"w_2 must have {d} rows, got {w2.shape}")
        if w3.shape != (w2.shape[1], d):
            raise ShapeError(f"w_3 must be {w2.shape[1]}x{d}, got {w3.shape}")
        b2 = as_vector(self.b_2)
        b3 = as_vector(self.b_3)
        if b2.shape[0] != w2.shape[1] or b3.shape[0] != d:
            raise ShapeError("FFN bias lengths do not match their stages")
        object.__setattr__(self, "w_2", w2)
        object.__setattr__(self, "w_3", w3)
        object.__setattr__(self, "b_2", b2)
        object.__setattr__(self, "b_3", b3)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.w_2.shape[1]


def _check_conv_input(x: Tensor, p: ConvParams) -> tuple[int, ...]:
    expect_axes = ("C_I", "H", "W") if p.ndim == 2 else ("C_I", "H", "W", "D")
    if x.shape.axes != expect_axes:
        raise ShapeError(f"conv{p.ndim}d input must have axes {expect_axes}, got {x.shape.axes}")
    if x.shape.extent("C_I") != p.in_channels:
        raise ShapeError(
            f"input has {x.shape.extent('C_I')} channels, params expect {p.in_channels}"
        )
    return x.shape.extents[1:]


def _check_weights(w: Tensor, p: ConvParams) -> np.ndarray:
    if w.data.shape != p.weight_shape():
        raise ShapeError(f"weights must have shape {p.weight_shape()}, got {w.data.shape}")
    return w.data


def conv2d_direct(x: Tensor, p: ConvParams, w: Tensor) -> Tensor:
    """Sliding-window 2-D convolution, summed over input channels.

    y[o,i,j] = sum_{c,a,b} w[o,c,a,b] * x_pad[c, i*s+a, j*s+b] (+ bias[o]).
    """
    if p.ndim != 2:
        raise ShapeError("conv2d_direct needs 2-D kernel extents")
    spatial = _check_conv_input(x, p)
    weights = _check_weights(w, p)
    h_out, w_out = p.out_extents(spatial)
    pad = p.padding
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    out = np.empty((p.out_channels, h_out, w_out))
    kh, kw = p.kernel
    for i in range(h_out):
        for j in range(w_out):
            window = xp[:, i * p.stride : i * p.stride + kh, j * p.stride : j * p.stride + kw]
            # channel sum accumulated left to right: dropping an all-zero
            # channel then reproduces the original values bit for bit
            acc = np.zeros(p.out_channels)
            for c in range(p.in_channels):
                acc = acc + np.einsum("oab,ab->o", weights[:, c], window[c])
            out[:, i, j] = acc
    if p.bias is not None:
        out += p.bias[:, None, None]
    return Tensor(TensorShape([("C_O", p.out_channels), ("H", h_out), ("W", w_out)]), out)


def conv3d_direct(x: Tensor, p: ConvParams, w: Tensor) -> Tensor:
    """3-D analogue of :func:`conv2d_direct`; the kernel slides over H, W, D."""
    if p.ndim != 3:
        raise ShapeError("conv3d_direct needs 3-D kernel extents")
    spatial = _check_conv_input(x, p)
    weights = _check_weights(w, p)
    h_out, w_out, d_out = p.out_extents(spatial)
    pad = p.padding
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    out = np.empty((p.out_channels, h_out, w_out, d_out))
    kh, kw, kd = p.kernel
    s = p.stride
    for i in range(h_out):
        for j in range(w_out):
            for z in range(d_out):
                window = xp[:, i * s : i * s + kh, j * s : j * s + kw, z * s : z * s + kd]
                acc = np.zeros(p.out_channels)
                for c in range(p.in_channels):
                    acc = acc + np.einsum("oabe,abe->o", weights[:, c], window[c])
                out[:, i, j, z] = acc
    if p.bias is not None:
        out += p.bias[:, None, None, None]
    return Tensor(
        TensorShape([("C_O", p.out_channels), ("H", h_out), ("W", w_out), ("D", d_out)]), out
    )


def mean_pool_direct(x: Tensor, p: PoolParams) -> Tensor:
    """Windowed arithmetic mean per channel."""
    if x.shape.axes != ("C_I", "H", "W"):
        raise ShapeError(f"mean pooling expects axes (C_I, H, W), got {x.shape.axes}")
    h_out, w_out = p.out_extents(x.shape.extents[1:])
    kh, kw = p.window
    out = np.empty((x.shape.extent("C_I"), h_out, w_out))
    for i in range(h_out):
        for j in range(w_out):
            window = x.data[:, i * p.stride : i * p.stride + kh, j * p.stride : j * p.stride + kw]
            out[:, i, j] = window.mean(axis=(1, 2))
    return Tensor(TensorShape([("C_I", x.shape.extent("C_I")), ("H", h_out), ("W", w_out)]), out)


def patchify(x: Tensor, patch: tuple[int, int]) -> np.ndarray:
    """Split an image into non-overlapping patches, one flattened patch per row.

    Accepts axes (H, W) or (H, W, C_I); patch extents must divide the image
    extents.  Patches are ordered row-major over the patch grid and each row
    is the row-major flattening of its patch (trailing channels fastest).
    """
    if x.shape.axes not in (("H", "W"), ("H", "W", "C_I")):
        raise ShapeError(f"patchify expects axes (H, W[, C_I]), got {x.shape.axes}")
    p_h, p_w = patch
    if p_h < 1 or p_w < 1:
        raise ShapeError(f"patch extents must be >= 1, got {patch}")
    h, w = x.shape.extent("H"), x.shape.extent("W")
    if h % p_h != 0 or w % p_w != 0:
        raise ShapeError(f"patch {patch} does not divide image extents ({h}, {w})")
    gh, gw = h // p_h, w // p_w
    arr = x.data if x.data.ndim == 3 else x.data[:, :, None]
    c = arr.shape[2]
    rows = arr.reshape(gh, p_h, gw, p_w, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p_h * p_w * c)
    return np.ascontiguousarray(rows)


def unpatchify(rows: np.ndarray, image_shape: TensorShape, patch: tuple[int, int]) -> Tensor:
    """Reassemble :func:`patchify` output into the original image."""
    rows = as_matrix(rows)
    if image_shape.axes not in (("H", "W"), ("H", "W", "C_I")):
        raise ShapeError(f"unpatchify expects axes (H, W[, C_I]), got {image_shape.axes}")
    p_h, p_w = patch
    h, w = image_shape.extent("H"), image_shape.extent("W")
    c = image_shape.extent("C_I") if "C_I" in image_shape.axes else 1
    gh, gw = h // p_h, w // p_w
    if rows.shape != (gh * gw, p_h * p_w * c):
        raise ShapeError(f"patch matrix shape {rows.shape} does not match {image_shape}")
    arr = rows.reshape(gh, gw, p_h, p_w, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)
    if "C_I" not in image_shape.axes:
        arr = arr[:, :, 0]
    return Tensor(image_shape, arr)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction for stability."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_tokens(x: np.ndarray, p: AttnParams) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != p.model_dim:
        raise ShapeError(f"token matrix has feature dim {x.shape[1]}, params expect {p.model_dim}")
    return x


def attention_probabilities_raw(
    x: np.ndarray, w_q: np.ndarray, w_k: np.ndarray, heads: int
) -> list[np.ndarray]:
    """Per-head softmax attention matrices A_k(X), each n x n."""
    x = as_matrix(x)
    d = x.shape[1]
    if d % heads != 0:
        raise ShapeError(f"head count {heads} must divide feature dim {d}")
    q = x @ w_q
    k = x @ w_k
    dh = d // heads
    probs = []
    for head in range(heads):
        s = slice(head * dh, (head + 1) * dh)
        probs.append(softmax_rows(q[:, s] @ k[:, s].T / np.sqrt(dh)))
    return probs


def attention_probabilities(x: np.ndarray, p: AttnParams) -> list[np.ndarray]:
    return attention_probabilities_raw(_check_tokens(x, p), p.w_q, p.w_k, p.heads)


def mha_direct(x: np.ndarray, p: AttnParams) -> np.ndarray:
    """Standard multi-head attention (no masking, no positional encoding)."""
    x = _check_tokens(x, p)
    v = x @ p.w_v
    dh = p.head_dim
    probs = attention_probabilities(x, p)
    heads = [a @ v[:, head * dh : (head + 1) * dh] for head, a in enumerate(probs)]
    return np.concatenate(heads, axis=1) @ p.w_o


def ffn_direct(x: np.ndarray, p: AttnParams, sigma: str = "relu") -> np.ndarray:
    """Two-stage feed-forward block applied row-wise:
    ``sigma(X @ w_2 + b_2) @ w_3 + b_3``."""
    x = _check_tokens(x, p)
    act = activation(sigma)
    return act(x @ p.w_2 + p.b_2) @ p.w_3 + p.b_3


def transformer_block_direct(x: np.ndarray, p: AttnParams, sigma: str = "relu") -> np.ndarray:
    """One block of the analyzed transformer: h = MHA(x); h + FFN(h)."""
    h = mha_direct(x, p)
    return h + ffn_direct(h, p, sigma)


def random_attn_params(
    model_dim: int, heads: int, ffn_dim: int, rng: np.random.Generator
) -> AttnParams:
    """Gaussian attention/FFN parameters, scaled mildly for desk-scale tests."""
    d = model_dim
    scale = 1.0 / np.sqrt(d)
    return AttnParams(
        model_dim=d,
        heads=heads,
        w_q=rng.normal(scale=scale, size=(d, d)),
        w_k=rng.normal(scale=scale, size=(d, d)),
        w_v=rng.normal(scale=scale, size=(d, d)),
        w_o=rng.normal(scale=scale, size=(d, d)),
        w_2=rng.normal(scale=scale, size=(d, ffn_dim)),
        w_3=rng.normal(scale=1.0 / np.sqrt(ffn_dim), size=(ffn_dim, d)),
        b_2=rng.normal(scale=0.5, size=ffn_dim),
        b_3=rng.normal(scale=0.5, size=d),
    )
