"""Explicit matrix-vector forms for every layer operation.

Each lowering builds a weight matrix W' and input vector x' such that the
diamond product ``W' <> x' = W'^T x'`` reproduces the direct computation of
:mod:`uatcv.reference`, flattened in a documented axis order:

* 2-D conv / pooling: x' is the input in (C_I, H, W) row-major order, the
  output vector is (C_O, H, W) row-major;
* 3-D conv: x' is (C_I, D, H, W) order (depth slices stacked per channel),
  the output is (C_O, D, H, W);
* FFN stages and attention operate on token matrices flattened row-major
  (token, feature).

W' is stored dense.  Structural entries (the cells that carry a kernel
element, whatever its value) are recorded in index maps so weight sharing
stays inspectable: every structural cell traces to exactly one kernel
element, and a kernel element generally occupies many cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .reference import (
    AttnParams,
    ConvParams,
    PoolParams,
    _check_conv_input,
    _check_tokens,
    _check_weights,
    activation,
    attention_probabilities_raw,
)
from .tensor import Tensor, as_matrix, as_vector, flatten, matvec


def diamond(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Diamond product: ``w <> x = w^T x`` (literally evaluated that way)."""
    w = as_matrix(w)
    x = as_vector(x)
    if w.shape[0] != x.shape[0]:
        raise ShapeError(f"diamond mismatch: {w.shape} <> {x.shape}")
    return matvec(w.T, x)


@dataclass(frozen=True)
class WeightIndexMap:
    """Structural cells of W': parallel arrays of (row, col) positions and the
    kernel coordinate each cell carries."""

    rows: np.ndarray
    cols: np.ndarray
    sources: np.ndarray  # (n_entries, kernel_ndim) int coordinates

    def __len__(self) -> int:
        return len(self.rows)

    def sharing_counts(self) -> np.ndarray:
        """How many cells each distinct kernel element occupies."""
        _, counts = np.unique(self.sources, axis=0, return_counts=True)
        return counts


@dataclass(frozen=True)
class LoweredForm:
    """One matrix-vector stage: y' = W' <> x' (+ bias).

    ``input_index_map`` gives, for each x' position, the source coordinate it
    was read from; a source appearing at several positions is a replica.
    ``weight_index_map`` records the structural cells of W'.
    """

    weight_matrix: np.ndarray
    input_vector: np.ndarray
    output_len: int
    input_index_map: np.ndarray  # (len(x'), coord_ndim)
    weight_index_map: WeightIndexMap
    layout_note: str
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = as_matrix(self.weight_matrix)
        x = as_vector(self.input_vector)
        if w.shape != (x.shape[0], self.output_len):
            raise ShapeError(
                f"W' shape {w.shape} must be (len(x'), output_len) = "
                f"({x.shape[0]}, {self.output_len})"
            )
        if self.bias is not None and as_vector(self.bias).shape[0] != self.output_len:
            raise ShapeError("bias length must equal output_len")
        if len(self.input_index_map) != x.shape[0]:
            raise ShapeError("input_index_map must cover every x' position")

    @property
    def nnz(self) -> int:
        """Structural cell count (kernel-element placements)."""
        return len(self.weight_index_map)

    def replicated_sources(self) -> np.ndarray:
        """Source coordinates that feed more than one x' position."""
        uniq, counts = np.unique(self.input_index_map, axis=0, return_counts=True)
        return uniq[counts > 1]

    def evaluate(self) -> np.ndarray:
        out = diamond(self.weight_matrix, self.input_vector)
        if self.bias is not None:
            out = out + self.bias
        return out


def _conv_index_grids(p: ConvParams, spatial: tuple[int, ...]) -> tuple[np.ndarray, ...]:
    """All (channel, output, kernel-offset) combinations plus validity mask."""
    outs = p.out_extents(spatial)
    grid_dims = (p.out_channels, p.in_channels, *outs, *p.kernel)
    idx = [g.reshape(-1) for g in np.indices(grid_dims)]
    nd = p.ndim
    o, c = idx[0], idx[1]
    out_pos = idx[2 : 2 + nd]
    k_off = idx[2 + nd :]
    in_pos = [op * p.stride + ko - p.padding for op, ko in zip(out_pos, k_off)]
    mask = np.ones(len(o), dtype=bool)
    for pos, ext in zip(in_pos, spatial):
        mask &= (pos >= 0) & (pos < ext)
    return o, c, out_pos, k_off, in_pos, mask, outs


def _ravel(coords: list[np.ndarray], extents: tuple[int, ...]) -> np.ndarray:
    flat = np.zeros_like(coords[0])
    for pos, ext in zip(coords, extents):
        flat = flat * ext + pos
    return flat


def _lower_conv(x: Tensor, p: ConvParams, w: Tensor) -> LoweredForm:
    spatial = _check_conv_input(x, p)
    weights = _check_weights(w, p)
    o, c, out_pos, k_off, in_pos, mask, outs = _conv_index_grids(p, spatial)

    if p.ndim == 2:
        h, wd = spatial
        in_extents = (h, wd)
        input_order = None  # storage order (C_I, H, W) already matches
        layout = "x': (C_I,H,W) row-major; y': (C_O,H,W) row-major"
        coord_grid = np.indices((p.in_channels, h, wd)).reshape(3, -1).T
    else:
        h, wd, dep = spatial
        in_extents = (dep, h, wd)  # depth outermost inside each channel block
        in_pos = [in_pos[2], in_pos[0], in_pos[1]]
        out_pos = [out_pos[2], out_pos[0], out_pos[1]]
        outs = (outs[2], outs[0], outs[1])
        input_order = ("C_I", "D", "H", "W")
        layout = "x': (C_I,D,H,W) row-major; y': (C_O,D,H,W) row-major"
        grid = np.indices((p.in_channels, dep, h, wd)).reshape(4, -1).T
        # map positions back to tensor coordinates (C_I, H, W, D)
        coord_grid = grid[:, [0, 2, 3, 1]]

    per_chan_in = int(np.prod(in_extents))
    per_chan_out = int(np.prod(outs))
    rows = c * per_chan_in + _ravel(in_pos, in_extents)
    cols = o * per_chan_out + _ravel(out_pos, outs)
    k_sources = np.stack([o, c, *k_off], axis=1)

    rows, cols, k_sources = rows[mask], cols[mask], k_sources[mask]
    wmat = np.zeros((p.in_channels * per_chan_in, p.out_channels * per_chan_out))
    wmat[rows, cols] = weights[tuple(k_sources.T)]

    bias = None
    if p.bias is not None:
        bias = np.repeat(p.bias, per_chan_out)
    return LoweredForm(
        weight_matrix=wmat,
        input_vector=flatten(x, input_order),
        output_len=p.out_channels * per_chan_out,
        input_index_map=coord_grid,
        weight_index_map=WeightIndexMap(rows=rows, cols=cols, sources=k_sources),
        layout_note=layout,
        bias=bias,
    )


def lower_conv2d_1_O(x: Tensor, p: ConvParams, w: Tensor) -> LoweredForm:
    """Single-input-channel 2-D conv: W' is the horizontal concatenation of one
    block per output channel."""
    if p.in_channels != 1:
        raise ShapeError("lower_conv2d_1_O requires exactly one input channel")
    return _lower_conv(x, p, w)


def lower_conv2d_I_O(x: Tensor, p: ConvParams, w: Tensor) -> LoweredForm:
    """General 2-D conv: W' is an (input-channel x output-channel) block grid;
    stacking the per-channel x' blocks realizes the channel summation."""
    if p.ndim != 2:
        raise ShapeError("lower_conv2d_I_O needs 2-D kernel extents")
    return _lower_conv(x, p, w)


def lower_conv3d(x: Tensor, p: ConvParams, w: Tensor) -> LoweredForm:
    """3-D conv in the same block grid; depth slices are stacked (depth
    outermost) inside every per-channel block of x' and y'."""
    if p.ndim != 3:
        raise ShapeError("lower_conv3d needs 3-D kernel extents")
    return _lower_conv(x, p, w)


def lower_mean_pool(x: Tensor, p: PoolParams) -> LoweredForm:
    """Mean pooling as a matrix: each W' column holds 1/(k_h*k_w) at its
    window's positions, so every column sums to one."""
    if x.shape.axes != ("C_I", "H", "W"):
        raise ShapeError(f"mean pooling expects axes (C_I, H, W), got {x.shape.axes}")
    chans, h, wd = x.shape.extents
    h_out, w_out = p.out_extents((h, wd))
    kh, kw = p.window
    grid = (chans, h_out, w_out, kh, kw)
    c, i, j, a, b = (g.reshape(-1) for g in np.indices(grid))
    y = i * p.stride + a
    xx = j * p.stride + b
    rows = c * (h * wd) + y * wd + xx
    cols = c * (h_out * w_out) + i * w_out + j
    wmat = np.zeros((chans * h * wd, chans * h_out * w_out))
    wmat[rows, cols] = 1.0 / (kh * kw)
    return LoweredForm(
        weight_matrix=wmat,
        input_vector=flatten(x),
        output_len=chans * h_out * w_out,
        input_index_map=np.indices((chans, h, wd)).reshape(3, -1).T,
        weight_index_map=WeightIndexMap(
            rows=rows, cols=cols, sources=np.stack([c, a, b], axis=1)
        ),
        layout_note="x': (C_I,H,W) row-major; y': (C_I,H,W) row-major; block-diagonal per channel",
    )


def _block_repeat(m: np.ndarray, copies: int) -> np.ndarray:
    return np.kron(np.eye(copies), m)


def _ffn_stage(
    weight: np.ndarray,
    bias: np.ndarray,
    input_vector: np.ndarray,
    tokens: int,
    note: str,
) -> LoweredForm:
    rows_in, cols_out = weight.shape
    t, i, j = (g.reshape(-1) for g in np.indices((tokens, rows_in, cols_out)))
    rows = t * rows_in + i
    cols = t * cols_out + j
    return LoweredForm(
        weight_matrix=_block_repeat(weight, tokens),
        input_vector=input_vector,
        output_len=tokens * cols_out,
        input_index_map=np.indices((tokens, rows_in)).reshape(2, -1).T,
        weight_index_map=WeightIndexMap(rows=rows, cols=cols, sources=np.stack([i, j], axis=1)),
        layout_note=note,
        bias=np.tile(bias, tokens),
    )


def lower_ffn(x: np.ndarray, p: AttnParams, sigma: str = "relu") -> tuple[LoweredForm, LoweredForm]:
    """Row-wise FFN as two matrix stages over the flattened token matrix.

    Stage one maps x' to the hidden pre-activation, stage two maps the
    activated hidden vector to the output; evaluating stage two reproduces
    :func:`uatcv.reference.ffn_direct`.
    """
    x = _check_tokens(x, p)
    n = x.shape[0]
    act = activation(sigma)
    stage1 = _ffn_stage(
        p.w_2, p.b_2, x.reshape(-1), n,
        "x': (token,feature) row-major; y': (token,hidden) row-major; W_2 per token",
    )
    hidden = act(stage1.evaluate())
    stage2 = _ffn_stage(
        p.w_3, p.b_3, hidden, n,
        "x': sigma(stage-1 output); y': (token,feature) row-major; W_3 per token",
    )
    return stage1, stage2


def effective_matrix_from_projections(
    x: np.ndarray,
    w_q: np.ndarray,
    w_k: np.ndarray,
    w_v: np.ndarray,
    w_o: np.ndarray,
    heads: int,
) -> np.ndarray:
    """See :func:`extract_mha_effective_matrix`; takes bare projections."""
    x = as_matrix(x)
    n, d = x.shape
    dh = d // heads
    probs = attention_probabilities_raw(x, w_q, w_k, heads)
    m = np.zeros((n * d, n * d))
    for head, a in enumerate(probs):
        s = slice(head * dh, (head + 1) * dh)
        b = w_v[:, s] @ w_o[s, :]
        m += np.kron(a, b.T)
    return m


def extract_mha_effective_matrix(x: np.ndarray, p: AttnParams) -> np.ndarray:
    """The matrix M(X) realizing multi-head attention as a linear map at X.

    With the per-head attention probabilities A_k frozen at X,
    ``MHA(X) = sum_k A_k X (W_V[:,k] W_O[k,:])``, so on the row-major
    flattening of X the map is ``M = sum_k kron(A_k, B_k^T)`` with
    ``B_k = W_V[:, head k] @ W_O[head k, :]``.  M is exact at X and only
    at X: it keeps the probabilities frozen while true attention re-mixes
    them for each new input.
    """
    x = _check_tokens(x, p)
    return effective_matrix_from_projections(x, p.w_q, p.w_k, p.w_v, p.w_o, p.heads)
