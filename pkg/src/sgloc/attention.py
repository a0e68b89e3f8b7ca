"""Multi-head cross-attention, 2D sinusoidal positions, and the fusion adapter.

These three pieces are the shared machinery behind every feature-fusion step
in the model: encoder-side sketch fusion, decoder token refinement, and
multi-sketch query fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    matmul,
    relu,
    scale,
    softmax_rows,
    transpose,
)


@dataclass
class AttentionParams:
    """Per-head projection matrices.

    Each head h projects queries/keys to width `key_width` = d / heads and
    values to d / heads; head outputs concatenate back to width d, with no
    extra output projection and no bias terms.
    """

    wq: list  # H tensors of shape d x d'
    wk: list  # H tensors of shape d x d'
    wv: list  # H tensors of shape d x (d // H)
    heads: int
    width: int
    key_width: int

    def tensors(self) -> list:
        return list(self.wq) + list(self.wk) + list(self.wv)


@dataclass
class AdapterParams:
    """Two-layer position-wise MLP applied on top of an attention output."""

    w_in: Tensor  # d x d_h
    w_out: Tensor  # d_h x d

    @property
    def hidden(self) -> int:
        return self.w_in.shape[1]


@dataclass
class PosEncoding2D:
    """Precomputed sinusoidal table for a w x h grid, row s = y*w + x."""

    w: int
    h: int
    width: int
    table: np.ndarray = field(repr=False)


_pos_cache: dict = {}


def sinusoidal_pos_2d(w: int, h: int, d: int) -> PosEncoding2D:
    """2D sinusoidal position table of shape (w*h) x d.

    The first d/2 channels encode x with interleaved sin/cos at geometric
    frequencies (base 10000); the last d/2 encode y the same way.
    """
    if d % 4 != 0:
        raise ShapeError(f"position encoding width must be divisible by 4, got {d}")
    key = (w, h, d)
    table = _pos_cache.get(key)
    if table is None:
        quarter = d // 4
        freqs = np.power(10000.0, -np.arange(quarter) / quarter)
        xs = np.arange(w, dtype=np.float64)
        ys = np.arange(h, dtype=np.float64)
        grid_x = np.tile(xs, h)  # s = y*w + x
        grid_y = np.repeat(ys, w)
        table = np.empty((w * h, d), dtype=np.float64)
        for half, coord in ((0, grid_x), (d // 2, grid_y)):
            ang = coord[:, None] * freqs[None, :]
            table[:, half + 0 : half + d // 2 : 2] = np.sin(ang)
            table[:, half + 1 : half + d // 2 : 2] = np.cos(ang)
        _pos_cache[key] = table
    return PosEncoding2D(w, h, d, table)


def _pos_tensor(pos, n: int, d: int, like: Tensor) -> Tensor | None:
    if pos is None:
        return None
    table = pos.table if isinstance(pos, PosEncoding2D) else np.asarray(pos)
    if table.shape != (n, d):
        raise ShapeError(f"position table shape {table.shape} != sequence {(n, d)}")
    return Tensor(table.astype(like.data.dtype))


def cross_attention(
    query_seq: Tensor,
    key_seq: Tensor,
    value_seq: Tensor,
    params: AttentionParams,
    q_pos=None,
    k_pos=None,
) -> Tensor:
    """Multi-head attention from `query_seq` (n_q x d) over `key_seq`/`value_seq`
    (n_k x d). Positions are added to queries and keys only, never values."""
    n_q, d = query_seq.shape
    n_k, d_k = key_seq.shape
    if d != params.width or d_k != params.width or value_seq.shape != (n_k, d):
        raise ShapeError(
            f"attention widths mismatch: q {query_seq.shape}, k {key_seq.shape}, "
            f"v {value_seq.shape}, params width {params.width}"
        )
    qp = _pos_tensor(q_pos, n_q, d, query_seq)
    kp = _pos_tensor(k_pos, n_k, d, key_seq)
    q = add(query_seq, qp) if qp is not None else query_seq
    k = add(key_seq, kp) if kp is not None else key_seq
    inv = 1.0 / math.sqrt(params.key_width)
    heads = []
    for h in range(params.heads):
        qh = matmul(q, params.wq[h])
        kh = matmul(k, params.wk[h])
        vh = matmul(value_seq, params.wv[h])
        att = softmax_rows(scale(matmul(qh, transpose(kh)), inv))
        heads.append(matmul(att, vh))
    return concat(heads, axis=1)


def adapter_fuse(attended: Tensor, residual: Tensor, params: AdapterParams) -> Tensor:
    """residual + W_out(relu(W_in(attended))), position-wise per row."""
    if attended.shape != residual.shape:
        raise ShapeError(f"adapter_fuse: shapes {attended.shape} and {residual.shape} differ")
    return add(residual, matmul(relu(matmul(attended, params.w_in)), params.w_out))
