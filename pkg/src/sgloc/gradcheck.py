"""Finite-difference verification of every differentiable op and the full
end-to-end training loss, run at 64-bit precision."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AdapterParams, AttentionParams, adapter_fuse, cross_attention
from .matching import build_cost_matrix, hungarian_assign, total_loss
from .model import ModelConfig, SketchLocalizer
from .tensor import (
    Param,
    Tensor,
    absolute,
    add,
    add_rowvec,
    concat,
    div,
    finite_difference_check,
    gather_rows,
    global_max_pool,
    layer_norm_rows,
    log,
    matmul,
    maximum,
    mean_all,
    minimum,
    mul,
    neg,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_cols,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)

TOLERANCE = 1e-5

TINY_MODEL = ModelConfig(
    d=8, heads=2, stages=2, dec_layers=1, num_tokens=4, d_hidden=16, sketch_layers=1
)


def _weighted(op):
    """Square the op output and sum, so every output coordinate matters."""

    def loss(*tensors):
        out = op(*tensors)
        return sum_all(mul(out, out))

    return loss


_OP_CASES = [
    ("add", [(3, 4), (3, 4)], _weighted(add)),
    ("sub", [(3, 4), (3, 4)], _weighted(sub)),
    ("neg", [(5,)], _weighted(neg)),
    ("mul", [(3, 3), (3, 3)], _weighted(mul)),
    ("div", [(4,), (4,)], lambda a, b: sum_all(div(a, add(mul(b, b), Tensor(np.ones(4)))))),
    ("scale", [(3, 2)], _weighted(lambda a: scale(a, 1.7))),
    ("matmul", [(3, 4), (4, 2)], _weighted(matmul)),
    ("transpose", [(3, 4)], _weighted(transpose)),
    ("reshape", [(3, 4)], _weighted(lambda a: reshape(a, (2, 6)))),
    ("relu", [(4, 4)], _weighted(relu)),
    ("sigmoid", [(4, 4)], _weighted(sigmoid)),
    ("log", [(6,)], lambda a: sum_all(log(add(mul(a, a), Tensor(np.ones(6)))))),
    ("absolute", [(5,)], _weighted(absolute)),
    ("maximum", [(4, 4), (4, 4)], _weighted(maximum)),
    ("minimum", [(4, 4), (4, 4)], _weighted(minimum)),
    ("softmax_rows", [(3, 5)], _weighted(softmax_rows)),
    ("layer_norm_rows", [(3, 6)], _weighted(layer_norm_rows)),
    ("concat", [(2, 3), (4, 3)], _weighted(lambda a, b: concat([a, b], axis=0))),
    ("slice_cols", [(3, 6)], _weighted(lambda a: slice_cols(a, 1, 4))),
    ("gather_rows", [(5, 3)], _weighted(lambda a: gather_rows(a, [0, 2, 2, 4]))),
    ("add_rowvec", [(3, 4), (4,)], _weighted(add_rowvec)),
    ("sum_all", [(3, 4)], lambda a: sum_all(mul(a, a))),
    ("mean_all", [(3, 4)], lambda a: mean_all(mul(a, a))),
    ("global_max_pool", [(6, 4)], _weighted(global_max_pool)),
]


def check_ops(eps: float = 1e-5) -> list:
    """Per-op finite-difference checks; returns [(name, max_rel_err)]."""
    results = []
    rng = np.random.default_rng(7)
    for name, shapes, loss_fn in _OP_CASES:
        params = [Param(f"{name}.p{i}", Tensor(rng.standard_normal(s))) for i, s in enumerate(shapes)]
        err = finite_difference_check(lambda: loss_fn(*[p.value for p in params]), params, eps=eps)
        results.append((name, err))

    d, heads = 8, 2
    dk = d // heads
    mk = lambda s: Tensor(rng.standard_normal(s) * 0.4)
    attn = AttentionParams(
        [mk((d, dk)) for _ in range(heads)],
        [mk((d, dk)) for _ in range(heads)],
        [mk((d, d // heads)) for _ in range(heads)],
        heads, d, dk,
    )
    adapter = AdapterParams(mk((d, 2 * d)), mk((2 * d, d)))
    aparams = [Param(f"attn.{i}", t) for i, t in enumerate(attn.tensors())]
    aparams += [Param("adapter.in", adapter.w_in), Param("adapter.out", adapter.w_out)]
    q = Tensor(rng.standard_normal((3, d)))
    kv = Tensor(rng.standard_normal((5, d)))
    r = Tensor(rng.standard_normal((3, d)))

    def attn_loss():
        out = adapter_fuse(cross_attention(q, kv, kv, attn), q, adapter)
        return sum_all(mul(out, r))

    results.append(("cross_attention+adapter", finite_difference_check(attn_loss, aparams, eps=eps)))
    return results


def check_end_to_end(max_coords: int = 500, seed: int = 0, eps: float = 1e-5) -> float:
    """Finite differences through the whole pipeline (two query sketches, so
    the multi-query fusion paths are exercised) against the training loss with
    a frozen assignment."""
    rng = np.random.default_rng(seed)
    model = SketchLocalizer(TINY_MODEL, seed=seed)
    image = rng.random((64, 64, 3))
    sketches = [rng.random((64, 64)) * 0.5 for _ in range(2)]
    gt = np.array([[0.1, 0.2, 0.45, 0.6], [0.5, 0.5, 0.9, 0.8]])

    scores, boxes = model.forward(image, sketches)
    assign = hungarian_assign(build_cost_matrix(scores.data, boxes.data, gt))

    def loss():
        s, b = model.forward(image, sketches)
        return total_loss(s, b, gt, assign).total_tensor

    return finite_difference_check(loss, model.params, eps=eps, max_coords=max_coords, seed=seed)


def run_all(max_coords: int = 500):
    """Run every check at f64; returns (all_ok, [(name, err, ok)])."""
    prev = T.get_precision()
    T.set_precision("f64")
    try:
        rows = [(name, err, err < TOLERANCE) for name, err in check_ops()]
        err = check_end_to_end(max_coords=max_coords)
        rows.append(("end_to_end_loss", err, err < TOLERANCE))
    finally:
        T.set_precision(prev)
    return all(ok for _, _, ok in rows), rows
