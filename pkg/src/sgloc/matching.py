"""Hungarian token-to-box assignment and the training losses.

Predicted boxes use normalized center-size form (cx, cy, w, h) in (0,1);
ground-truth boxes are handled in normalized corner form (x0, y0, x1, y1).
The assignment itself runs on detached values; gradients only flow through
the loss terms evaluated at the resulting discrete matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    absolute,
    add,
    div,
    gather_rows,
    log,
    maximum,
    minimum,
    mul,
    neg,
    scale,
    slice_cols,
    sub,
    sum_all,
)

_SCORE_EPS = 1e-7


@dataclass
class LossWeights:
    lam_cls: float = 2.0
    lam_l1: float = 5.0
    lam_giou: float = 2.0


@dataclass
class Assignment:
    """Injective map from ground-truth index to token index, plus the induced
    0/1 token labels."""

    token_for_gt: np.ndarray  # (G,) int
    labels: np.ndarray  # (T,) int8
    total_cost: float


@dataclass
class LossBreakdown:
    score_loss: float
    l1_loss: float
    giou_loss: float
    total: float
    weights: LossWeights
    total_tensor: Tensor = field(repr=False)


# ---------------------------------------------------------------------------
# box helpers


def cxcywh_to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half_w = b[..., 2] / 2.0
    half_h = b[..., 3] / 2.0
    return np.stack(
        [b[..., 0] - half_w, b[..., 1] - half_h, b[..., 0] + half_w, b[..., 1] + half_h],
        axis=-1,
    )


def corners_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack(
        [
            (b[..., 0] + b[..., 2]) / 2.0,
            (b[..., 1] + b[..., 3]) / 2.0,
            b[..., 2] - b[..., 0],
            b[..., 3] - b[..., 1],
        ],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# GIoU


def giou(a, b) -> float:
    """Generalized IoU of two corner-form boxes, in (-1, 1].

    IoU minus the fraction of the enclosing box not covered by the union.
    Degenerate zero-area inputs yield IoU 0.
    """
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = area_a + area_b - inter
    iou = inter / union if union > 0 else 0.0
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    if hull <= 0:
        return iou
    return iou - (hull - union) / hull


def giou_pairwise(boxes: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """GIoU for every (box, gt) pair of corner-form arrays: (T,4) x (G,4) -> (T,G)."""
    b = np.asarray(boxes, dtype=np.float64)[:, None, :]
    g = np.asarray(gts, dtype=np.float64)[None, :, :]
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    area_g = np.clip(g[..., 2] - g[..., 0], 0, None) * np.clip(g[..., 3] - g[..., 1], 0, None)
    iw = np.clip(np.minimum(b[..., 2], g[..., 2]) - np.maximum(b[..., 0], g[..., 0]), 0, None)
    ih = np.clip(np.minimum(b[..., 3], g[..., 3]) - np.maximum(b[..., 1], g[..., 1]), 0, None)
    inter = iw * ih
    union = area_b + area_g - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    hull = (np.maximum(b[..., 2], g[..., 2]) - np.minimum(b[..., 0], g[..., 0])) * (
        np.maximum(b[..., 3], g[..., 3]) - np.minimum(b[..., 1], g[..., 1])
    )
    out = np.where(hull > 0, iou - (hull - union) / np.where(hull > 0, hull, 1.0), iou)
    return out


# ---------------------------------------------------------------------------
# Hungarian assignment
#
# Exact min-cost injective assignment via a DP over (token index, subset of
# ground truths): O(T * 2^G * G). Reconstruction is deterministic; when the
# optimum is not unique the lexicographically smallest assignment vector
# (token index for gt 0, then gt 1, ...) is returned.

_subset_idx_cache: dict = {}


def _subset_indices(G: int):
    got = _subset_idx_cache.get(G)
    if got is None:
        full = 1 << G
        got = []
        for g in range(G):
            with_g = np.array([s for s in range(full) if s & (1 << g)], dtype=np.intp)
            got.append((with_g, with_g ^ (1 << g)))
        _subset_idx_cache[G] = got
    return got


def _dp_forward(cost: np.ndarray) -> np.ndarray:
    T, G = cost.shape
    idx = _subset_indices(G)
    dp = np.full((T + 1, 1 << G), np.inf)
    dp[0, 0] = 0.0
    for t in range(T):
        cur = dp[t]
        nxt = cur.copy()
        row = cost[t]
        for g in range(G):
            with_g, without_g = idx[g]
            nxt[with_g] = np.minimum(nxt[with_g], cur[without_g] + row[g])
        dp[t + 1] = nxt
    return dp


def _opt_with_fixed(cost: np.ndarray, fixed: dict) -> float:
    """Optimal total cost when token t is forced to take gt fixed[t]."""
    T, G = cost.shape
    full = 1 << G
    dp = np.full(full, np.inf)
    dp[0] = 0.0
    idx = _subset_indices(G)
    for t in range(T):
        g = fixed.get(t)
        if g is None:
            nxt = dp.copy()
            row = cost[t]
            for gg in range(G):
                with_g, without_g = idx[gg]
                nxt[with_g] = np.minimum(nxt[with_g], dp[without_g] + row[gg])
            dp = nxt
        else:
            nxt = np.full(full, np.inf)
            with_g, without_g = idx[g]
            nxt[with_g] = dp[without_g] + cost[t, g]
            dp = nxt
    return float(dp[full - 1])


def hungarian_assign(cost) -> Assignment:
    """Minimum-total-cost injective assignment of ground truths to tokens."""
    cost = np.ascontiguousarray(np.asarray(cost, dtype=np.float64))
    if cost.ndim != 2:
        raise ShapeError(f"cost matrix must be rank-2, got shape {cost.shape}")
    T, G = cost.shape
    if T < G:
        raise ShapeError(f"need at least as many tokens as ground truths: {T} < {G}")
    if G == 0:
        return Assignment(np.zeros(0, dtype=np.intp), np.zeros(T, dtype=np.int8), 0.0)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")

    dp = _dp_forward(cost)
    full = (1 << G) - 1

    token_for_gt = np.full(G, -1, dtype=np.intp)
    t, S = T, full
    tie = False
    while S and t > 0:
        val = dp[t, S]
        choices = []
        if dp[t - 1, S] == val:
            choices.append(-1)
        for g in range(G):
            bit = 1 << g
            if S & bit and dp[t - 1, S ^ bit] + cost[t - 1, g] == val:
                choices.append(g)
        if len(choices) != 1:
            tie = True
            break
        g = choices[0]
        if g >= 0:
            token_for_gt[g] = t - 1
            S ^= 1 << g
        t -= 1

    if tie:
        token_for_gt = _lexicographic_optimum(cost, float(dp[T, full]))

    labels = np.zeros(T, dtype=np.int8)
    labels[token_for_gt] = 1
    total = 0.0
    for g in range(G):
        total += float(cost[token_for_gt[g], g])
    return Assignment(token_for_gt, labels, total)


def _lexicographic_optimum(cost: np.ndarray, cstar: float) -> np.ndarray:
    T, G = cost.shape
    fixed: dict = {}
    out = np.full(G, -1, dtype=np.intp)
    for g in range(G):
        for t in range(T):
            if t in fixed:
                continue
            fixed[t] = g
            if _opt_with_fixed(cost, fixed) == cstar:
                out[g] = t
                break
            del fixed[t]
        if out[g] < 0:  # pragma: no cover - dp guarantees feasibility
            raise RuntimeError("assignment reconstruction failed")
    return out


# ---------------------------------------------------------------------------
# losses


def build_cost_matrix(scores, boxes, gt_corners, weights: LossWeights | None = None) -> np.ndarray:
    """Assignment costs: -lam_cls * score + lam_l1 * L1 + lam_giou * (1 - giou).

    `scores` (T,) and `boxes` (T,4 center-size) are detached prediction values;
    `gt_corners` (G,4) are normalized corner boxes. No gradients flow here.
    """
    w = weights or LossWeights()
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    boxes = np.asarray(boxes, dtype=np.float64)
    gt_corners = np.asarray(gt_corners, dtype=np.float64).reshape(-1, 4)
    gt_cs = corners_to_cxcywh(gt_corners)
    l1 = np.abs(boxes[:, None, :] - gt_cs[None, :, :]).sum(axis=2)
    gi = giou_pairwise(cxcywh_to_corners(boxes), gt_corners)
    return -w.lam_cls * scores[:, None] + w.lam_l1 * l1 + w.lam_giou * (1.0 - gi)


def bce_score_loss(scores: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over all tokens; scores clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.ndim != 1 or scores.shape[0] != y.shape[0]:
        raise ShapeError(f"scores shape {scores.shape} vs labels {y.shape}")
    s = minimum(maximum(scores, _SCORE_EPS), 1.0 - _SCORE_EPS)
    y_t = Tensor(y)
    ny_t = Tensor(1.0 - y)
    one = Tensor(np.ones_like(y))
    pos = mul(y_t, log(s))
    negt = mul(ny_t, log(sub(one, s)))
    return scale(neg(sum_all(add(pos, negt))), 1.0 / y.shape[0])


def _col(x: Tensor, j: int) -> Tensor:
    return slice_cols(x, j, j + 1)


def giou_loss_matched(pred_boxes: Tensor, gt_corners: np.ndarray) -> Tensor:
    """Mean (1 - giou) over matched pairs; `pred_boxes` is a (G,4) center-size
    tensor on the tape, `gt_corners` a constant (G,4) array."""
    G = pred_boxes.shape[0]
    cx, cy, w, h = (_col(pred_boxes, j) for j in range(4))
    hw, hh = scale(w, 0.5), scale(h, 0.5)
    x0, x1 = sub(cx, hw), add(cx, hw)
    y0, y1 = sub(cy, hh), add(cy, hh)
    g = np.asarray(gt_corners, dtype=np.float64).reshape(G, 4)
    gx0, gy0, gx1, gy1 = (Tensor(g[:, j : j + 1]) for j in range(4))

    iw = maximum(sub(minimum(x1, gx1), maximum(x0, gx0)), 0.0)
    ih = maximum(sub(minimum(y1, gy1), maximum(y0, gy0)), 0.0)
    inter = mul(iw, ih)
    area_p = mul(w, h)
    area_g = Tensor(((g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])).reshape(G, 1))
    union = sub(add(area_p, area_g), inter)
    iou = div(inter, union)
    hull = mul(sub(maximum(x1, gx1), minimum(x0, gx0)), sub(maximum(y1, gy1), minimum(y0, gy0)))
    gi = sub(iou, div(sub(hull, union), hull))
    ones = Tensor(np.ones((G, 1)))
    return scale(sum_all(sub(ones, gi)), 1.0 / G)


def l1_loss_matched(pred_boxes: Tensor, gt_corners: np.ndarray) -> Tensor:
    """Mean over matched pairs of the L1 distance in center-size form."""
    G = pred_boxes.shape[0]
    gt_cs = corners_to_cxcywh(np.asarray(gt_corners).reshape(G, 4))
    return scale(sum_all(absolute(sub(pred_boxes, Tensor(gt_cs)))), 1.0 / G)


def total_loss(
    scores: Tensor,
    boxes: Tensor,
    gt_corners,
    assignment: Assignment,
    weights: LossWeights | None = None,
) -> LossBreakdown:
    """Weighted sum: score BCE over all tokens, L1 + GIoU over matched pairs."""
    w = weights or LossWeights()
    gt_corners = np.asarray(gt_corners, dtype=np.float64).reshape(-1, 4)
    G = gt_corners.shape[0]
    if assignment.token_for_gt.shape[0] != G:
        raise ShapeError(f"assignment covers {assignment.token_for_gt.shape[0]} gts, given {G}")
    score_t = bce_score_loss(scores, assignment.labels)
    if G > 0:
        matched = gather_rows(boxes, assignment.token_for_gt)
        l1_t = l1_loss_matched(matched, gt_corners)
        giou_t = giou_loss_matched(matched, gt_corners)
        total_t = add_weighted(score_t, l1_t, giou_t, w)
        return LossBreakdown(
            score_t.item(), l1_t.item(), giou_t.item(),
            total_t.item(), w, total_t,
        )
    total_t = scale(score_t, w.lam_cls)
    return LossBreakdown(score_t.item(), 0.0, 0.0, total_t.item(), w, total_t)


def add_weighted(score_t: Tensor, l1_t: Tensor, giou_t: Tensor, w: LossWeights) -> Tensor:
    return add(add(scale(score_t, w.lam_cls), scale(l1_t, w.lam_l1)), scale(giou_t, w.lam_giou))
