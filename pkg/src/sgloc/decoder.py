"""DET-token decoder, object/query refinement, and the scoring and box heads.

The decoder refines a fixed set of learned object tokens against the
multi-scale encoder memory. After decoding, one cross-attention pass pulls
sketch features into the object tokens and a mirrored pass pulls object
features into the sketch tokens; scores come from a small MLP over each
refined token concatenated with the max-pooled global sketch embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AdapterParams, AttentionParams, adapter_fuse, cross_attention, sinusoidal_pos_2d
from .encoder import SketchFeatureMap
from .tensor import (
    Tensor,
    add_rowvec,
    concat,
    global_max_pool,
    layer_norm_rows,
    matmul,
    relu,
    reshape,
    sigmoid,
)


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    self_adapter: AdapterParams
    cross_attn: AttentionParams
    cross_adapter: AdapterParams


@dataclass
class DecoderParams:
    det_embed: Tensor  # token count x d
    layers: list


@dataclass
class RefineParams:
    attn: AttentionParams
    adapter: AdapterParams


@dataclass
class HeadParams:
    score_w1: Tensor  # 2d x d_h
    score_b1: Tensor
    score_w2: Tensor  # d_h x 1
    score_b2: Tensor
    box_w1: Tensor  # d x d
    box_b1: Tensor
    box_w2: Tensor  # d x d
    box_b2: Tensor
    box_w3: Tensor  # d x 4
    box_b3: Tensor


@dataclass
class LocalizationResult:
    """Scored boxes in normalized center-size form, sorted by descending score."""

    detections: list  # [(np.ndarray(4), float score)]


def decode(features, params: DecoderParams) -> Tensor:
    """Refine the DET tokens against the concatenated multi-scale memory.

    Each layer: self-attention among tokens, cross-attention over all stage
    tokens (each stage keeping its own position encoding), adapter MLPs on the
    residual stream.
    """
    if not params.layers:
        raise ValueError("decoder needs at least one layer")
    memory = layer_norm_rows(concat([s.tokens for s in features], axis=0))
    k_pos = np.concatenate([s.pos for s in features], axis=0)
    x = params.det_embed
    for layer in params.layers:
        xn = layer_norm_rows(x)
        attended = cross_attention(xn, xn, xn, layer.self_attn)
        x = adapter_fuse(attended, x, layer.self_adapter)
        xn = layer_norm_rows(x)
        attended = cross_attention(xn, memory, memory, layer.cross_attn, k_pos=k_pos)
        x = adapter_fuse(attended, x, layer.cross_adapter)
    return x


def refine_object_tokens(det: Tensor, sketch: SketchFeatureMap, params: RefineParams) -> Tensor:
    """Pull sketch features into the object tokens (queries = DET tokens)."""
    pos = sinusoidal_pos_2d(sketch.w, sketch.h, sketch.width)
    attended = cross_attention(det, sketch.tokens, sketch.tokens, params.attn, k_pos=pos)
    return adapter_fuse(attended, det, params.adapter)


def refine_query_tokens(sketch: SketchFeatureMap, det: Tensor, params: RefineParams) -> SketchFeatureMap:
    """Mirror refinement with roles swapped: sketch tokens query the DET tokens."""
    pos = sinusoidal_pos_2d(sketch.w, sketch.h, sketch.width)
    attended = cross_attention(sketch.tokens, det, det, params.attn, q_pos=pos)
    return SketchFeatureMap(adapter_fuse(attended, sketch.tokens, params.adapter), sketch.w, sketch.h)


def global_sketch_embed(sketch: SketchFeatureMap) -> Tensor:
    """Channel-wise max over all spatial positions of the sketch map."""
    return global_max_pool(sketch.tokens)


def score_tokens(det: Tensor, sketch_vec: Tensor, params: HeadParams) -> Tensor:
    """Per-token sigmoid score of [token ; global sketch embedding]."""
    n, d = det.shape
    tiled = matmul(Tensor(np.ones((n, 1), dtype=det.data.dtype)), reshape(sketch_vec, (1, d)))
    z = concat([det, tiled], axis=1)
    h = relu(add_rowvec(matmul(z, params.score_w1), params.score_b1))
    logits = add_rowvec(matmul(h, params.score_w2), params.score_b2)
    return sigmoid(reshape(logits, (n,)))


def predict_boxes(det: Tensor, params: HeadParams) -> Tensor:
    """Three-layer MLP to (cx, cy, w, h), squashed into (0, 1)^4."""
    h = relu(add_rowvec(matmul(det, params.box_w1), params.box_b1))
    h = relu(add_rowvec(matmul(h, params.box_w2), params.box_b2))
    return sigmoid(add_rowvec(matmul(h, params.box_w3), params.box_b3))


def localize(image: np.ndarray, sketches, model, threshold: float = 0.5) -> LocalizationResult:
    """Full forward pass; keeps all detections scoring >= threshold, sorted by
    descending score. No non-maximum suppression."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if isinstance(sketches, np.ndarray) and sketches.ndim == 2:
        sketches = [sketches]
    if not sketches:
        raise ValueError("need at least one query sketch")
    scores, boxes = model.forward(image, list(sketches))
    s = scores.data
    b = boxes.data
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    dets = [(b[i].astype(np.float64).copy(), float(s[i])) for i in order if s[i] >= threshold]
    return LocalizationResult(dets)
