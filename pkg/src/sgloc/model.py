"""The composed localization model: parameter registry plus forward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AdapterParams, AttentionParams
from .data import derive_seed
from .decoder import (
    DecoderLayerParams,
    DecoderParams,
    HeadParams,
    RefineParams,
    decode,
    global_sketch_embed,
    predict_boxes,
    refine_object_tokens,
    refine_query_tokens,
    score_tokens,
)
from .encoder import (
    FusionParams,
    ImageEncoderParams,
    SelfBlockParams,
    SketchEncoderParams,
    SketchFeatureMap,
    encode_sketch,
    sketch_guided_encode,
)
from .multiquery import MultiQueryBundle, fuse_queries
from .tensor import Param, ShapeError, Tensor


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    stages: int = 3
    dec_layers: int = 2
    num_tokens: int = 100
    d_hidden: int = 128
    sketch_layers: int = 2
    image_size: int = 64
    image_patch: int = 4
    sketch_patch: int = 8
    encoder_fusion: bool = True  # sketch-guided encoder (early fusion)
    refinement: bool = True  # object/query refinement at the decoder output

    def validate(self) -> None:
        if self.d % (4 * self.heads):
            raise ShapeError(f"model width {self.d} must be divisible by 4*heads={4 * self.heads}")
        if self.image_size % self.image_patch or self.image_size % self.sketch_patch:
            raise ShapeError("patch sizes must divide the raster size")
        grid = self.image_size // self.image_patch
        if grid >> self.stages < 1:
            raise ShapeError(f"{self.stages} stages exhaust a {grid}x{grid} patch grid")
        if self.stages < 2:
            raise ShapeError("need at least 2 encoder stages")


class SketchLocalizer:
    """Sketch-conditioned detector over 64x64 scenes.

    Parameters are initialized per-name from the model seed, so two models
    built with the same (config, seed) are identical regardless of
    construction order.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.config.validate()
        self.seed = seed
        self.params: list[Param] = []
        self._by_name: dict = {}
        c = self.config

        self.sketch_enc = SketchEncoderParams(
            patch_embed=self._mk("sketch.embed", (c.sketch_patch**2, c.d)),
            blocks=[self._self_block(f"sketch.block{i}") for i in range(c.sketch_layers)],
        )
        fusions = None
        if c.encoder_fusion:
            fusions = [self._fusion(f"fusion{n}") for n in range(c.stages)]
        self.image_enc = ImageEncoderParams(
            patch_embed=self._mk("image.embed", (c.image_patch**2 * 3, c.d)),
            blocks=[self._self_block(f"image.block{n}") for n in range(c.stages)],
            fusions=fusions,
        )
        self.decoder = DecoderParams(
            det_embed=self._mk("decoder.embed", (c.num_tokens, c.d), kind="embed"),
            layers=[
                DecoderLayerParams(
                    self_attn=self._attn(f"decoder.layer{i}.self"),
                    self_adapter=self._adapter(f"decoder.layer{i}.self"),
                    cross_attn=self._attn(f"decoder.layer{i}.cross"),
                    cross_adapter=self._adapter(f"decoder.layer{i}.cross"),
                )
                for i in range(c.dec_layers)
            ],
        )
        self.refine_obj = None
        self.refine_query = None
        if c.refinement:
            self.refine_obj = RefineParams(self._attn("refine_obj"), self._adapter("refine_obj"))
            self.refine_query = RefineParams(self._attn("refine_query"), self._adapter("refine_query"))
        self.query_fusion = FusionParams(self._attn("query_fusion"), self._adapter("query_fusion"))
        self.heads = HeadParams(
            score_w1=self._mk("head.score.w1", (2 * c.d, c.d_hidden)),
            score_b1=self._mk("head.score.b1", (c.d_hidden,), kind="zero"),
            score_w2=self._mk("head.score.w2", (c.d_hidden, 1)),
            score_b2=self._mk("head.score.b2", (1,), kind="score_bias"),
            box_w1=self._mk("head.box.w1", (c.d, c.d)),
            box_b1=self._mk("head.box.b1", (c.d,), kind="zero"),
            box_w2=self._mk("head.box.w2", (c.d, c.d)),
            box_b2=self._mk("head.box.b2", (c.d,), kind="zero"),
            box_w3=self._mk("head.box.w3", (c.d, 4)),
            box_b3=self._mk("head.box.b3", (4,), kind="zero"),
        )

    # -- parameter construction -------------------------------------------

    def _mk(self, name: str, shape, kind: str = "xavier") -> Tensor:
        if name in self._by_name:
            raise ValueError(f"duplicate parameter name {name}")
        rng = np.random.default_rng(derive_seed(self.seed, "param", name))
        if kind == "xavier":
            fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, shape)
        elif kind == "embed":
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), shape)
        elif kind == "zero":
            data = np.zeros(shape)
        elif kind == "score_bias":
            data = np.full(shape, -2.0)  # start scores low: ~4 foreground tokens in 100
        else:
            raise ValueError(kind)
        p = Param(name, Tensor(data, requires_grad=True))
        self.params.append(p)
        self._by_name[name] = p
        return p.value

    def _attn(self, prefix: str) -> AttentionParams:
        c = self.config
        dk = c.d // c.heads
        return AttentionParams(
            wq=[self._mk(f"{prefix}.attn.q{h}", (c.d, dk)) for h in range(c.heads)],
            wk=[self._mk(f"{prefix}.attn.k{h}", (c.d, dk)) for h in range(c.heads)],
            wv=[self._mk(f"{prefix}.attn.v{h}", (c.d, c.d // c.heads)) for h in range(c.heads)],
            heads=c.heads,
            width=c.d,
            key_width=dk,
        )

    def _adapter(self, prefix: str) -> AdapterParams:
        c = self.config
        return AdapterParams(
            w_in=self._mk(f"{prefix}.adapter.in", (c.d, c.d_hidden)),
            w_out=self._mk(f"{prefix}.adapter.out", (c.d_hidden, c.d)),
        )

    def _self_block(self, prefix: str) -> SelfBlockParams:
        return SelfBlockParams(self._attn(prefix), self._adapter(prefix))

    def _fusion(self, prefix: str) -> FusionParams:
        return FusionParams(self._attn(prefix), self._adapter(prefix))

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.params}

    def get_param(self, name: str) -> Param:
        return self._by_name[name]

    # -- forward ------------------------------------------------------------

    def encode_sketches(self, sketches) -> MultiQueryBundle:
        maps = [encode_sketch(s, self.sketch_enc, self.config.sketch_patch) for s in sketches]
        return MultiQueryBundle(maps)

    def forward(self, image: np.ndarray, sketches) -> tuple:
        """Score and box every DET token for one scene and 1..L query sketches.

        Returns (scores (T,), boxes (T,4)) as tape tensors.
        """
        bundle = self.encode_sketches(sketches)
        features = sketch_guided_encode(image, bundle.maps, self.image_enc, self.config.image_patch)
        det = decode(features, self.decoder)
        m0 = bundle.maps[0]
        query = SketchFeatureMap(fuse_queries(bundle, self.query_fusion), m0.w, m0.h)
        if self.config.refinement:
            det_r = refine_object_tokens(det, query, self.refine_obj)
            query_r = refine_query_tokens(query, det, self.refine_query)
        else:
            det_r, query_r = det, query
        sketch_vec = global_sketch_embed(query_r)
        scores = score_tokens(det_r, sketch_vec, self.heads)
        boxes = predict_boxes(det_r, self.heads)
        return scores, boxes

    def localize(self, image: np.ndarray, sketches, threshold: float = 0.5):
        from .decoder import localize as _localize

        return _localize(image, sketches, self, threshold)
