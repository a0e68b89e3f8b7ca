import math

import numpy as np
import pytest

from sgloc.decoder import (
    LocalizationResult,
    decode,
    global_sketch_embed,
    localize,
    predict_boxes,
    refine_object_tokens,
    refine_query_tokens,
    score_tokens,
)
from sgloc.encoder import SketchFeatureMap, StageFeatures
from sgloc.attention import sinusoidal_pos_2d
from sgloc.tensor import Param, Tensor, finite_difference_check, mul, sum_all
from test_encoder import TINY, rand_image, rand_sketch, tiny_model


def fake_features(rng, d, counts=((4, 2, 2), (1, 1, 1))):
    out = []
    for n, w, h in [(4, 2, 2), (1, 1, 1)]:
        pos = sinusoidal_pos_2d(w, h, d).table
        out.append(StageFeatures(Tensor(rng.standard_normal((n, d))), pos))
    return out


class TestDecode:
    def test_output_shape(self, rng):
        m = tiny_model()
        out = decode(fake_features(rng, TINY.d), m.decoder)
        assert out.shape == (TINY.num_tokens, TINY.d)

    def test_zero_weights_give_embedding_table(self, rng):
        m = tiny_model()
        for p in m.params:
            if p.name.startswith("decoder.layer"):
                p.value.data[...] = 0.0
        out = decode(fake_features(rng, TINY.d), m.decoder)
        assert np.array_equal(out.data, m.decoder.det_embed.data)

    def test_stage_permutation_invariance(self, rng):
        m = tiny_model()
        feats = fake_features(rng, TINY.d)
        a = decode(feats, m.decoder).data
        b = decode(list(reversed(feats)), m.decoder).data
        assert np.max(np.abs(a - b)) < 1e-5


class TestRefinement:
    def sketch_map(self, rng, n=4, d=TINY.d):
        return SketchFeatureMap(Tensor(rng.standard_normal((n, d))), 2, 2)

    def test_zero_adapter_identity_object(self, rng):
        m = tiny_model()
        m.get_param("refine_obj.adapter.in").value.data[...] = 0.0
        m.get_param("refine_obj.adapter.out").value.data[...] = 0.0
        det = Tensor(rng.standard_normal((TINY.num_tokens, TINY.d)))
        out = refine_object_tokens(det, self.sketch_map(rng), m.refine_obj)
        assert np.array_equal(out.data, det.data)

    def test_zero_adapter_identity_query(self, rng):
        m = tiny_model()
        m.get_param("refine_query.adapter.in").value.data[...] = 0.0
        m.get_param("refine_query.adapter.out").value.data[...] = 0.0
        sk = self.sketch_map(rng)
        det = Tensor(rng.standard_normal((TINY.num_tokens, TINY.d)))
        out = refine_query_tokens(sk, det, m.refine_query)
        assert np.array_equal(out.tokens.data, sk.tokens.data)
        assert (out.w, out.h) == (sk.w, sk.h)

    def test_single_sketch_token_same_attended_value(self, rng):
        # softmax over one key is 1: before the MLP every token sees the same value
        m = tiny_model()
        sk = SketchFeatureMap(Tensor(rng.standard_normal((1, TINY.d))), 1, 1)
        det = Tensor(rng.standard_normal((TINY.num_tokens, TINY.d)))
        from sgloc.attention import cross_attention

        att = cross_attention(det, sk.tokens, sk.tokens, m.refine_obj.attn,
                              k_pos=sinusoidal_pos_2d(1, 1, TINY.d)).data
        assert np.allclose(att, att[0], atol=1e-6)

    def test_matches_direct_formula(self, f64, rng):
        # hand-evaluated refinement: attention then two-matmul adapter + residual
        m = tiny_model(seed=11)
        sk = self.sketch_map(rng)
        det = Tensor(rng.standard_normal((TINY.num_tokens, TINY.d)))
        got = refine_object_tokens(det, sk, m.refine_obj).data

        p = m.refine_obj
        pos = sinusoidal_pos_2d(2, 2, TINY.d).table
        k = sk.tokens.data + pos
        heads = []
        for h in range(p.attn.heads):
            q = det.data @ p.attn.wq[h].data
            kk = k @ p.attn.wk[h].data
            vv = sk.tokens.data @ p.attn.wv[h].data
            logits = q @ kk.T / math.sqrt(p.attn.key_width)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            att = e / e.sum(axis=1, keepdims=True)
            heads.append(att @ vv)
        att_out = np.concatenate(heads, axis=1)
        want = det.data + np.maximum(att_out @ p.adapter.w_in.data, 0) @ p.adapter.w_out.data
        assert np.max(np.abs(got - want)) < 1e-9

    def test_refined_query_differs_from_input(self, rng):
        m = tiny_model()
        sk = self.sketch_map(rng)
        det = Tensor(rng.standard_normal((TINY.num_tokens, TINY.d)))
        out = refine_query_tokens(sk, det, m.refine_query)
        assert np.max(np.abs(out.tokens.data - sk.tokens.data)) > 1e-8


class TestHeads:
    def test_global_embed_is_channel_max(self, rng):
        toks = rng.standard_normal((6, TINY.d))
        sk = SketchFeatureMap(Tensor(toks), 3, 2)
        assert np.allclose(global_sketch_embed(sk).data, toks.max(axis=0))

    def test_zero_final_layer_scores_half(self, rng):
        m = tiny_model()
        m.get_param("head.score.w2").value.data[...] = 0.0
        m.get_param("head.score.b2").value.data[...] = 0.0
        det = Tensor(rng.standard_normal((5, TINY.d)))
        vec = Tensor(rng.standard_normal(TINY.d))
        assert np.array_equal(score_tokens(det, vec, m.heads).data, np.full(5, 0.5))

    def test_scores_strictly_inside_unit_interval(self, rng):
        m = tiny_model()
        det = Tensor(rng.standard_normal((7, TINY.d)) * 10)
        vec = Tensor(rng.standard_normal(TINY.d))
        s = score_tokens(det, vec, m.heads).data
        assert np.all(s > 0) and np.all(s < 1)

    def test_score_matches_direct_evaluation(self, f64, rng):
        m = tiny_model(seed=2)
        det = rng.standard_normal((3, TINY.d))
        vec = rng.standard_normal(TINY.d)
        got = score_tokens(Tensor(det), Tensor(vec), m.heads).data
        z = np.concatenate([det, np.tile(vec, (3, 1))], axis=1)
        h = np.maximum(z @ m.heads.score_w1.data + m.heads.score_b1.data, 0)
        logits = (h @ m.heads.score_w2.data + m.heads.score_b2.data).reshape(-1)
        want = 1 / (1 + np.exp(-logits))
        assert np.max(np.abs(got - want)) < 1e-9

    def test_score_permutation_equivariant(self, rng):
        m = tiny_model()
        det = rng.standard_normal((6, TINY.d))
        vec = Tensor(rng.standard_normal(TINY.d))
        perm = rng.permutation(6)
        s1 = score_tokens(Tensor(det), vec, m.heads).data
        s2 = score_tokens(Tensor(det[perm]), vec, m.heads).data
        assert np.allclose(s1[perm], s2, atol=1e-7)

    def test_boxes_in_unit_interval(self, rng):
        m = tiny_model()
        det = Tensor(rng.standard_normal((5, TINY.d)) * 10)
        b = predict_boxes(det, m.heads).data
        assert np.all(b > 0) and np.all(b < 1)

    def test_zero_final_layer_centers_boxes(self, rng):
        m = tiny_model()
        m.get_param("head.box.w3").value.data[...] = 0.0
        m.get_param("head.box.b3").value.data[...] = 0.0
        det = Tensor(rng.standard_normal((5, TINY.d)))
        assert np.array_equal(predict_boxes(det, m.heads).data, np.full((5, 4), 0.5))

    def test_box_head_gradcheck(self, f64, rng):
        m = tiny_model()
        names = [n for n in m.named_parameters() if n.startswith("head.box")]
        params = [m.get_param(n) for n in names]
        det = Tensor(rng.standard_normal((4, TINY.d)))
        r = Tensor(rng.standard_normal((4, 4)))

        def loss():
            return sum_all(mul(predict_boxes(det, m.heads), r))

        assert finite_difference_check(loss, params, eps=1e-5, max_coords=150) < 1e-5


class TestLocalize:
    def test_threshold_one_empty(self, rng):
        m = tiny_model()
        res = localize(rand_image(rng), [rand_sketch(rng)], m, threshold=1.0)
        assert res.detections == []

    def test_threshold_zero_returns_all_tokens(self, rng):
        m = tiny_model()
        res = localize(rand_image(rng), [rand_sketch(rng)], m, threshold=0.0)
        assert len(res.detections) == TINY.num_tokens
        scores = [s for _, s in res.detections]
        assert scores == sorted(scores, reverse=True)

    def test_invalid_threshold(self, rng):
        m = tiny_model()
        with pytest.raises(ValueError):
            localize(rand_image(rng), [rand_sketch(rng)], m, threshold=1.5)

    def test_single_raster_accepted(self, rng):
        m = tiny_model()
        res = localize(rand_image(rng), rand_sketch(rng), m, threshold=0.0)
        assert len(res.detections) == TINY.num_tokens
