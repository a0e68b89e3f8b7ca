import numpy as np
import pytest

from sgloc.attention import adapter_fuse, cross_attention, sinusoidal_pos_2d
from sgloc.encoder import SketchFeatureMap
from sgloc.multiquery import MultiQueryBundle, encoder_fusion_multi, fuse_queries
from sgloc.tensor import Tensor, backward, sum_all
from test_encoder import TINY, rand_image, rand_sketch, tiny_model


def leaf_map(rng, d=TINY.d, w=2, h=2, requires_grad=False):
    return SketchFeatureMap(Tensor(rng.standard_normal((w * h, d)), requires_grad), w, h)


class TestEncoderFusionMulti:
    def test_single_matches_plain_fusion_bit_exact(self, rng):
        m = tiny_model()
        fp = m.image_enc.fusions[0]
        stage = Tensor(rng.standard_normal((16, TINY.d)))
        sk = Tensor(rng.standard_normal((4, TINY.d)))
        q_pos = sinusoidal_pos_2d(4, 4, TINY.d)
        k_pos = sinusoidal_pos_2d(2, 2, TINY.d)
        got = encoder_fusion_multi(stage, [sk], fp, q_pos=q_pos, k_pos=k_pos).data
        att = cross_attention(stage, sk, sk, fp.attn, q_pos=q_pos, k_pos=k_pos)
        want = adapter_fuse(att, stage, fp.adapter).data
        assert np.array_equal(got, want)

    def test_identical_copies_match_single(self, rng):
        m = tiny_model()
        fp = m.image_enc.fusions[0]
        stage = Tensor(rng.standard_normal((16, TINY.d)))
        sk = Tensor(rng.standard_normal((4, TINY.d)))
        one = encoder_fusion_multi(stage, [sk], fp).data
        five = encoder_fusion_multi(stage, [sk] * 5, fp).data
        assert np.max(np.abs(one - five)) < 1e-6

    def test_order_invariance(self, rng):
        m = tiny_model()
        fp = m.image_enc.fusions[0]
        stage = Tensor(rng.standard_normal((16, TINY.d)))
        sks = [Tensor(rng.standard_normal((4, TINY.d))) for _ in range(4)]
        a = encoder_fusion_multi(stage, sks, fp).data
        b = encoder_fusion_multi(stage, sks[::-1], fp).data
        assert np.max(np.abs(a - b)) < 1e-6

    def test_empty_bundle_rejected(self, rng):
        m = tiny_model()
        with pytest.raises(ValueError):
            encoder_fusion_multi(Tensor(np.ones((4, TINY.d))), [], m.image_enc.fusions[0])

    def test_gradients_reach_every_sketch(self, f64, rng):
        m = tiny_model()
        fp = m.image_enc.fusions[0]
        stage = Tensor(rng.standard_normal((16, TINY.d)))
        sks = [Tensor(rng.standard_normal((4, TINY.d)), requires_grad=True) for _ in range(3)]
        gm = backward(sum_all(encoder_fusion_multi(stage, sks, fp)))
        for sk in sks:
            assert np.max(np.abs(gm.of(sk).data)) > 0


class TestFuseQueries:
    def test_zero_adapter_returns_average_bit_exact(self, rng):
        m = tiny_model()
        m.get_param("query_fusion.adapter.in").value.data[...] = 0.0
        m.get_param("query_fusion.adapter.out").value.data[...] = 0.0
        maps = [leaf_map(rng) for _ in range(3)]
        bundle = MultiQueryBundle(maps)
        got = fuse_queries(bundle, m.query_fusion).data
        assert np.array_equal(got, bundle.average_tokens().data)

    def test_bundle_permutation_invariance(self, rng):
        m = tiny_model()
        maps = [leaf_map(rng) for _ in range(5)]
        a = fuse_queries(MultiQueryBundle(maps), m.query_fusion).data
        perm = [maps[i] for i in rng.permutation(5)]
        b = fuse_queries(MultiQueryBundle(perm), m.query_fusion).data
        assert np.max(np.abs(a - b)) < 1e-6

    def test_identical_sketches_attend_to_own_features(self, rng):
        # softmax over L identical key blocks equals attention over one block
        m = tiny_model()
        sk = leaf_map(rng)
        one = fuse_queries(MultiQueryBundle([sk]), m.query_fusion).data
        many = fuse_queries(MultiQueryBundle([sk] * 4), m.query_fusion).data
        assert np.max(np.abs(one - many)) < 1e-6

    def test_mismatched_grids_rejected(self, rng):
        big = SketchFeatureMap(Tensor(rng.standard_normal((16, TINY.d))), 4, 4)
        with pytest.raises(ValueError):
            MultiQueryBundle([leaf_map(rng), big])

    def test_gradients_reach_every_sketch(self, f64, rng):
        m = tiny_model()
        maps = [leaf_map(rng, requires_grad=True) for _ in range(3)]
        gm = backward(sum_all(fuse_queries(MultiQueryBundle(maps), m.query_fusion)))
        for mp in maps:
            assert np.max(np.abs(gm.of(mp.tokens).data)) > 0


class TestPipelineInvariances:
    def test_single_sketch_equals_one_element_bundle(self, rng):
        m = tiny_model(seed=4)
        img = rand_image(rng)
        sk = rand_sketch(rng)
        s1, b1 = m.forward(img, [sk])
        s2, b2 = m.forward(img, [sk])
        assert np.array_equal(s1.data, s2.data) and np.array_equal(b1.data, b2.data)
        r1 = m.localize(img, sk, threshold=0.0)
        r2 = m.localize(img, [sk], threshold=0.0)
        for (ba, sa), (bb, sb) in zip(r1.detections, r2.detections):
            assert np.array_equal(ba, bb) and sa == sb

    def test_full_pipeline_bundle_permutation(self, rng):
        m = tiny_model(seed=4)
        img = rand_image(rng)
        sks = [rand_sketch(rng) for _ in range(5)]
        s1, b1 = m.forward(img, sks)
        s2, b2 = m.forward(img, sks[::-1])
        assert np.max(np.abs(s1.data - s2.data)) < 1e-6
        assert np.max(np.abs(b1.data - b2.data)) < 1e-6

    def test_full_pipeline_identical_copies_match_single(self, rng):
        m = tiny_model(seed=4)
        img = rand_image(rng)
        sk = rand_sketch(rng)
        s1, b1 = m.forward(img, [sk])
        s5, b5 = m.forward(img, [sk] * 5)
        assert np.max(np.abs(s1.data - s5.data)) < 1e-6
        assert np.max(np.abs(b1.data - b5.data)) < 1e-6
