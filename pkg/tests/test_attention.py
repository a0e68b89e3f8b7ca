import math

import numpy as np
import pytest

from sgloc.attention import (
    AdapterParams,
    AttentionParams,
    PosEncoding2D,
    adapter_fuse,
    cross_attention,
    sinusoidal_pos_2d,
)
from sgloc.tensor import (
    Param,
    ShapeError,
    Tensor,
    backward,
    finite_difference_check,
    mul,
    sum_all,
)


def make_attention(d, heads, rng, requires_grad=False):
    dk = d // heads
    dv = d // heads
    mk = lambda shape: Tensor(rng.standard_normal(shape) * 0.3, requires_grad=requires_grad)
    return AttentionParams(
        wq=[mk((d, dk)) for _ in range(heads)],
        wk=[mk((d, dk)) for _ in range(heads)],
        wv=[mk((d, dv)) for _ in range(heads)],
        heads=heads,
        width=d,
        key_width=dk,
    )


class TestPosEncoding:
    def test_origin_row(self):
        pe = sinusoidal_pos_2d(4, 4, 8)
        row0 = pe.table[0]
        assert np.allclose(row0[0::2], 0.0)  # sin channels
        assert np.allclose(row0[1::2], 1.0)  # cos channels

    def test_range(self):
        pe = sinusoidal_pos_2d(8, 8, 16)
        assert pe.table.min() >= -1.0 and pe.table.max() <= 1.0

    def test_all_positions_distinct(self):
        pe = sinusoidal_pos_2d(8, 8, 16)
        n = pe.table.shape[0]
        for i in range(n):
            for j in range(i + 1, n):
                assert not np.allclose(pe.table[i], pe.table[j], atol=1e-9)

    def test_width_divisibility(self):
        with pytest.raises(ShapeError):
            sinusoidal_pos_2d(4, 4, 10)

    def test_deterministic(self):
        a = sinusoidal_pos_2d(5, 3, 12).table
        b = sinusoidal_pos_2d(5, 3, 12).table
        assert np.array_equal(a, b)

    def test_row_indexing_is_y_major(self):
        # row s = y*w + x: moving one row down changes only the y half
        pe = sinusoidal_pos_2d(4, 4, 8)
        d = 8
        assert np.allclose(pe.table[0][: d // 2], pe.table[4][: d // 2])
        assert not np.allclose(pe.table[0][d // 2 :], pe.table[4][d // 2 :])


class TestCrossAttention:
    def test_single_key_collapses_softmax(self, rng):
        d, H = 8, 2
        p = make_attention(d, H, rng)
        q = Tensor(rng.standard_normal((5, d)))
        kv = Tensor(rng.standard_normal((1, d)))
        out = cross_attention(q, kv, kv, p).data
        want = np.concatenate([kv.data @ p.wv[h].data for h in range(H)], axis=1)
        for r in range(5):
            assert np.allclose(out[r], want[0], atol=1e-6)

    def test_joint_key_value_permutation_invariance(self, rng):
        d, H, n_k = 8, 2, 6
        p = make_attention(d, H, rng)
        q = Tensor(rng.standard_normal((3, d)))
        kv = rng.standard_normal((n_k, d))
        pos = rng.standard_normal((n_k, d)) * 0.1
        perm = rng.permutation(n_k)
        out1 = cross_attention(Tensor(q.data), Tensor(kv), Tensor(kv), p, k_pos=pos).data
        out2 = cross_attention(
            Tensor(q.data), Tensor(kv[perm]), Tensor(kv[perm]), p, k_pos=pos[perm]
        ).data
        assert np.max(np.abs(out1 - out2)) < 1e-5

    def test_matches_direct_formula(self, f64, rng):
        # single head, d = 4: evaluate the attention equation directly
        d = 4
        wq = rng.standard_normal((d, d))
        wk = rng.standard_normal((d, d))
        wv = rng.standard_normal((d, d))
        p = AttentionParams([Tensor(wq)], [Tensor(wk)], [Tensor(wv)], 1, d, d)
        q = rng.standard_normal((2, d))
        k = rng.standard_normal((2, d))
        got = cross_attention(Tensor(q), Tensor(k), Tensor(k), p).data

        logits = (q @ wq) @ (k @ wk).T / math.sqrt(d)
        att = np.exp(logits - logits.max(axis=1, keepdims=True))
        att /= att.sum(axis=1, keepdims=True)
        want = att @ (k @ wv)
        assert np.max(np.abs(got - want)) < 1e-9

    def test_positions_affect_weights_not_values(self, rng):
        # with zero W_Q (uniform attention), k_pos must not change the output
        d, H = 8, 1
        p = make_attention(d, H, rng)
        p.wq[0] = Tensor(np.zeros((d, d)))
        p.wv[0] = Tensor(rng.standard_normal((d, d)))
        q = Tensor(rng.standard_normal((3, d)))
        kv = Tensor(rng.standard_normal((4, d)))
        pos = rng.standard_normal((4, d))
        out1 = cross_attention(q, kv, kv, p, k_pos=None).data
        out2 = cross_attention(q, kv, kv, p, k_pos=pos).data
        assert np.allclose(out1, out2, atol=1e-6)

    def test_convex_hull_bound(self, rng):
        # each output row is a convex combination of value projections per head
        d, H = 8, 2
        dv = d // H
        p = make_attention(d, H, rng)
        q = Tensor(rng.standard_normal((5, d)))
        kv = Tensor(rng.standard_normal((7, d)))
        out = cross_attention(q, kv, kv, p).data
        for h in range(H):
            v_proj = kv.data @ p.wv[h].data
            lo, hi = v_proj.min(axis=0), v_proj.max(axis=0)
            block = out[:, h * dv : (h + 1) * dv]
            assert (block >= lo - 1e-6).all() and (block <= hi + 1e-6).all()

    def test_gradcheck_projections(self, f64, rng):
        d, H = 8, 2
        p = make_attention(d, H, rng, requires_grad=True)
        params = [Param(f"w{i}", t) for i, t in enumerate(p.tensors())]
        q = Tensor(rng.standard_normal((3, d)))
        kv = Tensor(rng.standard_normal((4, d)))
        pos_q = rng.standard_normal((3, d)) * 0.2
        pos_k = rng.standard_normal((4, d)) * 0.2
        r = Tensor(rng.standard_normal((3, d)))

        def loss():
            out = cross_attention(q, kv, kv, p, q_pos=pos_q, k_pos=pos_k)
            return sum_all(mul(out, r))

        assert finite_difference_check(loss, params, eps=1e-5) < 1e-5

    def test_width_mismatch(self, rng):
        p = make_attention(8, 2, rng)
        with pytest.raises(ShapeError):
            cross_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 8))), Tensor(np.ones((2, 8))), p)


class TestAdapterFuse:
    def test_zero_weights_identity(self, rng):
        d, dh = 6, 12
        p = AdapterParams(Tensor(np.zeros((d, dh))), Tensor(np.zeros((dh, d))))
        res = Tensor(rng.standard_normal((4, d)))
        att = Tensor(rng.standard_normal((4, d)))
        assert np.array_equal(adapter_fuse(att, res, p).data, res.data)

    def test_zero_out_projection_identity_bit_exact(self, rng):
        d, dh = 6, 12
        p = AdapterParams(
            Tensor(rng.standard_normal((d, dh))), Tensor(np.zeros((dh, d)))
        )
        res = Tensor(rng.standard_normal((4, d)))
        att = Tensor(rng.standard_normal((4, d)))
        assert np.array_equal(adapter_fuse(att, res, p).data, res.data)

    def test_zero_attended_gives_residual(self, rng):
        d, dh = 6, 12
        p = AdapterParams(
            Tensor(rng.standard_normal((d, dh))), Tensor(rng.standard_normal((dh, d)))
        )
        res = Tensor(rng.standard_normal((4, d)))
        att = Tensor(np.zeros((4, d)))
        assert np.array_equal(adapter_fuse(att, res, p).data, res.data)

    def test_against_direct_oracle(self, f64, rng):
        d, dh = 8, 16
        w_in = rng.standard_normal((d, dh))
        w_out = rng.standard_normal((dh, d))
        p = AdapterParams(Tensor(w_in), Tensor(w_out))
        att = rng.standard_normal((3, d))
        res = rng.standard_normal((3, d))
        got = adapter_fuse(Tensor(att), Tensor(res), p).data
        want = res + np.maximum(att @ w_in, 0.0) @ w_out
        assert np.max(np.abs(got - want)) < 1e-6

    def test_gradcheck(self, f64, rng):
        d, dh = 6, 10
        w_in = Param("in", Tensor(rng.standard_normal((d, dh))))
        w_out = Param("out", Tensor(rng.standard_normal((dh, d))))
        p = AdapterParams(w_in.value, w_out.value)
        att = Tensor(rng.standard_normal((3, d)))
        res = Tensor(rng.standard_normal((3, d)))
        r = Tensor(rng.standard_normal((3, d)))

        def loss():
            return sum_all(mul(adapter_fuse(att, res, p), r))

        assert finite_difference_check(loss, [w_in, w_out], eps=1e-5) < 1e-5
