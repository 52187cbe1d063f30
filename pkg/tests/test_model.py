import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mimo_seer.model import (
    ConfigError,
    ModelConfig,
    decoder_forward,
    depth_to_space,
    encoder_forward,
    extract_attention,
    ffn3d,
    init_params,
    mha2d,
    model_forward,
    output_head,
    parameter_count,
    parameter_shapes,
    patch_stem,
    space_to_depth,
    sum_heads,
    temporal_encoding,
)
from mimo_seer.numerics import Tensor, grad_check, no_grad, reduce


def np_silu(x):
    return x / (1.0 + np.exp(-x))


def identity_kernel(c, k):
    w = np.zeros((c, c, k, k))
    w[np.arange(c), np.arange(c), k // 2, k // 2] = 1.0
    return w


@pytest.fixture
def toy():
    return ModelConfig()


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(H0=15), dict(C=30, heads=4), dict(m=0), dict(decode_mode="x"),
                                     dict(dk_mode="y"), dict(enc_blocks=-1)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)

    def test_dict_round_trip(self, toy):
        assert ModelConfig.from_dict(toy.to_dict()) == toy

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"channels": 3})

    def test_moving_mnist_defaults(self):
        cfg = ModelConfig.moving_mnist()
        assert (cfg.C, cfg.heads, cfg.enc_blocks, cfg.dec_blocks, cfg.m, cfg.n) == (128, 8, 6, 10, 10, 10)

    def test_per_head_dk_arithmetic(self):
        cfg = ModelConfig.moving_mnist(patch=4, H0=64, W0=64)
        assert cfg.head_dim * cfg.H * cfg.W == 16 * 16 * 16 == 4096


class TestParameters:
    def test_golden_count_toy(self, toy):
        C, HW, p2 = 32, 16, 16
        stem = C * p2 * 9 + C + C * C * 9 + C
        table = 10 * C
        attn = 4 * (C * C + C)
        norm = 2 * C * HW
        ffn = 2 * (C * C * 27 + C + norm) + norm
        enc = attn + norm + ffn
        dec = 2 * (attn + norm) + ffn
        head = p2 * C * 9 + p2
        assert parameter_count(toy) == stem + table + 2 * enc + 2 * dec + head == 284048

    def test_init_matches_shapes(self, toy):
        params = init_params(toy, seed=3)
        shapes = parameter_shapes(toy)
        assert list(params) == list(shapes)
        assert all(params[k].shape == s for k, s in shapes.items())
        assert all(params[k].requires_grad for k in params)

    def test_init_conventions(self, toy):
        params = init_params(toy)
        assert np.all(params["enc.0.attn_norm.gain"].data == 1.0)
        assert np.all(params["enc.0.attn.q.bias"].data == 0.0)
        w = params["stem.1.weight"].data
        limit = math.sqrt(6.0 / (32 * 9 + 32 * 9))
        assert np.abs(w).max() <= limit and np.abs(w).max() > 0.9 * limit

    def test_init_seeded(self, toy):
        a, b = init_params(toy, 5), init_params(toy, 5)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
        c = init_params(toy, 6)
        assert not np.array_equal(a["stem.0.weight"].data, c["stem.0.weight"].data)

    def test_variants_drop_parameters(self, toy):
        assert not any(".attn" in k for k in parameter_shapes(replace(toy, use_2dmha=False)))
        assert not any("self_attn" in k for k in parameter_shapes(replace(toy, use_decoder_self_attn=False)))
        assert parameter_shapes(replace(toy, use_lsb=False))["enc.0.ffn.conv0.weight"] == (32, 32, 1, 1, 1)


class TestStemAndHead:
    def test_stem_shape(self, toy):
        params = init_params(toy)
        out = patch_stem(Tensor(np.zeros((2, 5, 1, 16, 16))), params, toy)
        assert out.shape == (2, 5, 32, 4, 4)

    def test_stem_with_identity_convs(self, rng):
        cfg = ModelConfig(C0=1, patch=1, C=1, heads=1, H0=6, W0=6)
        params = init_params(cfg)
        params["stem.0.weight"].data[...] = identity_kernel(1, 3)
        params["stem.1.weight"].data[...] = identity_kernel(1, 3)
        x = rng.uniform(-2, 2, (1, 3, 1, 6, 6))
        np.testing.assert_allclose(patch_stem(Tensor(x), params, cfg).data, np_silu(np_silu(x)), rtol=1e-14)

    @given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 4]),
           st.integers(1, 3), st.integers(1, 3))
    def test_space_depth_round_trip(self, B, L, c0, p, h, w):
        x = np.random.default_rng(0).standard_normal((B, L, c0, h * p, w * p))
        y = space_to_depth(Tensor(x), p)
        assert y.shape == (B, L, c0 * p * p, h, w)
        assert depth_to_space(y, p).data.tobytes() == x.tobytes()

    def test_space_to_depth_patch_layout(self):
        x = np.arange(16.0).reshape(1, 1, 1, 4, 4)
        y = space_to_depth(Tensor(x), 2).data[0, 0]
        # channel (a, b) holds pixel (2i + a, 2j + b)
        np.testing.assert_array_equal(y[:, 0, 0], [0, 1, 4, 5])
        np.testing.assert_array_equal(y[1], [[1, 3], [9, 11]])

    def test_head_shape_and_range(self, toy, rng):
        params = init_params(toy)
        params["head.bias"].data[...] = 40.0  # push toward saturation
        out = output_head(Tensor(rng.standard_normal((2, 5, 32, 4, 4))), params, toy).data
        assert out.shape == (2, 5, 1, 16, 16)
        assert np.all((out > 0) & (out <= 1))


class TestTemporalEncoding:
    def test_shape_and_broadcast(self, toy):
        params = init_params(toy)
        enc = temporal_encoding(toy, params).data
        assert enc.shape == (10, 32, 4, 4)
        table = params["time_embed.weight"].data
        for t in range(10):
            np.testing.assert_array_equal(enc[t], np.broadcast_to(table[t][:, None, None], (32, 4, 4)))

    def test_rows_distinct(self, toy):
        enc = temporal_encoding(toy, init_params(toy)).data.reshape(10, -1)
        assert len({row.tobytes() for row in enc}) == 10


def mha_oracle(q_in, kv_in, params, prefix, heads, dk_mode="per_head"):
    """Attention written directly with einsum, independent of the library ops."""

    def proj(x, name):
        w = params[f"{prefix}.{name}.weight"].data[:, :, 0, 0]
        return np.einsum("oc,blchw->blohw", w, x) + params[f"{prefix}.{name}.bias"].data[None, None, :, None, None]

    B, Lq, C, H, W = q_in.shape
    Lk = kv_in.shape[1]
    q, k, v = proj(q_in, "q"), proj(kv_in, "k"), proj(kv_in, "v")
    d = C // heads
    dk = d * H * W if dk_mode == "per_head" else C * H * W
    out = np.empty_like(q)
    maps = []
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        qh, kh, vh = q[:, :, sl].reshape(B, Lq, -1), k[:, :, sl].reshape(B, Lk, -1), v[:, :, sl].reshape(B, Lk, -1)
        s = np.einsum("bid,bjd->bij", qh, kh) / math.sqrt(dk)
        a = np.exp(s - s.max(axis=-1, keepdims=True))
        a /= a.sum(axis=-1, keepdims=True)
        maps.append(a)
        out[:, :, sl] = np.einsum("bij,bjd->bid", a, vh).reshape(B, Lq, d, H, W)
    return proj(out, "o"), maps


class TestMha2d:
    @pytest.fixture
    def setup(self, tiny_cfg):
        cfg = replace(tiny_cfg, C=8, heads=2)
        return cfg, init_params(cfg, seed=1)

    @pytest.mark.parametrize("dk_mode", ["per_head", "full"])
    def test_matches_einsum_oracle(self, setup, rng, dk_mode):
        cfg, params = setup
        cfg = replace(cfg, dk_mode=dk_mode)
        for name in ("q", "k", "v", "o"):
            params[f"enc.0.attn.{name}.bias"].data[...] = rng.standard_normal(8) * 0.1
        q_in, kv_in = rng.standard_normal((2, 3, 8, 4, 4)), rng.standard_normal((2, 4, 8, 4, 4))
        records = []
        out = mha2d(Tensor(q_in), Tensor(kv_in), params, "enc.0.attn", cfg, records=records)
        want, maps = mha_oracle(q_in, kv_in, params, "enc.0.attn", 2, dk_mode)
        np.testing.assert_allclose(out.data, want, rtol=1e-10, atol=1e-12)
        got = {(r.sample, r.head): r.map for r in records}
        for h in range(2):
            for b in range(2):
                np.testing.assert_allclose(got[(b, h)], maps[h][b], rtol=1e-10)

    def test_single_key_gives_output_of_values(self, setup, rng):
        cfg, params = setup
        kv = rng.standard_normal((1, 1, 8, 4, 4))
        records = []
        out = mha2d(Tensor(rng.standard_normal((1, 3, 8, 4, 4))), Tensor(kv), params, "enc.0.attn", cfg,
                    records=records)
        assert all(np.all(r.map == 1.0) for r in records)

        def conv1x1(x, name):
            w, b = params[f"enc.0.attn.{name}.weight"].data[:, :, 0, 0], params[f"enc.0.attn.{name}.bias"].data
            return np.einsum("oc,blchw->blohw", w, x) + b[None, None, :, None, None]

        want = conv1x1(conv1x1(kv, "v"), "o")
        np.testing.assert_allclose(out.data, np.broadcast_to(want, (1, 3, 8, 4, 4)), rtol=1e-12, atol=1e-14)

    def test_heads_must_divide(self, setup):
        _, params = setup
        three_heads = ModelConfig(m=2, n=2, H0=8, W0=8, patch=2, C=6, heads=3)
        x = Tensor(np.zeros((1, 2, 8, 4, 4)))
        with pytest.raises(ConfigError):
            mha2d(x, x, params, "enc.0.attn", three_heads)


class TestFfn3d:
    def test_shape(self, toy, rng):
        params = init_params(toy)
        out = ffn3d(Tensor(rng.standard_normal((2, 5, 32, 4, 4))), params, "enc.0.ffn", toy)
        assert out.shape == (2, 5, 32, 4, 4)

    def test_zero_block_reduces_to_layer_norm(self, toy, rng):
        params = init_params(toy)
        for i in (0, 1):
            params[f"enc.0.ffn.conv{i}.weight"].data[...] = 0.0
        x = rng.standard_normal((1, 3, 32, 4, 4))
        got = ffn3d(Tensor(x), params, "enc.0.ffn", toy).data
        mu = x.mean(axis=(2, 3, 4), keepdims=True)
        var = x.var(axis=(2, 3, 4), keepdims=True)
        np.testing.assert_allclose(got, (x - mu) / np.sqrt(var + toy.ln_eps), rtol=1e-10, atol=1e-12)

    def test_temporal_receptive_field(self, rng):
        cfg = ModelConfig(m=7, n=1, H0=8, W0=8, patch=2, C=4, heads=1)
        params = init_params(cfg, seed=2)
        x = rng.standard_normal((1, 7, 4, 4, 4))
        base = ffn3d(Tensor(x), params, "enc.0.ffn", cfg).data
        t = 3

        def delta(frame):
            xp = x.copy()
            xp[0, frame] += 1e-3
            return np.abs(ffn3d(Tensor(xp), params, "enc.0.ffn", cfg).data[0, t] - base[0, t]).max()

        assert delta(t + 1) > 1e-8 and delta(t - 1) > 1e-8
        assert delta(t + 3) == 0.0 and delta(t - 3) == 0.0

    def test_without_lsb_is_per_frame(self, rng):
        cfg = ModelConfig(m=4, n=1, H0=8, W0=8, patch=2, C=4, heads=1, use_lsb=False)
        params = init_params(cfg, seed=2)
        x = rng.standard_normal((1, 4, 4, 4, 4))
        base = ffn3d(Tensor(x), params, "enc.0.ffn", cfg).data
        xp = x.copy()
        xp[0, 2] += 1.0
        out = ffn3d(Tensor(xp), params, "enc.0.ffn", cfg).data
        np.testing.assert_array_equal(np.delete(out, 2, axis=1), np.delete(base, 2, axis=1))


class TestEncoderDecoder:
    def test_zero_blocks_is_identity(self, rng):
        cfg = ModelConfig(m=3, n=2, H0=8, W0=8, patch=2, C=4, heads=2, enc_blocks=0)
        h0 = rng.standard_normal((1, 3, 4, 4, 4))
        assert encoder_forward(Tensor(h0), init_params(cfg), cfg).data.tobytes() == h0.tobytes()

    def test_no_attention_records_without_2dmha(self, tiny_cfg):
        cfg = replace(tiny_cfg, use_2dmha=False)
        res = model_forward(np.zeros((1, 2, 1, 8, 8)), init_params(cfg), cfg, record=True)
        assert res.attention == []

    def test_pure_attention_encoder_is_permutation_equivariant(self, rng):
        cfg = ModelConfig(m=4, n=1, H0=8, W0=8, patch=2, C=4, heads=2, enc_blocks=1, use_lsb=False)
        params = init_params(cfg, seed=4)
        params["enc.0.attn.o.weight"].data[...] = np.eye(4).reshape(4, 4, 1, 1)
        h0 = rng.standard_normal((2, 4, 4, 4, 4))
        perm = np.array([2, 0, 3, 1])
        out = encoder_forward(Tensor(h0), params, cfg).data
        out_p = encoder_forward(Tensor(h0[:, perm]), params, cfg).data
        np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-9, atol=1e-9)

    def test_decoder_single_query_self_map(self, rng):
        cfg = ModelConfig(m=3, n=1, H0=8, W0=8, patch=2, C=4, heads=2)
        params = init_params(cfg)
        records = []
        decoder_forward(Tensor(rng.standard_normal((1, 1, 4, 4, 4))), Tensor(rng.standard_normal((1, 3, 4, 4, 4))),
                        params, cfg, records)
        selfs = [r for r in records if r.kind == "decoder_self"]
        assert selfs and all(r.map.shape == (1, 1) and r.map[0, 0] == 1.0 for r in selfs)

    @pytest.mark.parametrize("m", [1, 3, 6])
    def test_decoder_output_shape_independent_of_m(self, rng, m):
        cfg = ModelConfig(m=m, n=3, H0=8, W0=8, patch=2, C=4, heads=2, dec_blocks=2)
        outs = decoder_forward(Tensor(rng.standard_normal((2, 3, 4, 4, 4))),
                               Tensor(rng.standard_normal((2, m, 4, 4, 4))), init_params(cfg), cfg)
        assert len(outs) == 2 and all(o.shape == (2, 3, 4, 4, 4) for o in outs)

    def test_decoder_without_attention_still_reads_memory(self, tiny_cfg, rng):
        cfg = replace(tiny_cfg, use_2dmha=False)
        params = init_params(cfg, seed=1)
        x = rng.uniform(0, 1, (1, 2, 1, 8, 8))
        a = model_forward(x, params, cfg).prediction.data
        b = model_forward(x * 0.5, params, cfg).prediction.data
        assert np.abs(a - b).max() > 1e-6


def query_probe(cfg, seed, i, j, eps=1e-6):
    """Largest change of output frame i when the timestep query j is perturbed."""
    params = init_params(cfg, seed=seed)
    x = np.random.default_rng(seed).uniform(0, 1, (1, cfg.m, cfg.C0, cfg.H0, cfg.W0))
    with no_grad():
        base = model_forward(x, params, cfg).prediction.data
        params["time_embed.weight"].data[cfg.m + j] += eps
        moved = model_forward(x, params, cfg).prediction.data
    return float(np.abs(moved[0, i] - base[0, i]).max())


class TestFutureDependency:
    @pytest.fixture
    def cfg(self):
        return ModelConfig(m=3, n=5, H0=8, W0=8, patch=2, C=8, heads=2, enc_blocks=1, dec_blocks=1)

    @pytest.mark.parametrize("i,j", [(4, 0), (0, 4), (3, 0)])
    def test_self_attention_couples_distant_queries(self, cfg, i, j):
        assert query_probe(cfg, 0, i, j) > 1e-8

    @pytest.mark.parametrize("i,j", [(4, 0), (0, 4), (3, 0), (4, 1)])
    def test_without_self_attention_distant_queries_are_independent(self, cfg, i, j):
        assert query_probe(replace(cfg, use_decoder_self_attn=False), 0, i, j) == 0.0

    def test_without_self_attention_neighbours_couple_through_3d_conv(self, cfg):
        assert query_probe(replace(cfg, use_decoder_self_attn=False), 0, 1, 0) > 1e-8


class TestModelForward:
    def test_shapes_and_determinism(self, toy, rng):
        params = init_params(toy)
        x = rng.uniform(0, 1, (2, 5, 1, 16, 16))
        a, b = model_forward(x, params, toy), model_forward(x, params, toy)
        assert a.prediction.shape == (2, 5, 1, 16, 16)
        assert len(a.layer_predictions) == toy.dec_blocks
        assert a.prediction.data.tobytes() == b.prediction.data.tobytes()

    def test_miso_mode_emits_one_frame(self, tiny_cfg):
        cfg = replace(tiny_cfg, decode_mode="miso", n=3)
        out = model_forward(np.zeros((1, 2, 1, 8, 8)), init_params(cfg), cfg).prediction
        assert out.shape == (1, 1, 1, 8, 8)

    def test_shorter_input_uses_latest_positions(self, tiny_cfg, rng):
        cfg = replace(tiny_cfg, m=3)
        out = model_forward(rng.uniform(0, 1, (1, 2, 1, 8, 8)), init_params(cfg), cfg).prediction
        assert out.shape == (1, 2, 1, 8, 8)

    def test_bad_frame_shape(self, tiny_cfg):
        with pytest.raises(ConfigError):
            model_forward(np.zeros((1, 2, 1, 6, 8)), init_params(tiny_cfg), tiny_cfg)
        with pytest.raises(ConfigError):
            model_forward(np.zeros((1, 3, 1, 8, 8)), init_params(tiny_cfg), tiny_cfg)

    def test_deep_supervision_off_returns_last_layer(self, tiny_cfg):
        cfg = replace(tiny_cfg, dec_blocks=3, deep_supervision=False)
        res = model_forward(np.zeros((1, 2, 1, 8, 8)), init_params(cfg), cfg)
        assert len(res.layer_predictions) == 1

    def test_debug_sweep_names_layer(self, tiny_cfg):
        params = init_params(tiny_cfg)
        params["enc.0.ffn.conv0.weight"].data[0, 0, 0, 0, 0] = np.nan
        from mimo_seer.numerics import NonFiniteError

        with pytest.raises(NonFiniteError, match="enc.0"):
            model_forward(np.zeros((1, 2, 1, 8, 8)), params, tiny_cfg, debug=True)

    @given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2]), st.sampled_from([(4, 1), (4, 2), (8, 2)]),
           st.integers(0, 1), st.integers(0, 2), st.booleans(), st.booleans(), st.booleans())
    def test_shape_contract(self, m, n, p, ch, eb, db, mha, lsb, dsa):
        C, h = ch
        cfg = ModelConfig(m=m, n=n, C0=1, H0=4, W0=4 * p, patch=p, C=C, heads=h, enc_blocks=eb, dec_blocks=db,
                          use_2dmha=mha, use_lsb=lsb, use_decoder_self_attn=dsa)
        out = model_forward(np.full((2, m, 1, 4, 4 * p), 0.5), init_params(cfg), cfg)
        assert out.prediction.shape == (2, n, 1, 4, 4 * p)

    def test_gradient_wrt_stem_weight(self, tiny_cfg):
        params = init_params(tiny_cfg, seed=0)
        x = np.random.default_rng(0).uniform(0, 1, (1, 2, 1, 8, 8))
        w = params["stem.0.weight"]
        err = grad_check(lambda t: reduce(model_forward(x, dict(params, **{"stem.0.weight": t}), tiny_cfg)
                                          .prediction, "mean"), w, indices=range(0, w.size, 7))
        assert err < 1e-4


class TestAttentionExtraction:
    @pytest.fixture
    def records(self, tiny_cfg, rng):
        cfg = replace(tiny_cfg, m=3, n=2, enc_blocks=2, dec_blocks=2)
        res = model_forward(rng.uniform(0, 1, (2, 3, 1, 8, 8)), init_params(cfg), cfg, record=True)
        return res.attention

    def test_rows_are_probability_vectors(self, records):
        for r in records:
            assert np.all(r.map >= 0)
            np.testing.assert_allclose(r.map.sum(axis=1), 1.0, atol=1e-6)

    def test_shapes_and_counts(self, records):
        enc = extract_attention(records, "encoder_self", sample=0)
        assert len(enc) == 2 * 2 and all(r.map.shape == (3, 3) for r in enc)
        assert all(r.map.shape == (2, 3) for r in extract_attention(records, "decoder_cross"))
        assert all(r.map.shape == (2, 2) for r in extract_attention(records, "decoder_self"))

    def test_sum_heads(self, records):
        layer = extract_attention(records, "decoder_cross", layer=1, sample=0)
        (agg,) = sum_heads(layer)
        assert agg.head == -1 and agg.is_aggregate
        np.testing.assert_array_equal(agg.map, layer[0].map + layer[1].map)

    def test_errors(self, records):
        with pytest.raises(ValueError):
            extract_attention([], "encoder_self")
        with pytest.raises(ValueError):
            extract_attention(records, "encoder_self", layer=9)
        with pytest.raises(ValueError):
            extract_attention(records, "sideways")
