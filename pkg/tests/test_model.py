import numpy as np
import pytest

from tryon_iqa import tensor as T
from tryon_iqa.errors import ConfigError, DimensionError
from tryon_iqa.model import (DIRECTIONS, IcaModel, ModelConfig, block_index, parameter_shapes, preprocess,
                             relational_score, score_head)


def cfg(**kw):
    base = dict(image_height=16, image_width=16, patch_size=8, embed_dim=16, num_heads=2, depth=2, mlp_ratio=2)
    return ModelConfig(**{**base, **kw})


class TestConfig:
    @pytest.mark.parametrize("bad", [
        dict(patch_size=5), dict(num_heads=3), dict(depth=3), dict(depth=0),
        dict(frozen_prefix=5), dict(dtype="float16"), dict(mlp_ratio=0),
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            cfg(**bad)

    def test_round_trip(self):
        c = cfg(frozen_prefix=1, shared_cross_attention=True)
        assert ModelConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            ModelConfig.from_dict({"embed_dims": 8})

    def test_ica_blocks_are_second_half(self):
        c = cfg(depth=6)
        assert [c.is_ica_block(i) for i in range(6)] == [False] * 3 + [True] * 3
        assert not any(cfg(depth=6, use_ica=False).is_ica_block(i) for i in range(6))


class TestParameters:
    def test_four_cross_attention_sets(self):
        names = parameter_shapes(cfg())
        for t, s in DIRECTIONS:
            assert f"blocks.1.cross.{t.lower()}{s.lower()}.q.weight" in names
        assert not any(n.startswith("blocks.0.cross") for n in names)

    def test_shared_cross_attention(self):
        names = parameter_shapes(cfg(shared_cross_attention=True))
        assert "blocks.1.cross.shared.o.weight" in names
        assert not any(".cross.vg." in n for n in names)

    def test_per_branch_weights(self):
        names = parameter_shapes(cfg(share_branch_weights=False))
        for b in "GPV":
            assert f"branch.{b}.blocks.0.attn.q.weight" in names
        assert "head.a" in names

    def test_no_key_bias(self):
        assert not any(n.endswith("k.bias") for n in parameter_shapes(cfg()))

    def test_head_scalars(self):
        shapes = parameter_shapes(cfg())
        assert shapes["head.alpha_raw"] == shapes["head.a"] == shapes["head.b"] == ()

    def test_init_values(self):
        m = IcaModel.init(cfg(), seed=0)
        assert m.alpha() == 0.5
        assert float(m.params["head.a"].data) == 1.0 and float(m.params["head.b"].data) == 0.0
        np.testing.assert_array_equal(m.params["blocks.0.norm1.gain"].data, np.ones(16))
        w = m.params["blocks.0.attn.q.weight"].data
        assert abs(w.std() - m.config.init_std) < 0.03

    def test_init_deterministic(self):
        a, b = IcaModel.init(cfg(), seed=4), IcaModel.init(cfg(), seed=4)
        for n in a.params:
            np.testing.assert_array_equal(a.params[n].data, b.params[n].data)

    def test_block_index(self):
        assert block_index("blocks.3.attn.q.weight") == 3
        assert block_index("branch.G.blocks.1.mlp.fc1.bias") == 1
        assert block_index("head.a") is None

    def test_frozen_prefix(self):
        m = IcaModel.init(cfg(depth=4, frozen_prefix=2), seed=0)
        assert not m.is_trainable("blocks.0.attn.q.weight")
        assert not m.is_trainable("blocks.1.mlp.fc1.bias")
        assert not m.is_trainable("patch.weight") and not m.is_trainable("pos")
        assert m.is_trainable("blocks.2.attn.q.weight")
        assert m.is_trainable("head.a") and m.is_trainable("final_norm.gain")
        assert set(m.trainable_names()) == {n for n in m.params if m.is_trainable(n)}


class TestForward:
    def test_output_shapes_and_range(self, tiny_model, images_for, rng):
        out = tiny_model.forward(*images_for(rng, batch=3))
        assert out.score.shape == (3,) and out.c_v.shape == (3, 16)
        assert np.all(np.abs(out.score.data) < 1)

    def test_single_image_batch(self, tiny_model, rng):
        g, p, v = (rng.uniform(0, 1, (16, 16, 3)) for _ in range(3))
        assert tiny_model.score(g, p, v).shape == (1,)

    def test_wrong_resolution(self, tiny_model, rng):
        x = rng.uniform(0, 1, (1, 8, 8, 3))
        with pytest.raises(DimensionError):
            tiny_model.forward(x, x, x)

    def test_batch_independence(self, tiny_model, images_for, rng):
        g, p, v = images_for(rng, batch=3)
        full = tiny_model.score(g, p, v)
        one = tiny_model.score(g[1:2], p[1:2], v[1:2])
        np.testing.assert_allclose(full[1:2], one, rtol=0, atol=1e-14)

    def test_score_is_untaped(self, tiny_model, images_for, rng):
        with T.Tape() as tape:
            tiny_model.score(*images_for(rng))
        assert tape.nodes == []

    def test_relational_score_mix(self):
        u = T.Tensor(np.array([[1.0, 0.0]]))
        v = T.Tensor(np.array([[0.0, 1.0]]))
        r = relational_score(u, v, u, 0.25, eps=0.0)
        np.testing.assert_allclose(r.data, [0.25])
        np.testing.assert_allclose(score_head(r, 2.0, 0.5).data, np.tanh([1.0]))

    def test_identical_images_without_cross_attention(self, rng):
        m = IcaModel.init(cfg(use_ica=False), seed=2)
        x = rng.uniform(0, 1, (1, 16, 16, 3))
        np.testing.assert_allclose(m.forward(x, x, x).relational.data, 1.0, atol=1e-7)

    def test_identical_images_with_cross_attention_differ(self, tiny_model, rng):
        # the try-on branch receives two cross contributions, the garment branch one
        x = rng.uniform(0, 1, (1, 16, 16, 3))
        out = tiny_model.forward(x, x, x)
        assert not np.array_equal(out.c_g.data, out.c_v.data)

    def test_shared_cross_attention_ties_garment_and_person(self, rng):
        m = IcaModel.init(cfg(shared_cross_attention=True), seed=2)
        x = rng.uniform(0, 1, (1, 16, 16, 3))
        out = m.forward(x, x, x)
        np.testing.assert_array_equal(out.c_g.data, out.c_p.data)

    def test_attention_probe(self, tiny_model, images_for, rng):
        probe = []
        tiny_model.forward(*images_for(rng), probe=probe)
        names = [pre for pre, _ in probe]
        assert any(".cross.vg." in n for n in names)
        for _, w in probe:
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=1e-12)

    def test_cross_attention_rejects_missing_direction(self, tiny_model, images_for, rng):
        xs = tiny_model.encode(*images_for(rng), upto=1)
        with pytest.raises(ValueError):
            tiny_model.cross_attention(xs["G"], xs["P"], 1, ("G", "P"))
        with pytest.raises(ValueError):
            tiny_model.cross_attention(xs["V"], xs["G"], 0, ("V", "G"))

    def test_garment_isolated_from_person(self, tiny_model, images_for, rng):
        g, p, v = images_for(rng)
        a = tiny_model.forward(g, p, v)
        b = tiny_model.forward(g, rng.uniform(0, 1, p.shape), v)
        np.testing.assert_array_equal(a.c_g.data, b.c_g.data)
        assert not np.array_equal(a.c_v.data, b.c_v.data)

    def test_per_branch_weights_forward(self, rng):
        m = IcaModel.init(cfg(share_branch_weights=False), seed=1)
        g, p, v = (rng.uniform(0, 1, (2, 16, 16, 3)) for _ in range(3))
        assert np.all(np.isfinite(m.score(g, p, v)))

    def test_float32(self, rng):
        m = IcaModel.init(cfg(dtype="float32"), seed=1)
        x = rng.uniform(0, 1, (2, 16, 16, 3))
        assert m.forward(x, x, x).score.data.dtype == np.float32


class TestGradientFlow:
    def test_every_trainable_parameter_gets_gradient(self, tiny_model, images_for, rng):
        tiny_model.params["head.alpha_raw"].data[...] = 0.4
        g, p, v = images_for(rng, batch=3)
        with T.Tape() as tape:
            out = tiny_model.forward(g, p, v)
            loss = T.sum_(T.square(T.sub(out.score, T.Tensor(np.array([0.3, -0.2, 0.9])))))
            T.backward(loss, tape)
        silent = [n for n, t in tiny_model.params.items() if not np.any(t.grad)]
        assert silent == []

    def test_frozen_parameters_get_no_gradient(self, images_for, rng):
        m = IcaModel.init(cfg(frozen_prefix=1), seed=0)
        with T.Tape() as tape:
            loss = T.sum_(m.forward(*images_for(rng)).score)
            T.backward(loss, tape)
        assert m.params["blocks.0.attn.q.weight"].grad is None
        assert m.params["blocks.1.attn.q.weight"].grad is not None

    def test_state_round_trip(self, tiny_model, images_for, rng):
        ims = images_for(rng)
        before = tiny_model.score(*ims)
        snap = tiny_model.state()
        for t in tiny_model.params.values():
            t.data = t.data + 0.1
        tiny_model.load_state(snap)
        np.testing.assert_array_equal(tiny_model.score(*ims), before)


class TestPreprocess:
    def test_white_pixel(self):
        np.testing.assert_array_equal(preprocess(np.full((1, 1, 3), 255, np.uint8), 1, 1), np.ones((1, 1, 3)))

    def test_nearest_neighbour_expansion(self):
        board = np.array([[[0] * 3, [255] * 3], [[255] * 3, [0] * 3]], dtype=np.uint8)
        out = preprocess(board, 4, 4)[..., 0]
        expected = np.kron(np.array([[0.0, 1.0], [1.0, 0.0]]), np.ones((2, 2)))
        np.testing.assert_array_equal(out, expected)

    def test_rejects_grayscale(self):
        with pytest.raises(DimensionError):
            preprocess(np.zeros((4, 4)), 2, 2)
