import numpy as np
import pytest

from softsense.container import ContainerError
from softsense.model import (
    ConfigError,
    ModelConfig,
    ModelState,
    ShapeError,
    build_model,
    commit_batchnorm,
    count_params,
    embed_input,
    load_checkpoint,
    model_backward,
    model_forward,
    predict,
    save_checkpoint,
    weight_penalty,
)
from softsense.numeric import make_rng


def tiny_config(**kw):
    base = dict(
        input_features=4, timesteps=2, num_tasks=2, embed_dim=6,
        kernel_sizes=[3, 2, 3], dilations=[1, 2, 1], dropout_rate=0.3,
    )
    base.update(kw)
    return ModelConfig(**base)


def randomized(cfg, seed):
    """Model with non-zero biases and BN shifts so no gradient path is trivially zero."""
    st = build_model(cfg, make_rng([seed, 0]))
    rng = make_rng([seed, 1])
    for name, value in st.params.items():
        if name.endswith((".b", ".b_a", ".b_b", ".beta")):
            st.params[name] = rng.normal(scale=0.3, size=value.shape)
        elif name.endswith(".gamma"):
            st.params[name] = rng.uniform(0.5, 1.5, size=value.shape)
    return st


def closed_form_count(F, D, M, kernels):
    per_block = [2 * (D * D + D) + K * D * D + 2 * D + 2 * (D * D + D) for K in kernels]
    return (F * D + D) + sum(per_block) + len(kernels) * D * M + M


class TestConfig:
    def test_zero_blocks_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_features=2, timesteps=2, num_tasks=1, num_blocks=0, kernel_sizes=[], dilations=[])

    def test_list_length_mismatch(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_features=2, timesteps=2, num_tasks=1, kernel_sizes=[3, 5])

    def test_dict_round_trip(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParamCount:
    def test_reference_size(self):
        cfg = ModelConfig(input_features=20, timesteps=2, num_tasks=11)
        assert count_params(cfg) == closed_form_count(20, 64, 11, [3, 5, 7]) == 115211

    def test_tiny(self):
        assert count_params(tiny_config()) == closed_form_count(4, 6, 2, [3, 2, 3]) == 896

    def test_matches_built_arrays(self):
        st = build_model(tiny_config(), make_rng(0))
        assert count_params(st) == sum(v.size for v in st.trainable().values())


class TestForward:
    def test_shape_and_range(self):
        st = build_model(tiny_config(), make_rng(0))
        Y, _ = model_forward(make_rng(1).random((5, 2, 4)), st)
        assert Y.shape == (5, 2)
        assert np.all((Y > 0) & (Y < 1))

    def test_wrong_input_shape(self):
        st = build_model(tiny_config(), make_rng(0))
        with pytest.raises(ShapeError, match=r"\[B, 2, 4\]"):
            model_forward(np.zeros((3, 2, 5)), st)

    def test_deterministic(self):
        x = make_rng(1).random((4, 2, 4))
        a = model_forward(x, build_model(tiny_config(), make_rng(7)))[0]
        b = model_forward(x, build_model(tiny_config(), make_rng(7)))[0]
        assert a.tobytes() == b.tobytes()

    def test_train_mode_replays_with_same_rng(self):
        st = randomized(tiny_config(), 3)
        x = make_rng(1).random((4, 2, 4))
        a = model_forward(x, st, "train", make_rng(5))[0]
        b = model_forward(x, st, "train", make_rng(5))[0]
        assert a.tobytes() == b.tobytes()

    def test_infer_batch_invariance(self):
        st = randomized(tiny_config(), 2)
        x = make_rng(4).random((6, 2, 4))
        full = model_forward(x, st)[0]
        rows = np.concatenate([model_forward(x[i : i + 1], st)[0] for i in range(6)])
        np.testing.assert_allclose(full, rows, atol=1e-14)

    def test_residual_identity_when_block_is_zero(self):
        cfg = tiny_config()
        st = build_model(cfg, make_rng(0))
        for name in st.params:
            if name.startswith("block") and (".ffn2." in name):
                st.params[name] = np.zeros_like(st.params[name])
        _, trace = model_forward(make_rng(1).random((3, 2, 4)), st)
        X = trace.caches["embed.sigmoid"].saved["y"]
        for out in trace.block_outputs:
            np.testing.assert_array_equal(out, X)

    def test_zero_embedding_gives_half(self):
        st = build_model(tiny_config(), make_rng(0))
        st.params["embed.W"][:] = 0.0
        X, _ = embed_input(make_rng(1).random((2, 2, 4)), st)
        assert np.all(X == 0.5)

    def test_batch_permutation(self):
        st = randomized(tiny_config(), 5)
        x = make_rng(2).random((6, 2, 4))
        perm = make_rng(3).permutation(6)
        np.testing.assert_allclose(model_forward(x[perm], st)[0], model_forward(x, st)[0][perm], atol=1e-15)

    def test_block_order_permutation(self):
        cfg = tiny_config()
        st = randomized(cfg, 7)
        x = make_rng(2).random((4, 2, 4))
        order = [2, 0, 1]
        swapped_cfg = tiny_config(
            kernel_sizes=[cfg.kernel_sizes[i] for i in order], dilations=[cfg.dilations[i] for i in order]
        )
        params = dict(st.params)
        for new, old in enumerate(order):
            for name, value in st.params.items():
                if name.startswith(f"block{old}."):
                    params[f"block{new}." + name.split(".", 1)[1]] = value
        D = cfg.embed_dim
        params["head.W"] = np.concatenate([st.params["head.W"][i * D : (i + 1) * D] for i in order])
        swapped = ModelState(swapped_cfg, params)
        np.testing.assert_allclose(model_forward(x, swapped)[0], model_forward(x, st)[0], atol=1e-14)

    def test_predict_matches_forward(self):
        st = randomized(tiny_config(), 1)
        x = make_rng(8).random((7, 2, 4))
        np.testing.assert_allclose(predict(st, x, batch_size=3), model_forward(x, st)[0], atol=1e-14)


class TestBackward:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        st = randomized(tiny_config(), seed)
        rng = make_rng([seed, 2])
        x = rng.random((3, 2, 4))
        c = rng.normal(size=(3, 2))

        def objective():
            Y, _ = model_forward(x, st, "train", make_rng([seed, 3]))
            return float(np.sum(c * Y)) + weight_penalty(st)

        _, trace = model_forward(x, st, "train", make_rng([seed, 3]))
        grads = model_backward(trace, c, st)
        eps = 1e-5
        for name, g in grads.items():
            flat = st.params[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = objective()
                flat[i] = orig - eps
                fm = objective()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = g.reshape(-1)[i]
                assert abs(ana - num) / (abs(num) + 1e-8) < 1e-4, (name, i, ana, num)

    def test_zero_upstream_leaves_weight_decay(self):
        cfg = tiny_config(weight_decay=0.01)
        st = randomized(cfg, 0)
        _, trace = model_forward(make_rng(1).random((3, 2, 4)), st, "train", make_rng(2))
        grads = model_backward(trace, np.zeros((3, 2)), st)
        for name, g in grads.items():
            if name.endswith((".W", ".W_a", ".W_b", ".kernel")):
                np.testing.assert_allclose(g, 0.01 * st.params[name], atol=1e-15)
            else:
                assert not g.any(), name

    def test_linear_in_upstream(self):
        st = randomized(tiny_config(weight_decay=0.0), 4)
        x = make_rng(1).random((3, 2, 4))
        c1, c2 = make_rng(3).normal(size=(2, 3, 2))

        def grads(c):
            _, tr = model_forward(x, st, "train", make_rng(9))
            return model_backward(tr, c, st)

        g1, g2, g12 = grads(c1), grads(c2), grads(2 * c1 - c2)
        for name in g1:
            np.testing.assert_allclose(g12[name], 2 * g1[name] - g2[name], atol=1e-12)

    def test_trace_single_use(self):
        st = randomized(tiny_config(), 0)
        _, tr = model_forward(make_rng(1).random((3, 2, 4)), st, "train", make_rng(2))
        model_backward(tr, np.ones((3, 2)), st)
        with pytest.raises(RuntimeError):
            model_backward(tr, np.ones((3, 2)), st)

    def test_infer_trace_rejected(self):
        st = randomized(tiny_config(), 0)
        _, tr = model_forward(make_rng(1).random((3, 2, 4)), st)
        with pytest.raises(ValueError):
            model_backward(tr, np.ones((3, 2)), st)

    def test_running_stats_committed_only_on_request(self):
        st = randomized(tiny_config(), 0)
        before = st.params["block0.bn.running_mean"].copy()
        _, tr = model_forward(make_rng(1).random((3, 2, 4)), st, "train", make_rng(2))
        np.testing.assert_array_equal(st.params["block0.bn.running_mean"], before)
        commit_batchnorm(st, tr)
        assert not np.array_equal(st.params["block0.bn.running_mean"], before)


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        st = randomized(tiny_config(), 6)
        save_checkpoint(st, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        x = make_rng(1).random((3, 2, 4))
        assert model_forward(x, loaded)[0].tobytes() == model_forward(x, st)[0].tobytes()

    def test_shape_mismatch_names_parameter(self, tmp_path):
        st = build_model(tiny_config(), make_rng(0))
        st.params["block1.conv.kernel"] = np.zeros((5, 6, 6))
        save_checkpoint(st, tmp_path / "bad.ckpt")
        with pytest.raises(ShapeError, match="block1.conv.kernel"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_expected_config_mismatch(self, tmp_path):
        save_checkpoint(build_model(tiny_config(), make_rng(0)), tmp_path / "a.ckpt")
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "a.ckpt", expected_config=tiny_config(embed_dim=8))

    def test_truncated(self, tmp_path):
        save_checkpoint(build_model(tiny_config(), make_rng(0)), tmp_path / "a.ckpt")
        data = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "a.ckpt").write_bytes(data[:-9])
        with pytest.raises(ContainerError):
            load_checkpoint(tmp_path / "a.ckpt")
