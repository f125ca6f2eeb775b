import numpy as np
import pytest

from helpers import central_difference, max_rel_err
from sliceforge import model as M
from sliceforge import training as T
from sliceforge.errors import ConfigError, FormatError
from sliceforge.rng import SplitMixStream


def small_config(**kw):
    defaults = dict(input_height=16, input_width=16)
    defaults.update(kw)
    return M.ModelConfig(**defaults)


class TestConfig:
    def test_default_plans(self):
        cfg = small_config()
        assert cfg.channel_plan == (8, 8, 16, 16, 32, 32, 64, 64, 128)
        assert cfg.stride_plan == (1, 2, 1, 2, 1, 2, 1, 2, 1)

    def test_short_channel_plan_rejected(self):
        with pytest.raises(ConfigError):
            small_config(channel_plan=(8,) * 8)

    def test_spatial_floor_is_one(self):
        # ceil(H/stride) under "same" padding can never drop below one pixel,
        # so even an all-stride-2 plan on a 2x2 input stays valid
        cfg = M.ModelConfig(input_height=2, input_width=2, stride_plan=(2,) * 9)
        assert cfg.spatial_dims()[-1] == (1, 1)
        model = M.build_model(cfg, seed=0)
        probs, _ = M.forward(model, np.zeros((1, 1, 2, 2), dtype=np.float32), "infer")
        assert probs.shape == (1,)

    def test_json_round_trip(self):
        cfg = small_config(hidden_units=32, dropout_rate=0.25)
        back = M.ModelConfig.from_json_dict(cfg.to_json_dict())
        assert back == cfg


class TestBuild:
    def test_deterministic_from_seed(self):
        a = M.build_model(small_config(), seed=7)
        b = M.build_model(small_config(), seed=7)
        for (_, pa), (_, pb) in zip(a.state_arrays(), b.state_arrays()):
            assert pa.tobytes() == pb.tobytes()

    def test_seed_changes_weights(self):
        a = M.build_model(small_config(), seed=7)
        b = M.build_model(small_config(), seed=8)
        assert a.blocks[0].conv.depthwise.tobytes() != b.blocks[0].conv.depthwise.tobytes()

    def test_output_head_shape(self):
        model = M.build_model(small_config(), seed=1)
        x = np.zeros((3, 1, 16, 16), dtype=np.float32)
        probs, _ = M.forward(model, x, "infer")
        assert probs.shape == (3,)

    def test_parameter_count_formula(self):
        # per block: C_in*k^2 (depthwise) + C_in*C_out (pointwise) + C_out (bias)
        # + 4*C_out (norm); head: hidden and output affine layers
        cfg = small_config()
        model = M.build_model(cfg, seed=0)
        expected = 0
        c_in = 1
        for c_out in cfg.channel_plan:
            expected += c_in * cfg.kernel ** 2 + c_in * c_out + c_out + 4 * c_out
            c_in = c_out
        expected += cfg.hidden_units * c_in + cfg.hidden_units
        expected += cfg.hidden_units + 1
        assert model.parameter_count() == expected
        # hand-computed total for the default single-channel config:
        # blocks 57+176+280+480+816+1472+2656+4992+9408 = 20337,
        # hidden 64*128+64 = 8256, output 64+1 = 65
        assert model.parameter_count() == 28658


class TestForward:
    def test_zero_model_gives_half(self):
        model = M.build_model(small_config(), seed=3)
        for _, arr in model.named_parameters():
            arr[...] = 0.0
        x = np.random.default_rng(0).normal(size=(4, 1, 16, 16)).astype(np.float32)
        probs, _ = M.forward(model, x, "infer")
        np.testing.assert_array_equal(probs, 0.5)

    def test_probs_in_open_interval(self):
        model = M.build_model(small_config(), seed=4)
        x = np.random.default_rng(1).normal(size=(4, 1, 16, 16)).astype(np.float32)
        probs, _ = M.forward(model, x, "infer")
        assert np.all(probs > 0) and np.all(probs < 1)

    def test_infer_deterministic(self):
        model = M.build_model(small_config(), seed=5)
        x = np.random.default_rng(2).normal(size=(2, 1, 16, 16)).astype(np.float32)
        a, _ = M.forward(model, x, "infer")
        b, _ = M.forward(model, x, "infer")
        assert np.array_equal(a, b)

    def test_shape_mismatch(self):
        model = M.build_model(small_config(), seed=5)
        with pytest.raises(Exception):
            M.forward(model, np.zeros((1, 1, 8, 8), dtype=np.float32), "infer")


class TestPredictLabels:
    def test_boundary_is_positive(self):
        assert M.predict_labels(np.array([0.5]), 0.5).tolist() == [1]

    def test_below_threshold(self):
        assert M.predict_labels(np.array([0.49]), 0.5).tolist() == [0]

    def test_separation(self):
        assert M.predict_labels(np.array([0.1, 0.9]), 0.5).tolist() == [0, 1]


class TestSaveLoad:
    def test_round_trip_outputs(self, tmp_path):
        model = M.build_model(small_config(), seed=6)
        x = np.random.default_rng(3).normal(size=(2, 1, 16, 16)).astype(np.float32)
        before, _ = M.forward(model, x, "infer")
        path = tmp_path / "m.sfm"
        M.save_model(path, model)
        loaded = M.load_model(path)
        after, _ = M.forward(loaded, x, "infer")
        assert before.tobytes() == after.tobytes()
        assert loaded.config == model.config

    def test_round_trip_bit_exact_params(self, tmp_path):
        model = M.build_model(small_config(), seed=7)
        path = tmp_path / "m.sfm"
        M.save_model(path, model)
        loaded = M.load_model(path)
        for (na, a), (nb, b) in zip(model.state_arrays(), loaded.state_arrays()):
            assert na == nb
            assert a.tobytes() == b.tobytes()

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.sfm"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(FormatError, match="bad magic"):
            M.load_model(path)

    def test_truncated(self, tmp_path):
        model = M.build_model(small_config(), seed=8)
        path = tmp_path / "m.sfm"
        M.save_model(path, model)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            M.load_model(path)

    def test_version_mismatch(self, tmp_path):
        model = M.build_model(small_config(), seed=8)
        path = tmp_path / "m.sfm"
        M.save_model(path, model)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            M.load_model(path)


class TestActivations:
    def test_map_shape_tracks_block_dims(self):
        cfg = small_config()
        model = M.build_model(cfg, seed=9)
        x = np.random.default_rng(4).normal(size=(1, 1, 16, 16)).astype(np.float32)
        dims = cfg.spatial_dims()
        for block in (0, 3, 8):
            amap = M.extract_activation(model, x, block, 0)
            assert amap.shape == dims[block]

    def test_channel_bounds(self):
        cfg = small_config()
        model = M.build_model(cfg, seed=9)
        x = np.zeros((1, 1, 16, 16), dtype=np.float32)
        with pytest.raises(ConfigError):
            M.extract_activation(model, x, 0, cfg.channel_plan[0])
        with pytest.raises(ConfigError):
            M.extract_activation(model, x, 99, 0)

    def test_identity_block_passthrough(self):
        # center-delta depthwise, identity pointwise, stats (0,1): block 0 is
        # a scale of the input, so a constant input gives a constant map
        cfg = small_config(channel_plan=(1,) * 9, stride_plan=(1,) * 9)
        model = M.build_model(cfg, seed=10)
        blk = model.blocks[0]
        blk.conv.depthwise[...] = 0.0
        blk.conv.depthwise[0, 0, 1, 1] = 1.0
        blk.conv.pointwise[...] = 1.0
        blk.conv.bias[...] = 0.0
        x = np.full((1, 1, 16, 16), 3.0, dtype=np.float32)
        amap = M.extract_activation(model, x, 0, 0)
        assert np.allclose(amap, amap.flat[0])


class TestMaximize:
    def linear_single_block_model(self):
        # positive pointwise and a large bias keep the ReLU inactive region
        # away, so the objective is linear in the input
        cfg = small_config(channel_plan=(2,) * 9, stride_plan=(1,) * 9, kernel=3)
        model = M.build_model(cfg, seed=11)
        blk = model.blocks[0]
        blk.conv.depthwise[...] = 0.1
        blk.conv.pointwise[...] = 0.2
        blk.conv.bias[...] = 5.0
        return model

    def test_objective_nondecreasing_linear(self):
        model = self.linear_single_block_model()
        _, trace = M.maximize_activation(model, 0, 0, steps=10, step_size=0.1, seed=0)
        assert len(trace) == 11
        assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))

    def test_steps_precondition(self):
        model = self.linear_single_block_model()
        with pytest.raises(ConfigError):
            M.maximize_activation(model, 0, 0, steps=0, step_size=0.1, seed=0)

    def test_deterministic(self):
        model = M.build_model(small_config(), seed=12)
        a, ta = M.maximize_activation(model, 2, 1, steps=5, step_size=0.5, seed=3)
        b, tb = M.maximize_activation(model, 2, 1, steps=5, step_size=0.5, seed=3)
        assert a.tobytes() == b.tobytes()
        assert ta == tb
        assert np.all(np.isfinite(a))


class TestWholeModelGradient:
    def test_matches_finite_differences(self):
        # float64 shadow of the full default model on a 2-sample 16x16 batch,
        # dropout disabled; h=1e-5 keeps the probe inside one ReLU region
        cfg = small_config(dropout_rate=0.0)
        model = M.build_model(cfg, seed=7).astype(np.float64)
        rng = np.random.default_rng(3)
        x = rng.normal(0.5, 0.25, size=(2, 1, 16, 16))
        y = np.array([0, 1])

        def loss_value():
            _, caches = M.forward(model, x, "train")
            loss, _ = T.bce_loss(caches.logits, y)
            return loss

        _, caches = M.forward(model, x, "train")
        loss, dlogits = T.bce_loss(caches.logits, y)
        grads = M.backward(model, caches, dlogits)

        check_rng = np.random.default_rng(11)
        worst = 0.0
        for name, p in model.named_parameters():
            flat = p.reshape(-1)
            coords = check_rng.choice(flat.size, size=min(4, flat.size), replace=False)
            for c in coords:
                old = flat[c]
                flat[c] = old + 1e-5
                fp = loss_value()
                flat[c] = old - 1e-5
                fm = loss_value()
                flat[c] = old
                fd = (fp - fm) / 2e-5
                an = grads[name].reshape(-1)[c]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        assert worst <= 1e-3
