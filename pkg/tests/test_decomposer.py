import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from intrinsic_paradigms.checkpoint import load_bundle, save_bundle
from intrinsic_paradigms.decomposer import (
    Decomposer, DecomposerConfig, EmaState, TileDecomposer, average_checkpoints, decompose_tile, ema_update,
    location_code, zero_parameters)
from intrinsic_paradigms.fields import D4, apply_d4
from intrinsic_paradigms.io import FieldFormatError

SMALL = DecomposerConfig(tile=32, width=4)


class TestLocationCode:
    def test_left_edge(self):
        code = location_code(128)
        assert np.all(code[0, :, 0] == 40)
        assert code[0, 5, 1] == 39

    def test_centre_is_zero(self):
        assert np.all(location_code(128)[:, 64, 64] == 0)

    def test_channel_order(self):
        code = location_code(16, reach=40)
        assert code[1, 3, 15] == 40 and code[2, 0, 7] == 40 and code[3, 15, 2] == 40

    @pytest.mark.parametrize("tile", [1, 7, 32, 128])
    def test_monotone_in_distance(self, tile):
        code = location_code(tile)
        left = code[0, 0]
        assert np.all(np.diff(left) <= 0)
        assert np.all(np.diff(code[2][:, 0]) <= 0)

    @pytest.mark.parametrize("g", D4)
    def test_d4_permutes_channels(self, g):
        code = location_code(24)
        moved = apply_d4(code, g)
        matches = [k for c in moved for k in range(4) if np.array_equal(c, code[k])]
        assert sorted(matches) == [0, 1, 2, 3]

    def test_bad_tile(self):
        with pytest.raises(ValueError):
            location_code(0)


class TestForward:
    def test_full_size_shapes_and_ranges(self):
        model = Decomposer()
        a, s, c = decompose_tile(model, np.random.default_rng(0).random((3, 128, 128)))
        assert a.shape == (3, 128, 128) and s.shape == (1, 128, 128) and c.shape == (3,)
        assert a.min() >= 0 and a.max() <= 1 and s.min() >= 0 and s.max() <= 1 and np.all(c > 0)

    def test_widths(self):
        model = Decomposer()
        assert [conv.out_channels for conv in model.encoder] == [64, 128, 256, 256, 256]
        assert model.lift.in_channels == 7 and model.lift.out_channels == 32

    def test_no_location_code(self):
        model = Decomposer(DecomposerConfig(tile=32, width=4, use_location_code=False))
        assert model.lift.in_channels == 3

    def test_zero_parameters(self):
        model = zero_parameters(Decomposer(SMALL))
        a, s, c = decompose_tile(model, np.random.default_rng(1).random((3, 32, 32)))
        assert np.all(a == 0.5) and np.all(s == 0.5) and np.all(c == 1.0)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-50, 50), st.integers(0, 1000))
    def test_ranges_any_input(self, scale, seed):
        torch.manual_seed(seed)
        model = Decomposer(SMALL)
        x = torch.randn(2, 3, 32, 32) * scale
        with torch.no_grad():
            a, s, c = model(x)
        assert a.min() >= 0 and a.max() <= 1 and s.min() >= 0 and s.max() <= 1 and (c > 0).all()

    def test_deterministic(self):
        model = Decomposer(SMALL)
        tile = np.random.default_rng(2).random((3, 32, 32))
        first = decompose_tile(model, tile)
        second = decompose_tile(model, tile)
        for x, y in zip(first, second):
            np.testing.assert_array_equal(x, y)

    def test_batching_does_not_matter(self):
        model = Decomposer(SMALL).double()
        tiles = np.random.default_rng(3).random((5, 3, 32, 32))
        a1, s1, c1 = TileDecomposer(model, batch_size=5)(tiles)
        a2, s2, c2 = TileDecomposer(model, batch_size=2)(tiles)
        np.testing.assert_allclose(a1, a2, atol=1e-12)
        np.testing.assert_allclose(c1, c2, atol=1e-12)

    @pytest.mark.parametrize("shape", [(3, 31, 32), (1, 32, 32), (3, 64, 64)])
    def test_wrong_tile(self, shape):
        with pytest.raises(ValueError):
            decompose_tile(Decomposer(SMALL), np.zeros(shape))

    def test_tile_must_divide(self):
        with pytest.raises(ValueError):
            Decomposer(DecomposerConfig(tile=48))

    def test_non_finite(self):
        model = Decomposer(SMALL)
        with torch.no_grad():
            model.color_head.bias.fill_(1e6)
        with pytest.raises(FloatingPointError):
            decompose_tile(model, np.zeros((3, 32, 32)))


class TestEma:
    def test_zero_decay_copies(self):
        ema = EmaState.from_params({"p": np.zeros(3)}, decay=0.0, interval=10)
        ema_update(ema, {"p": np.ones(3)}, 10)
        np.testing.assert_array_equal(ema.shadow["p"], 1.0)

    def test_unit_decay_frozen(self):
        ema = EmaState.from_params({"p": np.zeros(3)}, decay=1.0, interval=10)
        for n in range(10, 100, 10):
            ema_update(ema, {"p": np.full(3, n)}, n)
        np.testing.assert_array_equal(ema.shadow["p"], 0.0)

    def test_recurrence(self):
        ema = EmaState.from_params({"p": np.array(0.0)}, decay=0.9, interval=5000)
        ema_update(ema, {"p": np.array(1.0)}, 4999)
        assert ema.shadow["p"] == 0.0
        ema_update(ema, {"p": np.array(1.0)}, 5000)
        assert ema.shadow["p"] == pytest.approx(0.1, abs=1e-15)
        ema_update(ema, {"p": np.array(1.0)}, 10_000)
        assert ema.shadow["p"] == pytest.approx(0.19, abs=1e-15)

    def test_skipped_boundaries_all_applied(self):
        ema = EmaState.from_params({"p": np.array(0.0)}, decay=0.9, interval=5)
        ema_update(ema, {"p": np.array(1.0)}, 12)
        assert ema.shadow["p"] == pytest.approx(0.19) and ema.boundary == 2

    def test_torch_module(self):
        model = Decomposer(SMALL)
        ema = EmaState.from_params(model.state_dict(), decay=0.0, interval=1)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(1.0)
        ema_update(ema, model, 1)
        for k, v in model.state_dict().items():
            torch.testing.assert_close(ema.shadow[k], v)

    def test_shape_mismatch(self):
        ema = EmaState.from_params({"p": np.zeros(3)}, interval=1)
        with pytest.raises(ValueError):
            ema_update(ema, {"p": np.zeros(4)}, 1)
        with pytest.raises(ValueError):
            ema_update(ema, {"q": np.zeros(3)}, 1)

    def test_bad_decay(self):
        with pytest.raises(ValueError):
            EmaState.from_params({"p": np.zeros(1)}, decay=1.5)


class TestAverageCheckpoints:
    def test_identity(self, rng):
        p = {"a": rng.random(4)}
        np.testing.assert_array_equal(average_checkpoints([p])["a"], p["a"])

    def test_opposites_cancel(self, rng):
        theta = rng.standard_normal(5)
        assert np.all(average_checkpoints([{"a": theta}, {"a": -theta}])["a"] == 0)

    def test_scalar_mean(self):
        assert average_checkpoints([{"a": np.array(v)} for v in (0.0, 1.0, 2.0)])["a"] == 1.0

    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_linear(self, a, b):
        rng = np.random.default_rng(0)
        t1, t2, t3 = (rng.standard_normal(4) for _ in range(3))
        lhs = average_checkpoints([{"p": a * t1 + b * t2}, {"p": a * t3 + b * t3}])["p"]
        rhs = a * average_checkpoints([{"p": t1}, {"p": t3}])["p"] + b * average_checkpoints([{"p": t2}, {"p": t3}])["p"]
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_torch_dtype_kept(self):
        out = average_checkpoints([{"w": torch.ones(2)}, {"w": torch.zeros(2)}])
        assert out["w"].dtype == torch.float32 and torch.all(out["w"] == 0.5)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            average_checkpoints([{"a": np.zeros(2)}, {"a": np.zeros(3)}])
        with pytest.raises(ValueError):
            average_checkpoints([{"a": np.zeros(2)}, {"b": np.zeros(2)}])
        with pytest.raises(ValueError):
            average_checkpoints([])


class TestCheckpointBundle:
    def test_bit_exact_roundtrip(self, tmp_path):
        model = Decomposer(SMALL)
        save_bundle(tmp_path / "ck", model.state_dict(), {"config": SMALL.to_dict(), "seed": 3, "images_seen": 7})
        blocks, manifest = load_bundle(tmp_path / "ck")
        assert manifest["images_seen"] == 7 and manifest["config"]["width"] == 4
        for k, v in model.state_dict().items():
            np.testing.assert_array_equal(blocks[k], v.numpy())

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_bundle(tmp_path)

    def test_truncated_block(self, tmp_path):
        save_bundle(tmp_path / "ck", {"w": np.zeros((2, 3))}, {})
        f = tmp_path / "ck" / "block_0000.iikf"
        f.write_bytes(f.read_bytes()[:-4])
        with pytest.raises(FieldFormatError):
            load_bundle(tmp_path / "ck")
