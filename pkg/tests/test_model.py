import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lockdnn.errors import BlobLengthMismatch, ManifestError, ShapeMismatch
from lockdnn.model import (
    LayerSpec,
    Model,
    Tensor,
    forward_reference,
    layer_output_dims,
    load_model,
    logits_of,
    maxpool_raw,
    pool_out_hw,
    save_model,
)
from lockdnn.numeric import QFormat, quantize_array

Q = QFormat(16, 8)


# --------------------- independent big-integer oracle ---------------------
# Scalar forward pass written with plain Python ints; no shared kernels.

def _rhe_shift(x: int, f: int) -> int:
    fl = x >> f
    rem = x - (fl << f)
    half = 1 << (f - 1)
    if rem > half or (rem == half and (fl & 1)):
        return fl + 1
    return fl


def _clamp(x: int) -> int:
    return min(max(x, -32768), 32767)


def oracle_mlp_forward(x_rows, w1, b1, w2, b2):
    """Two fc + rectifier stages, one sample row at a time."""
    out = []
    for row in x_rows:
        hidden = []
        for o in range(len(w1)):
            acc = 0
            for k in range(len(row)):
                acc = _clamp(acc + _rhe_shift(row[k] * w1[o][k], 8))
            acc = _clamp(acc + b1[o])
            hidden.append(max(acc, 0))
        final = []
        for o in range(len(w2)):
            acc = 0
            for k in range(len(hidden)):
                acc = _clamp(acc + _rhe_shift(hidden[k] * w2[o][k], 8))
            acc = _clamp(acc + b2[o])
            final.append(max(acc, 0))
        out.append(final)
    return out


def tiny_mlp(w1, b1, w2, b2, in_features=4, hidden=3, classes=2):
    layers = (
        LayerSpec(
            "fc",
            {"in_features": in_features, "out_features": hidden},
            np.array(w1, dtype=np.int64).reshape(-1),
            np.array(b1, dtype=np.int64),
        ),
        LayerSpec("relu_locked", {}),
        LayerSpec(
            "fc",
            {"in_features": hidden, "out_features": classes},
            np.array(w2, dtype=np.int64).reshape(-1),
            np.array(b2, dtype=np.int64),
        ),
        LayerSpec("relu_locked", {}),
    )
    return Model("tiny-mlp", Q, classes, (in_features, 1, 1), layers)


def identity_conv_model(h=5, w=5):
    kernel = np.zeros((1, 1, 3, 3), dtype=np.int64)
    kernel[0, 0, 1, 1] = 256  # 1.0 at Q8.8
    layers = (
        LayerSpec(
            "conv2d",
            {"in_channels": 1, "out_channels": 1, "kernel": 3, "stride": 1, "padding": 1},
            kernel.reshape(-1),
            np.zeros(1, dtype=np.int64),
        ),
        LayerSpec("relu_locked", {}),
    )
    return Model("identity-conv", Q, 1, (1, h, w), layers)


class TestForwardReference:
    def test_mlp_matches_big_integer_oracle(self):
        w1 = [[256, -128, 64, 300], [10, 20, 30, 40], [-256, 256, -64, 64]]
        b1 = [100, -5000, 256]
        w2 = [[512, -700, 123], [-1, 2, -3]]
        b2 = [-32768, 32000]
        x_rows = [
            [0, 0, 0, 0],
            [256, 256, 256, 256],
            [-32768, 32767, 1, -1],
            [1234, -4321, 91, 7],
        ]
        model = tiny_mlp(w1, b1, w2, b2)
        x = Tensor((4, 4, 1, 1), np.array(x_rows, dtype=np.int64).reshape(-1))
        got = logits_of(forward_reference(model, x))
        assert got.tolist() == oracle_mlp_forward(x_rows, w1, b1, w2, b2)

    def test_all_zero_input_zero_bias_gives_zero_logits(self):
        model = identity_conv_model()
        x = Tensor((2, 1, 5, 5), np.zeros(50, dtype=np.int64))
        out = forward_reference(model, x)
        assert not out.data.any()

    def test_identity_kernel_preserves_nonnegative_maps(self):
        model = identity_conv_model()
        rng = np.random.default_rng(0)
        img = rng.integers(0, 2000, size=(3, 1, 5, 5)).astype(np.int64)
        out = forward_reference(model, Tensor((3, 1, 5, 5), img.reshape(-1)))
        assert np.array_equal(out.reshaped(), img)

    def test_deterministic_repeat(self):
        model = identity_conv_model()
        rng = np.random.default_rng(1)
        img = rng.integers(-500, 500, size=(1, 1, 5, 5)).astype(np.int64)
        x = Tensor((1, 1, 5, 5), img.reshape(-1))
        a = forward_reference(model, x).data
        b = forward_reference(model, x).data
        assert np.array_equal(a, b)

    def test_input_shape_mismatch(self):
        model = identity_conv_model()
        with pytest.raises(ShapeMismatch):
            forward_reference(model, Tensor((1, 1, 4, 4), np.zeros(16, dtype=np.int64)))


class TestPipelineRules:
    def test_conv_then_fc_width_mismatch(self):
        conv = LayerSpec(
            "conv2d",
            {"in_channels": 3, "out_channels": 8, "kernel": 3, "stride": 1, "padding": 0},
            np.zeros(8 * 3 * 9, dtype=np.int64),
            np.zeros(8, dtype=np.int64),
        )
        bad_fc = LayerSpec(
            "fc", {"in_features": 99, "out_features": 2},
            np.zeros(198, dtype=np.int64), np.zeros(2, dtype=np.int64),
        )
        with pytest.raises(ShapeMismatch):
            Model(
                "bad", Q, 2, (3, 6, 6),
                (conv, LayerSpec("relu_locked", {}), bad_fc, LayerSpec("relu_locked", {})),
            )

    def test_missing_final_relu_stage(self):
        fc = LayerSpec(
            "fc", {"in_features": 4, "out_features": 2},
            np.zeros(8, dtype=np.int64), np.zeros(2, dtype=np.int64),
        )
        with pytest.raises(ShapeMismatch):
            Model("bad", Q, 2, (4, 1, 1), (fc,))

    def test_maxpool_must_follow_conv(self):
        fc = LayerSpec(
            "fc", {"in_features": 4, "out_features": 2},
            np.zeros(8, dtype=np.int64), np.zeros(2, dtype=np.int64),
        )
        with pytest.raises(ShapeMismatch):
            Model(
                "bad", Q, 2, (4, 1, 1),
                (fc, LayerSpec("maxpool", {"kernel": 2, "stride": 2}), LayerSpec("relu_locked", {})),
            )

    def test_layer_output_dims(self):
        conv = LayerSpec(
            "conv2d",
            {"in_channels": 1, "out_channels": 4, "kernel": 3, "stride": 1, "padding": 0},
            np.zeros(36, dtype=np.int64), np.zeros(4, dtype=np.int64),
        )
        pool = LayerSpec("maxpool", {"kernel": 2, "stride": 2})
        fc = LayerSpec(
            "fc", {"in_features": 36, "out_features": 5},
            np.zeros(180, dtype=np.int64), np.zeros(5, dtype=np.int64),
        )
        model = Model(
            "dims", Q, 5, (1, 8, 8),
            (conv, pool, LayerSpec("relu_locked", {}), fc, LayerSpec("relu_locked", {})),
        )
        assert layer_output_dims(model) == [
            (4, 6, 6), (4, 3, 3), (4, 3, 3), (5, 1, 1), (5, 1, 1)
        ]


class TestMaxpool:
    @given(
        h=st.integers(1, 12), w=st.integers(1, 12),
        k=st.integers(1, 4), s=st.integers(1, 4),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_extents_and_values_match_sliding_window_oracle(self, h, w, k, s, seed):
        if h < k or w < k:
            return
        rng = np.random.default_rng(seed)
        x = rng.integers(-1000, 1000, size=(1, 2, h, w)).astype(np.int64)
        out = maxpool_raw(x, k, s)
        oh, ow = (h - k) // s + 1, (w - k) // s + 1
        assert out.shape == (1, 2, oh, ow)
        assert (oh, ow) == pool_out_hw(h, w, k, s)
        for c in range(2):
            for i in range(oh):
                for j in range(ow):
                    window = x[0, c, i * s : i * s + k, j * s : j * s + k]
                    assert out[0, c, i, j] == window.max()


class TestSerialization:
    def _model(self):
        rng = np.random.default_rng(5)
        w1 = rng.integers(-3000, 3000, size=12).astype(np.int64)
        b1 = rng.integers(-3000, 3000, size=3).astype(np.int64)
        w2 = rng.integers(-3000, 3000, size=6).astype(np.int64)
        b2 = rng.integers(-3000, 3000, size=2).astype(np.int64)
        return tiny_mlp(w1.reshape(3, 4).tolist(), b1.tolist(), w2.reshape(2, 3).tolist(), b2.tolist())

    def test_save_load_round_trip_bit_exact(self, tmp_path):
        model = self._model()
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        assert back.name == model.name
        assert back.qformat == model.qformat
        assert back.input_dims == model.input_dims
        for a, b in zip(model.layers, back.layers):
            assert a.kind == b.kind and a.params == b.params
            if a.weight is not None:
                assert np.array_equal(a.weight, b.weight)
                assert np.array_equal(a.bias, b.bias)
        # Saving the loaded model reproduces both files byte for byte.
        save_model(back, tmp_path / "m2.json", tmp_path / "m2.bin")
        assert (tmp_path / "m2.bin").read_bytes() == (tmp_path / "m.bin").read_bytes()

    def test_blob_length_mismatch(self, tmp_path):
        model = self._model()
        save_model(model, tmp_path / "m.json")
        blob = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "m.bin").write_bytes(blob[:-2])
        with pytest.raises(BlobLengthMismatch):
            load_model(tmp_path / "m.json")

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        with pytest.raises(ManifestError):
            load_model(tmp_path / "m.json")

    def test_wrong_schema(self, tmp_path):
        (tmp_path / "m.json").write_text('{"schema": "other"}')
        with pytest.raises(ManifestError):
            load_model(tmp_path / "m.json")

    def test_quantize_array_feeds_models(self):
        # Float weights quantize into valid raw words for LayerSpec arrays.
        w = quantize_array(np.array([[0.5, -0.25], [1.0, 2.0]]), Q)
        assert w.tolist() == [[128, -64], [256, 512]]
