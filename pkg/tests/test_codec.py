import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from ndvq import codec as C
from ndvq import numerics as nx
from ndvq.signal import AudioBuffer

TOY = C.CodecConfig(sample_rate=8000, strides=(2, 2, 2), latent_dim=8, channels=4, codebook_size=16, n_layers=4)


@pytest.fixture(scope="module")
def toy_model():
    return C.ToyCodecModel(TOY, seed=0)


# -- config and frame arithmetic -----------------------------------------


def test_frame_rates():
    assert C.full_scale_config().frame_rate == 75.0
    assert C.full_scale_config().hop == 320
    assert TOY.frame_rate == 1000.0


def test_encode_frame_counts():
    full = C.full_scale_config()
    assert C.n_latent_frames(24000, full) == 75
    assert C.n_latent_frames(8000, TOY) == 1000


def test_toy_encode_one_second(toy_model):
    z = C.encode(toy_model, AudioBuffer(np.zeros(8000), 8000))
    assert z.shape == (1000, TOY.latent_dim)


def test_full_scale_decode_length():
    model = C.ToyCodecModel(C.CodecConfig(sample_rate=24000, strides=(2, 4, 5, 8), latent_dim=4, channels=2), 0)
    assert len(C.decode(model, np.zeros((75, 4)))) == 24000


@given(st.integers(8, 400))
def test_encode_decode_length_arithmetic(length):
    model = C.ToyCodecModel(TOY, seed=1)
    x = AudioBuffer(np.random.default_rng(length).uniform(-1, 1, length), 8000)
    z = C.encode(model, x)
    assert z.shape[0] == -(-length // 8)
    assert len(C.decode(model, z)) == z.shape[0] * 8
    assert len(C.decode(model, z, length)) == length


def test_zero_weights_give_zero_latents_and_silence():
    model = C.ToyCodecModel(TOY, seed=0)
    for p in model.params.values():
        p.value = np.zeros_like(p.value)
    z = C.encode(model, AudioBuffer(np.random.default_rng(0).uniform(-1, 1, 64), 8000))
    assert np.all(z == 0)
    assert np.all(C.decode(model, np.zeros((8, TOY.latent_dim))).samples == 0)


def test_encode_errors(toy_model):
    with pytest.raises(C.SampleRateMismatchError):
        C.encode(toy_model, AudioBuffer(np.zeros(64), 16000))
    with pytest.raises(C.InputTooShortError):
        C.encode(toy_model, AudioBuffer(np.zeros(7), 8000))
    with pytest.raises(C.ConfigError):
        C.decode(toy_model, np.zeros((4, TOY.latent_dim + 1)))


def test_config_validation():
    with pytest.raises(C.ConfigError):
        C.CodecConfig(strides=(2, 0))
    with pytest.raises(C.ConfigError):
        C.CodecConfig(codebook_size=2048)
    with pytest.raises(C.ConfigError):
        C.CodecConfig(n_layers=33)


def test_model_gradients():
    model = C.ToyCodecModel(TOY, seed=2)
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (1, 32))
    w = model.params["enc.down1.w"]
    w0 = w.value.copy()

    def f(t):
        w.value = t.value
        saved = model.params["enc.down1.w"]
        model.params["enc.down1.w"] = t
        try:
            return nx.square(model.decode_tensor(model.encode_tensor(x), 32)).sum()
        finally:
            model.params["enc.down1.w"] = saved

    assert nx.grad_check(f, w0, coords=rng.choice(w0.size, 10, replace=False)) < 1e-4


# -- bandwidth -----------------------------------------------------------


@pytest.mark.parametrize("bw, n_q", [(1.5, 2), (3, 4), (6, 8), (12, 16), (24, 32)])
def test_full_scale_bandwidths(bw, n_q):
    assert C.bandwidth_to_nq(bw, 75.0) == n_q


def test_toy_bandwidth():
    assert C.bandwidth_to_nq(20, 1000.0) == 2


def test_invalid_bandwidth_lists_valid_set():
    with pytest.raises(C.ConfigError, match=r"valid: 0\.75, 1\.5, 2\.25"):
        C.bandwidth_to_nq(7, 75.0)
    with pytest.raises(C.ConfigError, match="outside"):
        C.bandwidth_to_nq(48, 75.0)


# -- bitstream -----------------------------------------------------------


def header(frames, n_q, k=1024):
    return C.StreamHeader(24000, (2, 4, 5, 8), 128, k, n_q, frames)


def test_pack_known_bits():
    data = C.pack_bitstream([[0, 1023]], header(1, 2))
    payload = data[header(1, 2).size :]
    assert payload == bytes([0b00000000, 0b00111111, 0b11110000])
    assert len(payload) * 8 - 20 == 4


def test_header_layout():
    h = header(3, 2)
    raw = h.to_bytes()
    assert raw[:4] == b"NDVC" and len(raw) == h.size == 4 + 2 + 4 + 1 + 4 + 2 + 2 + 1 + 4


def test_round_trip_100_random_grids():
    rng = np.random.default_rng(0)
    for _ in range(100):
        frames, n_q = int(rng.integers(1, 50)), int(rng.integers(1, 33))
        grid = rng.integers(0, 1024, (frames, n_q))
        h = header(frames, n_q)
        data = C.pack_bitstream(grid, h)
        h2, back = C.unpack_bitstream(data)
        assert np.array_equal(back, grid) and h2 == h
        assert len(data) - h.size == -(-frames * n_q * 10 // 8)


@given(st.integers(1, 200), st.integers(1, 32))
def test_file_bitrate_matches_nominal(frames, n_q):
    h = header(frames, n_q)
    data = C.pack_bitstream(np.zeros((frames, n_q), dtype=int), h)
    seconds = frames / 75.0
    nominal = C.achieved_bitrate(h, 75.0)
    assert nominal == 75.0 * n_q * 10
    payload_bits = (len(data) - h.size) * 8
    assert -1e-6 <= payload_bits - nominal * seconds < 8


def test_bitstream_errors():
    h = header(2, 3, k=512)
    data = C.pack_bitstream(np.zeros((2, 3), dtype=int), h)
    with pytest.raises(C.BadMagicError):
        C.unpack_bitstream(b"XXXX" + data[4:])
    with pytest.raises(C.VersionMismatchError):
        C.unpack_bitstream(data[:4] + (9).to_bytes(2, "little") + data[6:])
    with pytest.raises(C.TruncatedPayloadError):
        C.unpack_bitstream(data[:-1])
    with pytest.raises(C.TruncatedPayloadError):
        C.unpack_bitstream(data[:9])
    with pytest.raises(C.BitstreamError):
        C.unpack_bitstream(data + b"\x00")
    with pytest.raises(C.IndexRangeError):
        C.pack_bitstream([[0, 0, 512], [0, 0, 0]], h)
    bad = bytearray(C.pack_bitstream([[1023, 0, 0], [0, 0, 0]], header(2, 3)))
    bad[h.size - 7 : h.size - 5] = (512).to_bytes(2, "little")
    with pytest.raises(C.IndexRangeError):
        C.unpack_bitstream(bytes(bad))


def test_pack_shape_must_match_header():
    with pytest.raises(C.BitstreamError):
        C.pack_bitstream(np.zeros((3, 2), dtype=int), header(2, 2))


# -- weight file ---------------------------------------------------------


def test_weight_file_round_trip(tmp_path, toy_model):
    C.save_model(tmp_path / "m.ndvm", toy_model)
    back = C.load_model(tmp_path / "m.ndvm", TOY)
    for name, p in toy_model.params.items():
        assert_allclose(back.params[name].value, p.value.astype(np.float32))
    assert C.weights_to_bytes(back.params) == (tmp_path / "m.ndvm").read_bytes()


def test_weight_file_config_mismatch(tmp_path, toy_model):
    C.save_model(tmp_path / "m.ndvm", toy_model)
    other = C.CodecConfig(sample_rate=8000, strides=(2, 2, 2), latent_dim=9, channels=4)
    with pytest.raises(C.ConfigError, match=r"file shape .* config expects"):
        C.load_model(tmp_path / "m.ndvm", other)


def test_pipeline_is_pure(toy_model):
    from ndvq import quantizer as qz

    rng = np.random.default_rng(4)
    x = AudioBuffer(rng.uniform(-1, 1, 200), 8000)
    rq = qz.init_codebooks(2, 16, rng.standard_normal((64, TOY.latent_dim)), 0)

    def run():
        z = C.encode(toy_model, x)
        res = qz.quantize_infer(rq, z)
        h = C.StreamHeader(8000, TOY.strides, TOY.latent_dim, 16, 2, len(z))
        _, grid = C.unpack_bitstream(C.pack_bitstream(res.indices, h))
        return C.decode(toy_model, qz.decode_indices(rq, grid), len(x)).samples

    assert np.array_equal(run(), run())
