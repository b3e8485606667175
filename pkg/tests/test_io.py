import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alfalab.adapters import init_alfa, init_lora
from alfalab.checkpoint import (
    adapter_tensors,
    adapters_from_tensors,
    bind_adapters,
    net_from_tensors,
    net_tensors,
)
from alfalab.config import emit_config, parse_config
from alfalab.errors import ConfigError, FormatError, ShapeError
from alfalab.fileio import (
    decode_atf,
    encode_atf,
    encode_pgm,
    load_atf,
    matrix_csv,
    minmax_normalize,
    read_pgm,
    save_atf,
    write_pgm,
)
from alfalab.model import decompose_net, init_minigaze
from alfalab.numerics import make_rng
from alfalab.ttp import TrainConfig


def _random_tensors(rng):
    out = {}
    for i in range(int(rng.integers(0, 6))):
        ndim = int(rng.integers(0, 4))
        shape = tuple(int(s) for s in rng.integers(0, 4, size=ndim))
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        name = f"t{i}/" + "é" * int(rng.integers(0, 3))
        out[name] = rng.normal(size=shape).astype(dtype)
    return out


@pytest.mark.parametrize("seed", range(20))
def test_atf_roundtrip_bit_exact(seed):
    tensors = _random_tensors(make_rng(30, seed))
    back = decode_atf(encode_atf(tensors))
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_atf_special_values_and_file(tmp_path):
    t = {"x": np.array([np.inf, -0.0, np.nan, 5e-324]), "e": np.zeros((0, 3), np.float32)}
    save_atf(tmp_path / "a.atf", t)
    back = load_atf(tmp_path / "a.atf")
    assert back["x"].tobytes() == t["x"].tobytes()
    assert back["e"].shape == (0, 3)


def test_atf_layout():
    buf = encode_atf({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    assert buf[:4] == b"ATF1"
    assert struct.unpack("<I", buf[4:8]) == (1,)
    assert struct.unpack("<H", buf[8:10]) == (2,)
    assert buf[10:12] == b"ab"
    assert buf[12:14] == bytes([0, 2])
    assert struct.unpack("<II", buf[14:22]) == (1, 2)
    assert len(buf) == 22 + 8


def test_atf_corruption_detected():
    good = encode_atf({"a": np.arange(6.0).reshape(2, 3)})
    cases = [
        b"ATF2" + good[4:],
        good[:-1],
        good + b"\x00",
        good[:12] + bytes([7]) + good[13:],
        encode_atf({"a": np.zeros(1)})[:-8] + struct.pack("<d", 0.0)[:4],
    ]
    dup = bytearray(encode_atf({"a": np.zeros(1), "b": np.zeros(1)}))
    dup[dup.index(b"b")] = ord("a")
    cases.append(bytes(dup))
    for bad in cases:
        with pytest.raises(FormatError):
            decode_atf(bad)


def test_atf_rejects_unsupported_dtype():
    with pytest.raises(FormatError):
        encode_atf({"i": np.arange(3)})


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=0, max_size=8),
                       st.lists(st.floats(allow_nan=False, width=64), max_size=5), max_size=4))
def test_atf_roundtrip_property(d):
    tensors = {k: np.array(v, dtype=np.float64) for k, v in d.items()}
    back = decode_atf(encode_atf(tensors))
    assert {k: v.tobytes() for k, v in back.items()} == {k: v.tobytes() for k, v in tensors.items()}


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(0, 1, 32 * 20).reshape(20, 32)
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (20, 32)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    assert encode_pgm(np.array([[2.0, -1.0]])).endswith(bytes([255, 0]))


def test_minmax_and_csv():
    assert minmax_normalize(np.array([[2.0, 4.0, 3.0]])).tolist() == [[0.0, 1.0, 0.5]]
    assert not minmax_normalize(np.full((2, 2), 7.0)).any()
    assert matrix_csv(np.array([[1.5, -2.0]])) == "1.5,-2.0\n"


def test_config_roundtrip_and_errors():
    cfg = TrainConfig(seed=7, personalize_lr=3.3e-4, augment=False, adapted_layers="conv3")
    assert parse_config(emit_config(cfg)) == cfg
    assert parse_config("# comment\n epochs = 3  # trailing\n\n").epochs == 3
    with pytest.raises(ConfigError, match="bogus"):
        parse_config("bogus=1")
    with pytest.raises(ConfigError):
        parse_config("epochs=three")
    with pytest.raises(ConfigError):
        parse_config("shots=0")
    with pytest.raises(ConfigError):
        parse_config("just words")


def test_net_and_adapter_tensors_roundtrip():
    net, _ = decompose_net(init_minigaze(make_rng(1)), 4)
    back = net_from_tensors(decode_atf(encode_atf(net_tensors(net))))
    for c, f in net.factors.items():
        assert back.factors[c].U.tobytes() == f.U.tobytes()
    rng = make_rng(2)
    ads = {"conv2": init_alfa(4, 72, 2, 2, None, rng), "conv3": init_lora(32, 144, 2, 0.5, rng)}
    loaded, vbases = adapters_from_tensors(decode_atf(encode_atf(adapter_tensors(ads, net))))
    bind_adapters(loaded, net)
    assert loaded["conv2"].H == 2 and loaded["conv2"].n == 72
    assert np.array_equal(vbases["conv2"], net.factors["conv2"].Vbase)
    assert loaded["conv3"].kind == "lora"


def test_net_shape_mismatch():
    t = net_tensors(decompose_net(init_minigaze(make_rng(1)), 4)[0])
    t["conv2.Vbase"] = np.zeros((4, 71))
    with pytest.raises(ShapeError):
        net_from_tensors(t)
    del t["conv2.Vbase"]
    with pytest.raises(ShapeError):
        net_from_tensors(t)


def test_adapter_bound_to_wrong_net():
    net4, _ = decompose_net(init_minigaze(make_rng(1)), 4)
    net3, _ = decompose_net(init_minigaze(make_rng(1)), 3)
    ads = {"conv2": init_alfa(4, 72, 1, 1, None, make_rng(3))}
    loaded, _ = adapters_from_tensors(adapter_tensors(ads, net4))
    with pytest.raises(ShapeError):
        bind_adapters(loaded, net3)
    with pytest.raises(FormatError):
        adapters_from_tensors({"conv2/odd": np.zeros(1)})
