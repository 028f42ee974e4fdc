import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsreg import io
from gsreg.grid import DisplacementField
from gsreg.io import FormatError
from gsreg.network import DirectField, UNetConfig, build_unet
from gsreg.surgery import AdamState, AgrRandom, LayerwiseProject, train_step


def f32_array(rng, shape):
    return rng.normal(0, 10, shape).astype(np.float32).astype(np.float64)


def test_gsmf_header_arithmetic():
    buf = io.encode_gsmf(np.zeros((1, 2, 2)))
    assert len(buf) == 20 + 16
    assert buf[:4] == b"GSMF"
    assert struct.unpack("<IIII", buf[4:20]) == (1, 1, 2, 2)
    assert buf[20:] == bytes(16)


def test_gsmf_round_trip_files(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        c, h, w = rng.integers(1, 4), rng.integers(1, 20), rng.integers(1, 20)
        a = f32_array(rng, (c, h, w))
        io.write_gsmf(tmp_path / "a.gsmf", a)
        assert np.array_equal(io.read_gsmf(tmp_path / "a.gsmf"), a)


def test_field_round_trip_bit_identical(tmp_path):
    a = f32_array(np.random.default_rng(1), (2, 7, 9))
    io.write_field(tmp_path / "f.gsmf", DisplacementField.from_array(a))
    assert np.array_equal(io.read_field(tmp_path / "f.gsmf").to_array(), a)


def test_float64_record_round_trip_is_exact():
    a = np.random.default_rng(2).normal(size=(3, 4, 5))
    out, end = io.decode_gsmf(io.encode_gsmf(a, version=2))
    assert np.array_equal(out, a) and end == 20 + a.size * 8


def test_mask_round_trip(tmp_path):
    m = np.random.default_rng(3).integers(0, 4, (6, 5))
    io.write_mask(tmp_path / "m.gsmf", m)
    assert np.array_equal(io.read_mask(tmp_path / "m.gsmf"), m)


@pytest.mark.parametrize("mutate,where", [
    (lambda b: b"GSMX" + b[4:], "byte 0"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "byte 4"),
    (lambda b: b[:12], "byte 0"),
    (lambda b: b[:-3], "byte 33"),
])
def test_gsmf_errors_carry_offsets(mutate, where):
    buf = mutate(io.encode_gsmf(np.zeros((1, 2, 2))))
    with pytest.raises(FormatError, match=where):
        io.decode_gsmf(buf)


def test_pgm_constant_one_is_all_max():
    buf = io.encode_pgm(np.ones((3, 4)))
    header = b"P5\n4 3\n65535\n"
    assert buf.startswith(header)
    assert np.all(np.frombuffer(buf[len(header):], dtype=">u2") == 65535)


def test_pgm_round_trip_files(tmp_path):
    rng = np.random.default_rng(4)
    for _ in range(100):
        h, w = rng.integers(1, 30, 2)
        img = rng.integers(0, 65536, (h, w)) / 65535.0
        io.write_pgm(tmp_path / "a.pgm", img)
        assert np.array_equal(io.read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_with_comment_and_8bit():
    buf = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
    np.testing.assert_array_equal(io.decode_pgm(buf), [[0.0, 1.0]])


def test_pgm_truncated():
    with pytest.raises(FormatError, match="byte"):
        io.decode_pgm(io.encode_pgm(np.zeros((4, 4)))[:-1])


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_gsmf_round_trip_property(h, w, seed):
    a = f32_array(np.random.default_rng(seed), (2, h, w))
    out, _ = io.decode_gsmf(io.encode_gsmf(a))
    assert np.array_equal(out, a)


# ---------------------------------------------------------------- checkpoints

def batch(seed):
    rng = np.random.default_rng(seed)
    return rng.random((2, 16, 16)), rng.random((2, 16, 16))


def test_checkpoint_restores_everything(tmp_path):
    net = build_unet(UNetConfig((4, 8), 0.2, "t"), 1)
    adam = AdamState()
    f, m = batch(0)
    train_step(net, f, m, LayerwiseProject(), adam, 5e-3)
    io.save_checkpoint(tmp_path / "ck", net, {"strategy": "LayerwiseProject"}, adam, {"epoch": 3})
    net2, adam2, cfg, extra = io.load_checkpoint(tmp_path / "ck")
    assert cfg == {"strategy": "LayerwiseProject"} and extra == {"epoch": "3"}
    for ga, gb in zip(net.groups, net2.groups):
        assert all(np.array_equal(x, y) for x, y in zip(ga.tensors, gb.tensors))
    assert all(np.array_equal(v, net2.buffers()[k]) for k, v in net.buffers().items())
    assert adam2.step == adam.step == 1
    assert all(np.array_equal(adam.m[k], adam2.m[k]) and np.array_equal(adam.v[k], adam2.v[k])
               for k in adam.m)


@pytest.mark.parametrize("strategy", [LayerwiseProject(), AgrRandom()])
def test_resumed_training_is_bit_identical(tmp_path, strategy):
    def steps(net, adam, start, stop):
        out = []
        for s in range(start, stop):
            f, m = batch(s)
            rep = train_step(net, f, m, strategy, adam, 5e-3, rng=np.random.default_rng([0, s]))
            out.append((rep.l_sim, rep.l_reg, rep.applied_norm))
        return out

    net, adam = build_unet(UNetConfig((4, 8), 0.2, "t"), 2), AdamState()
    steps(net, adam, 0, 3)
    io.save_checkpoint(tmp_path / "ck", net, {}, adam)
    tail = steps(net, adam, 3, 6)
    net2, adam2, _, _ = io.load_checkpoint(tmp_path / "ck")
    assert steps(net2, adam2, 3, 6) == tail
    for ga, gb in zip(net.groups, net2.groups):
        assert all(np.array_equal(x, y) for x, y in zip(ga.tensors, gb.tensors))


def test_direct_field_checkpoint(tmp_path):
    init = np.random.default_rng(5).normal(size=(2, 6, 6))
    io.save_checkpoint(tmp_path / "ck", DirectField(6, 6, init), {})
    model = io.load_checkpoint(tmp_path / "ck")[0]
    assert model.kind == "direct_field" and np.array_equal(model.group.tensors[0], init)
