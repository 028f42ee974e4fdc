"""File formats: 16-bit binary PGM images and the GSMF tensor container.

GSMF layout (little endian)::

    b"GSMF" | u32 version | u32 C | u32 H | u32 W | C*H*W samples, row-major, channels outermost

Version 1 stores float32 samples and is used for fields and masks.  Version 2
stores float64 samples and is used inside checkpoints so that training can
resume bit-exactly.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import DisplacementField

MAGIC = b"GSMF"
HEADER = struct.Struct("<4sIIII")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed file; the message carries the byte offset of the problem."""


# ---------------------------------------------------------------- GSMF

def encode_gsmf(a, version: int = 1) -> bytes:
    a = np.asarray(a)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"GSMF stores (C, H, W) arrays, got shape {a.shape}")
    if version not in DTYPES:
        raise ValueError(f"unsupported GSMF version {version}")
    c, h, w = a.shape
    return HEADER.pack(MAGIC, version, c, h, w) + np.ascontiguousarray(a, dtype=DTYPES[version]).tobytes()


def decode_gsmf(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns ``(array, next_offset)``."""
    if len(buf) - offset < HEADER.size:
        raise FormatError(f"truncated GSMF header at byte {offset}: need {HEADER.size} bytes, "
                          f"have {len(buf) - offset}")
    magic, version, c, h, w = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte {offset}, expected {MAGIC!r}")
    if version not in DTYPES:
        raise FormatError(f"unsupported GSMF version {version} at byte {offset + 4}")
    dt = DTYPES[version]
    start = offset + HEADER.size
    nbytes = c * h * w * dt.itemsize
    if len(buf) - start < nbytes:
        raise FormatError(f"truncated GSMF payload at byte {len(buf)}: expected {nbytes} bytes "
                          f"from byte {start}")
    data = np.frombuffer(buf, dtype=dt, count=c * h * w, offset=start).reshape(c, h, w)
    return data.astype(np.float64), start + nbytes


def write_gsmf(path, a, version: int = 1):
    Path(path).write_bytes(encode_gsmf(a, version))


def read_gsmf(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_gsmf(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after GSMF record at byte {end}")
    return arr


def write_field(path, field: DisplacementField):
    write_gsmf(path, field.to_array())


def read_field(path) -> DisplacementField:
    a = read_gsmf(path)
    if a.shape[0] != 2:
        raise FormatError(f"{path}: a displacement field needs 2 channels, found {a.shape[0]} at byte 8")
    return DisplacementField.from_array(a)


def write_mask(path, mask):
    write_gsmf(path, np.asarray(mask, dtype=np.float64))


def read_mask(path) -> np.ndarray:
    a = read_gsmf(path)
    if a.shape[0] != 1:
        raise FormatError(f"{path}: a mask needs 1 channel, found {a.shape[0]} at byte 8")
    m = a[0]
    if not np.array_equal(m, np.round(m)):
        raise FormatError(f"{path}: mask values must be integral")
    return m.astype(np.int64)


# ---------------------------------------------------------------- PGM

def encode_pgm(img) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM stores 2-D images, got shape {img.shape}")
    h, w = img.shape
    samples = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + samples.tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"truncated PGM header at byte {pos}")
        tokens.append((buf[start:pos], start))
    (magic, _), (w, w_at), (h, h_at), (maxval, m_at) = tokens
    if magic != b"P5":
        raise FormatError(f"bad PGM magic {magic!r} at byte 0, expected b'P5'")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"non-numeric PGM header field near byte {w_at}") from None
    if not 0 < maxval < 65536:
        raise FormatError(f"PGM maxval {maxval} out of range at byte {m_at}")
    pos += 1  # single whitespace after maxval
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dt.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"truncated PGM raster at byte {len(buf)}: expected {need} bytes from byte {pos}")
    samples = np.frombuffer(buf, dtype=dt, count=w * h, offset=pos).reshape(h, w)
    return samples.astype(np.float64) / maxval


def write_pgm(path, img):
    Path(path).write_bytes(encode_pgm(img))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


# ---------------------------------------------------------------- dataset cases

CASE_FILES = ("moving.pgm", "fixed.pgm", "moving_mask.gsmf", "fixed_mask.gsmf", "gt_field.gsmf")


def write_case(case_dir, pair):
    d = Path(case_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / "moving.pgm", pair.moving)
    write_pgm(d / "fixed.pgm", pair.fixed)
    write_mask(d / "moving_mask.gsmf", pair.moving_mask)
    write_mask(d / "fixed_mask.gsmf", pair.fixed_mask)
    write_field(d / "gt_field.gsmf", pair.gt_field)


def read_case(case_dir):
    from .synth import Pair

    d = Path(case_dir)
    return Pair(read_pgm(d / "moving.pgm"), read_pgm(d / "fixed.pgm"),
                read_mask(d / "moving_mask.gsmf"), read_mask(d / "fixed_mask.gsmf"),
                read_field(d / "gt_field.gsmf"))


# ---------------------------------------------------------------- checkpoints

def _as3d(a: np.ndarray) -> np.ndarray:
    return a.reshape(1, 1, -1) if a.ndim != 3 else a


def save_checkpoint(path, model, config: dict, adam=None, extra: dict | None = None):
    """Write ``meta.txt`` plus one float64 GSMF record per tensor into ``path``/.

    Stored: model kind and shape info, config echo, parameters, batch-norm
    running statistics, Adam moments and step counter.
    """
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    meta = [f"kind = {model.kind}"]
    if model.kind == "unet":
        meta.append(f"widths = {','.join(map(str, model.cfg.encoder_widths))}")
        meta.append(f"leaky_slope = {model.cfg.leaky_slope!r}")
        meta.append(f"preset = {model.cfg.preset}")
    else:
        h, w = model.group.tensors[0].shape[1:]
        meta.append(f"field_shape = {h},{w}")
    meta.append(f"adam_step = {adam.step if adam is not None else 0}")
    for k, v in sorted((extra or {}).items()):
        meta.append(f"extra.{k} = {v}")
    for k, v in sorted(config.items()):
        meta.append(f"config.{k} = {v}")
    records = []

    def add(name, arr):
        arr = np.asarray(arr, dtype=np.float64)
        records.append(f"tensor {name} {len(records)} {'x'.join(map(str, arr.shape)) or 'scalar'}")
        (d / f"t{len(records) - 1:04d}.gsmf").write_bytes(encode_gsmf(_as3d(arr), version=2))

    for g in model.groups:
        for i, t in enumerate(g.tensors):
            add(f"param:{g.layer_id}:{i}", t)
    for k, v in sorted(model.buffers().items()):
        add(f"buffer:{k}", v)
    if adam is not None:
        for k in sorted(adam.m):
            add(f"adam_m:{k}", adam.m[k])
            add(f"adam_v:{k}", adam.v[k])
    (d / "meta.txt").write_text("\n".join(meta + records) + "\n")


def load_checkpoint(path):
    """Rebuild ``(model, adam_state, config, extra)`` from :func:`save_checkpoint` output."""
    from .network import DirectField, UNet, UNetConfig
    from .surgery import AdamState

    d = Path(path)
    meta, tensors, config, extra = {}, {}, {}, {}
    for line in (d / "meta.txt").read_text().splitlines():
        if line.startswith("tensor "):
            _, name, idx, shape = line.split(" ")
            arr = read_gsmf(d / f"t{int(idx):04d}.gsmf")
            shp = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            tensors[name] = arr.reshape(shp)
        elif "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            if k.startswith("config."):
                config[k[7:]] = v
            elif k.startswith("extra."):
                extra[k[6:]] = v
            else:
                meta[k] = v
    if meta.get("kind") == "unet":
        widths = tuple(int(s) for s in meta["widths"].split(","))
        model = UNet(UNetConfig(widths, float(meta["leaky_slope"]), meta["preset"]))
    elif meta.get("kind") == "direct_field":
        h, w = (int(s) for s in meta["field_shape"].split(","))
        model = DirectField(h, w)
    else:
        raise FormatError(f"{d / 'meta.txt'}: unknown model kind {meta.get('kind')!r}")
    for g in model.groups:
        for i in range(len(g.tensors)):
            g.tensors[i][...] = tensors.pop(f"param:{g.layer_id}:{i}")
    model.load_buffers({k[7:]: tensors.pop(k) for k in list(tensors) if k.startswith("buffer:")})
    adam = AdamState(step=int(meta.get("adam_step", 0)))
    for k in list(tensors):
        if k.startswith("adam_m:"):
            adam.m[k[7:]] = tensors.pop(k)
        elif k.startswith("adam_v:"):
            adam.v[k[7:]] = tensors.pop(k)
    if tensors:
        raise FormatError(f"{d}: unexpected tensors {sorted(tensors)}")
    return model, adam, config, extra

