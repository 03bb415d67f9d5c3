"""Binary weight-file and checkpoint formats.

Weight file: magic "CSDN", format version u16, the network config as a
fixed-order little-endian block, then one record per tensor (learnable
parameters and normalization running stats alike, the latter flagged
non-learnable). Records are sorted by name so files are reproducible.

Checkpoint: a weight file, then a has-optimizer byte, the optimizer
moments in the same record encoding, and a fixed-size trailer (epoch,
global step, master seed, best validation score).
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor
from .model import CONFIG_FIELDS, CSDN, NetworkConfig

MAGIC = b"CSDN"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class FormatError(ValueError):
    pass


def _pack_config(cfg: NetworkConfig) -> bytes:
    out = b""
    for name, kind in CONFIG_FIELDS:
        v = getattr(cfg, name)
        if kind == "i":
            out += struct.pack("<i", v)
        elif kind == "i3":
            out += struct.pack("<3i", *v)
        elif kind == "f":
            out += struct.pack("<d", v)
        else:
            raise AssertionError(kind)
    return out


def _unpack_config(buf: memoryview, off: int) -> tuple[NetworkConfig, int]:
    vals = {}
    for name, kind in CONFIG_FIELDS:
        if kind == "i":
            vals[name], = struct.unpack_from("<i", buf, off)
            off += 4
        elif kind == "i3":
            vals[name] = tuple(struct.unpack_from("<3i", buf, off))
            off += 12
        elif kind == "f":
            vals[name], = struct.unpack_from("<d", buf, off)
            off += 8
    return NetworkConfig(**vals), off


def _pack_record(name: str, arr: np.ndarray, learnable: bool) -> bytes:
    nb = name.encode("utf-8")
    if arr.dtype not in _DTYPE_TAGS:
        raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
    head = struct.pack("<H", len(nb)) + nb
    head += struct.pack("<BBB", _DTYPE_TAGS[arr.dtype], int(learnable),
                        arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return head + little.tobytes()


def _unpack_record(buf: memoryview, off: int):
    if off + 2 > len(buf):
        raise FormatError("truncated record header")
    nlen, = struct.unpack_from("<H", buf, off)
    off += 2
    name = bytes(buf[off:off + nlen]).decode("utf-8")
    off += nlen
    tag, learnable, rank = struct.unpack_from("<BBB", buf, off)
    off += 3
    if tag not in _TAG_DTYPES:
        raise FormatError(f"{name}: unknown dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dtype.itemsize
    if off + nbytes > len(buf):
        raise FormatError(f"{name}: truncated tensor data")
    arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=count,
                        offset=off).astype(dtype).reshape(dims)
    off += nbytes
    return name, arr, bool(learnable), off


def _net_records(net: CSDN):
    params = sorted(net.named_parameters())
    buffers = sorted(net.named_buffers())
    for name, t in params:
        yield name, t.data, True
    for name, t in buffers:
        yield name, t.data, False


def weights_bytes(net: CSDN) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), _pack_config(net.config)]
    parts.append(struct.pack("<I", sum(1 for _ in _net_records(net))))
    for name, arr, learnable in _net_records(net):
        parts.append(_pack_record(name, arr, learnable))
    return b"".join(parts)


def save_weights(path: str, net: CSDN):
    with open(path, "wb") as fh:
        fh.write(weights_bytes(net))


def _read_weights(buf: memoryview):
    if bytes(buf[:4]) != MAGIC:
        raise FormatError("bad magic; not a CSDN weight file")
    version, = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    cfg, off = _unpack_config(buf, 6)
    n_records, = struct.unpack_from("<I", buf, off)
    off += 4
    records = {}
    dtype = np.dtype(np.float32)
    for _ in range(n_records):
        name, arr, learnable, off = _unpack_record(buf, off)
        records[name] = (arr, learnable)
        if learnable:
            dtype = arr.dtype
    net = CSDN(cfg, seed=0, dtype=dtype)
    known = dict(net.named_parameters())
    known.update(net.named_buffers())
    for name, (arr, _learnable) in records.items():
        if name not in known:
            raise FormatError(f"unknown parameter name {name!r} in file")
        t = known[name]
        if tuple(arr.shape) != t.shape:
            raise FormatError(f"shape mismatch for {name!r}: file "
                              f"{tuple(arr.shape)} vs model {t.shape}")
        t.data = np.ascontiguousarray(arr.astype(t.dtype, copy=False))
    missing = sorted(set(known) - set(records))
    if missing:
        raise FormatError(f"weight file is missing tensors: {missing[:3]}")
    return net, off


def load_weights(path: str) -> CSDN:
    with open(path, "rb") as fh:
        buf = memoryview(fh.read())
    net, _off = _read_weights(buf)
    return net


def save_checkpoint(path: str, net: CSDN, opt=None, *, epoch: int,
                    global_step: int, master_seed: int,
                    best_val_dsc: float):
    parts = [weights_bytes(net)]
    if opt is not None:
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<Q", opt.step_count))
        names = sorted(opt.m)
        parts.append(struct.pack("<I", len(names)))
        for name in names:
            parts.append(_pack_record("m:" + name, opt.m[name], True))
            parts.append(_pack_record("v:" + name, opt.v[name], True))
    else:
        parts.append(struct.pack("<B", 0))
    parts.append(struct.pack("<IQQd", epoch, global_step, master_seed,
                             best_val_dsc))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path: str):
    """Returns (net, opt_state | None, trailer dict). opt_state holds
    step count plus m/v arrays keyed by parameter name."""
    with open(path, "rb") as fh:
        buf = memoryview(fh.read())
    net, off = _read_weights(buf)
    has_opt, = struct.unpack_from("<B", buf, off)
    off += 1
    opt_state = None
    if has_opt:
        step, = struct.unpack_from("<Q", buf, off)
        off += 8
        n_pairs, = struct.unpack_from("<I", buf, off)
        off += 4
        m, v = {}, {}
        for _ in range(n_pairs):
            name, arr, _l, off = _unpack_record(buf, off)
            m[name.removeprefix("m:")] = arr
            name, arr, _l, off = _unpack_record(buf, off)
            v[name.removeprefix("v:")] = arr
        opt_state = {"step": step, "m": m, "v": v}
    if off + 28 > len(buf):
        raise FormatError("truncated checkpoint trailer")
    epoch, global_step, master_seed, best = struct.unpack_from("<IQQd", buf,
                                                               off)
    trailer = {"epoch": epoch, "global_step": global_step,
               "master_seed": master_seed, "best_val_dsc": best}
    return net, opt_state, trailer
