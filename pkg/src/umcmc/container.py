"""Binary named-array container shared by checkpoints, observations and sample archives.

Layout (little-endian)::

    b"UMC1" | u32 version | u32 n_arrays
    per array: u16 name_len | name utf-8 | u8 rank | u64 extent * rank | f64 data (row-major)
    u64 config_len | config utf-8 (JSON)
    16 bytes rng state
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .linops import Circulant2D, Dense, FourierMask, GaussianLikelihood, Identity, LinearOperator

MAGIC = b"UMC1"
VERSION = 1
RNG_STATE_BYTES = 16


class ContainerFormatError(ValueError):
    pass


def pack_rng_state(seed: int, counter: int) -> bytes:
    return struct.pack("<QQ", int(seed) & 0xFFFFFFFFFFFFFFFF, int(counter) & 0xFFFFFFFFFFFFFFFF)


def unpack_rng_state(raw: bytes) -> tuple[int, int]:
    return struct.unpack("<QQ", raw)


def dumps(arrays: dict[str, np.ndarray], config: dict, rng_state: bytes = bytes(RNG_STATE_BYTES)) -> bytes:
    if len(rng_state) != RNG_STATE_BYTES:
        raise ValueError(f"rng state must be {RNG_STATE_BYTES} bytes")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        a = np.asarray(arr)
        if np.iscomplexobj(a):
            raise ContainerFormatError(f"array {name!r} is complex; store real and imaginary parts")
        a = np.asarray(a, dtype="<f8")  # tobytes() is row-major; ascontiguousarray would promote 0-d
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(rng_state)
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict, bytes]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerFormatError("truncated container")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise ContainerFormatError("bad magic; not a UMC1 container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arrays[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(shape).astype(np.float64)
    (clen,) = struct.unpack("<Q", take(8))
    config = json.loads(bytes(take(clen)).decode("utf-8"))
    rng_state = bytes(take(RNG_STATE_BYTES))
    if pos != len(view):
        raise ContainerFormatError("trailing bytes after rng state")
    return arrays, config, rng_state


def save(path: str | os.PathLike, arrays: dict[str, np.ndarray], config: dict,
         rng_state: bytes = bytes(RNG_STATE_BYTES)) -> None:
    data = dumps(arrays, config, rng_state)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict, bytes]:
    with open(path, "rb") as fh:
        return loads(fh.read())


# --- operators and observations ---------------------------------------------

def operator_to_record(op: LinearOperator, prefix: str = "op/") -> tuple[dict, dict]:
    """Split an operator into (arrays, JSON spec)."""
    if isinstance(op, Identity):
        return {}, {"kind": "identity", "shape": list(op.shape)}
    if isinstance(op, Circulant2D):
        return {prefix + "kernel": op.kernel}, {"kind": "circulant", "image_shape": list(op.image_shape)}
    if isinstance(op, FourierMask):
        return ({prefix + "mask_re": op.mask.real, prefix + "mask_im": op.mask.imag}, {"kind": "mask"})
    if isinstance(op, Dense):
        return {prefix + "matrix": op.matrix}, {"kind": "dense"}
    raise ContainerFormatError(f"cannot serialise operator {type(op).__name__}")


def operator_from_record(arrays: dict, spec: dict, prefix: str = "op/") -> LinearOperator:
    kind = spec["kind"]
    if kind == "identity":
        return Identity(tuple(spec["shape"]))
    if kind == "circulant":
        return Circulant2D(arrays[prefix + "kernel"], tuple(spec["image_shape"]))
    if kind == "mask":
        return FourierMask(arrays[prefix + "mask_re"] + 1j * arrays[prefix + "mask_im"])
    if kind == "dense":
        return Dense(arrays[prefix + "matrix"])
    raise ContainerFormatError(f"unknown operator kind {kind!r}")


def save_observations(path, observations, truths=None) -> None:
    """Write a list of observations (and optional ground truths) to one container."""
    arrays, specs = {}, []
    for i, ob in enumerate(observations):
        a, spec = operator_to_record(ob.operator, prefix=f"{i}/op/")
        arrays.update(a)
        arrays[f"{i}/y"] = ob.y
        if truths is not None:
            arrays[f"{i}/x"] = truths[i]
        specs.append({"operator": spec, "sigma_y": float(ob.likelihood.sigma_y)})
    save(path, arrays, {"type": "observations", "items": specs})


def load_observations(path):
    """Inverse of :func:`save_observations`; returns (observations, truths or None)."""
    from .kernels import Observation

    arrays, config, _ = load(path)
    if config.get("type") != "observations":
        raise ContainerFormatError(f"{path} is not an observation file")
    obs, truths = [], []
    for i, spec in enumerate(config["items"]):
        op = operator_from_record(arrays, spec["operator"], prefix=f"{i}/op/")
        obs.append(Observation(arrays[f"{i}/y"], GaussianLikelihood(op, spec["sigma_y"])))
        if f"{i}/x" in arrays:
            truths.append(arrays[f"{i}/x"])
    return obs, (truths if len(truths) == len(obs) else None)
