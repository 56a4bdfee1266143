"""Bit-exact on-disk formats: named-tensor checkpoints and HDF5 stacks.

Checkpoints are a self-describing binary archive: an ASCII header whose
first line carries the total header size, one ``tensor`` line per array
(name, dtype, shape, payload offset, byte length), an 8-byte-aligned
little-endian float32 payload, and a trailing sha256 line computed over
everything before it.  Saving the result of a load reproduces the input
file byte for byte.

Volumes and sinogram stacks live in HDF5 under ``/exchange/data`` as
little-endian float32, so facility datasets that follow the common
data-exchange layout open without conversion.  Every writer records a
content digest that loaders re-verify.
"""

from __future__ import annotations

import hashlib
import os
from collections import OrderedDict
from pathlib import Path

import h5py
import numpy as np
import torch

from .errors import (
    CorruptFileError,
    IncompatibleCheckpointError,
    InvalidSpecError,
    IOFailureError,
)
from .phantoms import Volume
from .projector import Sinogram

CHECKPOINT_MAGIC = "tomodenoise-checkpoint v1"
_DIGEST_LINE_LEN = 72  # b"sha256 " + 64 hex digits + b"\n"
_VOLUME_RESERVED = ("digest", "provenance", "voxel_size")
_SINOGRAM_RESERVED = ("digest", "kind")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def array_digest(arr: np.ndarray) -> str:
    """Digest of an array's raw little-endian bytes, independent of layout."""
    return sha256_bytes(np.ascontiguousarray(arr).tobytes())


def file_digest(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
    except OSError as e:
        raise IOFailureError(f"cannot read {path}: {e.strerror or e}") from e
    return h.hexdigest()


def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise IOFailureError(f"cannot write {path}: {e.strerror or e}") from e


def _as_float32_array(name: str, value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    value = np.asarray(value)
    if value.ndim == 0:
        raise InvalidSpecError(f"tensor {name} must have at least one dimension")
    return np.ascontiguousarray(value, dtype="<f4")


def save_tensors(path, tensors, meta=None) -> str:
    """Write a named-tensor checkpoint; returns the hex content digest.

    Tensor order is preserved; meta keys are written sorted.  Values are
    stored as little-endian float32 regardless of input dtype.
    """
    path = Path(path)
    meta = dict(meta or {})
    arrays = OrderedDict()
    for name, value in tensors.items():
        if not name or not name.isascii() or any(c.isspace() for c in name):
            raise InvalidSpecError(f"bad tensor name {name!r}")
        arrays[name] = _as_float32_array(name, value)

    lines = []
    for key in sorted(meta):
        val = str(meta[key])
        if not key or not key.isascii() or "=" in key or any(c.isspace() for c in key):
            raise InvalidSpecError(f"bad meta key {key!r}")
        if "\n" in val or not val.isascii():
            raise InvalidSpecError(f"meta value for {key} must be single-line ASCII")
        lines.append(f"meta {key}={val}")
    offset = 0
    rows = []
    for name, arr in arrays.items():
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} f4 {shape} {offset} {arr.nbytes}")
        rows.append((arr, offset))
        offset = (offset + arr.nbytes + 7) & ~7  # next tensor starts 8-aligned
    lines.append("payload")
    body = ("\n".join(lines) + "\n").encode("ascii")

    first_line_len = len(CHECKPOINT_MAGIC) + 1 + 8 + 1  # "magic NNNNNNNN\n"
    base = first_line_len + len(body)
    header_size = (base + 7) & ~7
    padding = b"" if header_size == base else b" " * (header_size - base - 1) + b"\n"
    header = f"{CHECKPOINT_MAGIC} {header_size:08d}\n".encode("ascii") + body + padding

    payload = bytearray(offset)
    for arr, off in rows:
        payload[off : off + arr.nbytes] = arr.tobytes()
    blob = header + bytes(payload)
    digest = sha256_bytes(blob)
    _atomic_write_bytes(path, blob + f"sha256 {digest}\n".encode("ascii"))
    return digest


def load_tensors(path):
    """Read a named-tensor checkpoint -> (tensors, meta) after a digest check."""
    path = Path(path)
    if not path.is_file():
        raise IOFailureError(f"no such checkpoint file: {path}")
    data = path.read_bytes()
    magic = CHECKPOINT_MAGIC.encode("ascii")
    if len(data) < _DIGEST_LINE_LEN + len(magic) or not data.startswith(magic + b" "):
        raise CorruptFileError(f"{path} is not a named-tensor checkpoint")
    tail = data[-_DIGEST_LINE_LEN:]
    if not tail.startswith(b"sha256 ") or not tail.endswith(b"\n"):
        raise CorruptFileError(f"{path}: trailing digest line is malformed")
    stored = tail[7:-1].decode("ascii", "replace")
    actual = sha256_bytes(data[:-_DIGEST_LINE_LEN])
    if stored != actual:
        raise CorruptFileError(
            f"{path}: digest mismatch (stored {stored[:12]}..., actual {actual[:12]}...)"
        )

    try:
        first = data[: data.index(b"\n")].decode("ascii")
        header_size = int(first.rsplit(" ", 1)[1])
        if not len(first) + 1 <= header_size <= len(data) - _DIGEST_LINE_LEN:
            raise ValueError(f"header size {header_size} out of range")
        header = data[:header_size].decode("ascii")
    except (ValueError, IndexError, UnicodeDecodeError) as e:
        raise CorruptFileError(f"{path}: unreadable header ({e})") from e
    payload = data[header_size:-_DIGEST_LINE_LEN]

    tensors = OrderedDict()
    meta = {}
    for line in header.splitlines()[1:]:
        line = line.strip()
        if not line:
            continue
        if line == "payload":
            break
        if line.startswith("meta "):
            key, _, val = line[len("meta ") :].partition("=")
            meta[key] = val
            continue
        fields = line.split()
        if len(fields) != 6 or fields[0] != "tensor":
            raise CorruptFileError(f"{path}: unrecognized header line {line[:60]!r}")
        _, name, dtype, shape_s, off_s, nbytes_s = fields
        if dtype != "f4":
            raise CorruptFileError(f"{path}: unsupported tensor dtype {dtype}")
        try:
            shape = tuple(int(s) for s in shape_s.split(","))
            off, nbytes = int(off_s), int(nbytes_s)
        except ValueError as e:
            raise CorruptFileError(f"{path}: bad tensor line {line[:60]!r}") from e
        if nbytes != 4 * int(np.prod(shape)) or off < 0 or off + nbytes > len(payload):
            raise CorruptFileError(f"{path}: tensor {name} does not fit its payload slot")
        tensors[name] = (
            np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off)
            .reshape(shape)
            .copy()
        )
    return tensors, meta


def read_checkpoint_digest(path) -> str:
    """The verified content digest of a checkpoint file."""
    load_tensors(path)
    with open(path, "rb") as f:
        f.seek(-_DIGEST_LINE_LEN, os.SEEK_END)
        return f.read()[7:-1].decode("ascii")


def save_generator_checkpoint(path, generator, meta=None) -> str:
    """Serialize generator parameters with depth and width recorded."""
    full = {"depth": str(generator.d), "base_channels": str(generator.base_channels)}
    full.update(meta or {})
    return save_tensors(path, generator.state_dict(), full)


def load_generator_checkpoint(path):
    """Rebuild a generator from a checkpoint -> (generator, meta).

    Tensor names and shapes are checked against the layer table of a
    freshly built generator of the recorded depth before any copy.
    """
    from .network import build_generator  # deferred: formats stays torch-layout-agnostic

    tensors, meta = load_tensors(path)
    for key in ("depth", "base_channels"):
        if key not in meta:
            raise IncompatibleCheckpointError(f"{path}: checkpoint lacks meta key {key}")
    try:
        depth, base = int(meta["depth"]), int(meta["base_channels"])
    except ValueError as e:
        raise IncompatibleCheckpointError(f"{path}: non-integer depth/base_channels") from e
    generator = build_generator(depth, base, seed=0)
    expected = {k: tuple(v.shape) for k, v in generator.state_dict().items()}
    unknown = sorted(set(tensors) - set(expected))
    if unknown:
        raise IncompatibleCheckpointError(
            f"unknown tensor name(s) for a depth-{depth} generator: {', '.join(unknown)}"
        )
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise IncompatibleCheckpointError(f"checkpoint is missing tensor(s): {', '.join(missing)}")
    for name, arr in tensors.items():
        if tuple(arr.shape) != expected[name]:
            raise IncompatibleCheckpointError(
                f"tensor {name} has shape {tuple(arr.shape)}, expected {expected[name]}"
            )
    generator.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return generator, meta


def _attr_store(value):
    if isinstance(value, (bool, np.bool_)):
        return np.bool_(value)
    if isinstance(value, (int, np.integer)):
        return np.int64(value)
    if isinstance(value, (float, np.floating)):
        return np.float64(value)
    if isinstance(value, str):
        return value
    raise InvalidSpecError(f"metadata value {value!r} is not a scalar or string")


def _attr_native(value):
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, bytes):
        return value.decode("utf-8")
    return value


def _open_readable(path) -> h5py.File:
    path = Path(path)
    if not path.is_file():
        raise IOFailureError(f"no such file: {path}")
    try:
        return h5py.File(path, "r")
    except OSError as e:
        raise CorruptFileError(f"{path} is not a readable HDF5 file ({e})") from e


def save_volume(path, volume: Volume, extra_attrs=None) -> str:
    """Write a volume to ``/exchange/data`` (D, H, W) float32; returns its digest.

    Volume meta and extra_attrs land as flat dataset attributes, so a
    loaded volume saves back to a byte-identical file.
    """
    path = Path(path)
    data = np.ascontiguousarray(volume.data, dtype="<f4")
    digest = sha256_bytes(data.tobytes())
    attrs = dict(volume.meta or {})
    attrs.update(extra_attrs or {})
    for key in _VOLUME_RESERVED:
        if key in attrs:
            raise InvalidSpecError(f"metadata key {key} is reserved")
    attrs.update(provenance=volume.provenance, voxel_size=float(volume.voxel_size), digest=digest)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with h5py.File(tmp, "w") as f:
            ds = f.create_dataset("/exchange/data", data=data, dtype="<f4", track_times=False)
            for key in sorted(attrs):
                ds.attrs[key] = _attr_store(attrs[key])
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise IOFailureError(f"cannot write {path}: {e.strerror or e}") from e
    return digest


def load_volume(path) -> Volume:
    """Read a volume and verify its stored digest if one is present.

    Files produced elsewhere may omit our attributes; they load with
    provenance ``low_dose`` and voxel size 1.
    """
    with _open_readable(path) as f:
        if "exchange" not in f or "data" not in f["exchange"]:
            raise CorruptFileError(f"{path}: missing /exchange/data dataset")
        ds = f["exchange/data"]
        if ds.ndim != 3:
            raise CorruptFileError(f"{path}: /exchange/data must be 3D, got {ds.ndim}D")
        data = np.asarray(ds[...], dtype=np.float32)
        attrs = {k: _attr_native(v) for k, v in ds.attrs.items()}
    stored = attrs.pop("digest", None)
    if stored is not None:
        actual = sha256_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
        if stored != actual:
            raise CorruptFileError(f"{path}: volume digest mismatch")
    provenance = attrs.pop("provenance", "low_dose")
    voxel_size = float(attrs.pop("voxel_size", 1.0))
    return Volume(data, voxel_size=voxel_size, provenance=provenance, meta=attrs)


def save_sinogram_stack(path, sinograms, extra_attrs=None) -> str:
    """Write same-geometry sinograms: /exchange/data (D, angles, bins) float32.

    Angles go to ``/exchange/theta`` in radians.  Meta keys shared with
    equal values across slices become attributes; keys whose numeric
    values differ per slice become (D,) datasets under ``/exchange/meta``.
    Counts survive the float32 round trip exactly below 2**24.
    """
    path = Path(path)
    sinos = list(sinograms)
    if not sinos:
        raise InvalidSpecError("a sinogram stack needs at least one slice")
    head = sinos[0]
    for s in sinos[1:]:
        if (
            s.kind != head.kind
            or s.data.shape != head.data.shape
            or not np.array_equal(s.angles, head.angles)
        ):
            raise InvalidSpecError("sinograms in a stack must share kind, shape and angles")
        if set(s.meta) != set(head.meta):
            raise InvalidSpecError("sinograms in a stack must share meta keys")

    data = np.ascontiguousarray(np.stack([s.data for s in sinos]), dtype="<f4")
    theta = np.ascontiguousarray(head.angles, dtype="<f8")
    digest = sha256_bytes(data.tobytes() + theta.tobytes())

    common, per_slice = {}, {}
    for key in head.meta:
        values = [s.meta[key] for s in sinos]
        if all(v == values[0] for v in values[1:]) or len(values) == 1:
            common[key] = values[0]
        else:
            try:
                per_slice[key] = np.asarray(values, dtype="<f8")
            except (TypeError, ValueError) as e:
                raise InvalidSpecError(
                    f"per-slice meta key {key} must be numeric to be stored"
                ) from e
    common.update(extra_attrs or {})
    for key in _SINOGRAM_RESERVED:
        if key in common:
            raise InvalidSpecError(f"metadata key {key} is reserved")
    common.update(kind=head.kind, digest=digest)

    tmp = path.with_name(path.name + ".tmp")
    try:
        with h5py.File(tmp, "w") as f:
            ds = f.create_dataset("/exchange/data", data=data, dtype="<f4", track_times=False)
            th = f.create_dataset("/exchange/theta", data=theta, dtype="<f8", track_times=False)
            th.attrs["units"] = "radians"
            for key in sorted(common):
                ds.attrs[key] = _attr_store(common[key])
            for key in sorted(per_slice):
                f.create_dataset(f"/exchange/meta/{key}", data=per_slice[key], track_times=False)
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise IOFailureError(f"cannot write {path}: {e.strerror or e}") from e
    return digest


def load_sinogram_stack(path):
    """Read a sinogram stack -> (list of Sinogram, stack attributes).

    ``/exchange/theta`` in degrees (the facility convention) is converted
    to radians.  The returned attribute dict excludes the digest, which is
    verified here.
    """
    with _open_readable(path) as f:
        if "exchange" not in f or "data" not in f["exchange"]:
            raise CorruptFileError(f"{path}: missing /exchange/data dataset")
        ds = f["exchange/data"]
        if ds.ndim != 3:
            raise CorruptFileError(f"{path}: /exchange/data must be 3D, got {ds.ndim}D")
        if "theta" not in f["exchange"]:
            raise CorruptFileError(f"{path}: missing /exchange/theta dataset")
        data = np.asarray(ds[...], dtype=np.float64)
        th = f["exchange/theta"]
        theta = np.asarray(th[...], dtype=np.float64)
        if str(_attr_native(th.attrs.get("units", "radians"))).lower().startswith("deg"):
            theta = np.deg2rad(theta)
        attrs = {k: _attr_native(v) for k, v in ds.attrs.items()}
        per_slice = {}
        if "meta" in f["exchange"]:
            for key, node in f["exchange/meta"].items():
                per_slice[key] = np.asarray(node[...], dtype=np.float64)
    stored = attrs.pop("digest", None)
    if stored is not None:
        actual = sha256_bytes(
            np.ascontiguousarray(data, dtype="<f4").tobytes()
            + np.ascontiguousarray(theta, dtype="<f8").tobytes()
        )
        if stored != actual:
            raise CorruptFileError(f"{path}: sinogram digest mismatch")
    kind = attrs.pop("kind", "line_integral")
    for key, values in per_slice.items():
        if len(values) != data.shape[0]:
            raise CorruptFileError(f"{path}: per-slice meta {key} has wrong length")

    sinograms = []
    for i in range(data.shape[0]):
        meta = dict(attrs)
        for key, values in per_slice.items():
            meta[key] = float(values[i])
        sinograms.append(Sinogram(data[i], theta, kind=kind, meta=meta))
    return sinograms, attrs
