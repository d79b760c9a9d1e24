"""On-disk formats: tensor blobs, shard manifests, checkpoints, PGM, OBJ.

All integers are little-endian.  A tensor blob is::

    u32 name_len | name (UTF-8) | u8 dtype | u32 ndim | u64 dims[ndim] | payload

with dtype codes 0 = f32, 1 = f64, 2 = u8.  Integer arrays are stored as
f64 (exact up to 2**53) and booleans as u8.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .bodymodel import ModelTemplate

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}

CHECKPOINT_MAGIC = b"ANIMERCK"
CHECKPOINT_VERSION = 1
MANIFEST_SCHEMA = 1
DEPTH_MAGIC = b"DEPTHF32"


class FormatError(ValueError):
    pass


def _storable(array) -> np.ndarray:
    a = np.asarray(array)
    if a.dtype == np.bool_:
        return a.astype(np.uint8)
    if a.dtype.kind in "iu" and a.dtype != np.uint8:
        return a.astype(np.float64)
    if a.dtype not in CODES:
        raise FormatError(f"unsupported dtype {a.dtype}")
    return a


def encode_blob(name: str, array) -> bytes:
    a = _storable(array)
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", CODES[a.dtype], a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype=DTYPES[CODES[a.dtype]]).tobytes()


def decode_blob(buf: bytes, offset: int = 0):
    """Return ``(name, array, next_offset)``."""
    try:
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset:offset + n].decode("utf-8")
        offset += n
        code, ndim = struct.unpack_from("<BI", buf, offset)
        offset += 5
        shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
        offset += 8 * ndim
    except struct.error as exc:
        raise FormatError(f"truncated blob header at byte {offset}") from exc
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code} in blob {name!r}")
    dt = DTYPES[code]
    size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if offset + size > len(buf):
        raise FormatError(f"blob {name!r} payload runs past end of buffer")
    arr = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=offset).reshape(shape).copy()
    return name, arr, offset + size


def encode_blobs(tensors: dict) -> bytes:
    return b"".join(encode_blob(k, v) for k, v in tensors.items())


def decode_blobs(buf: bytes, offset: int = 0, end: int | None = None) -> dict[str, np.ndarray]:
    end = len(buf) if end is None else end
    out = {}
    while offset < end:
        name, arr, offset = decode_blob(buf, offset)
        out[name] = arr
    return out


def write_blobs(path, tensors: dict) -> None:
    Path(path).write_bytes(encode_blobs(tensors))


def read_blobs(path) -> dict[str, np.ndarray]:
    return decode_blobs(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(meta: dict, tensors: dict) -> bytes:
    js = json.dumps(meta, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(js)) + js + encode_blobs(tensors)


def decode_checkpoint(buf: bytes):
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, n = struct.unpack_from("<IQ", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = 20
    meta = json.loads(buf[start:start + n].decode("utf-8"))
    return meta, decode_blobs(buf, start + n)


def save_checkpoint(path, meta: dict, tensors: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(meta, tensors))
    os.replace(tmp, path)


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifests


def save_manifest(path, manifest: dict) -> None:
    data = dict(manifest)
    data["schema_version"] = MANIFEST_SCHEMA
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True))


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if data.get("schema_version") != MANIFEST_SCHEMA:
        raise FormatError(f"{path}: unsupported schema_version {data.get('schema_version')!r}")
    sizes = {}
    for rec in data.get("records", []):
        shard = rec["shard"]
        if shard not in sizes:
            sizes[shard] = (path.parent / shard).stat().st_size
        if rec["offset"] < 0 or rec["offset"] + rec["length"] > sizes[shard]:
            raise FormatError(f"{path}: record offset out of range in shard {shard}")
    return data


# ---------------------------------------------------------------------------
# rasters


def write_pgm(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    h, w = m.shape
    pix = np.where(m > 0, 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5" or len(parts) < 5:
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pix = np.frombuffer(buf[len(buf) - w * h:], dtype=np.uint8).reshape(h, w)
    return (pix > 0).astype(np.uint8)


def write_depth(path, depth: np.ndarray) -> None:
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<II", h, w) + d.tobytes())


def read_depth(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad depth magic")
    h, w = struct.unpack_from("<II", buf, 8)
    return np.frombuffer(buf, dtype="<f4", count=h * w, offset=16).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# meshes and templates


def export_obj(vertices: np.ndarray, faces: np.ndarray, path) -> None:
    """Wavefront OBJ: ``v`` lines at 9 significant digits, then 1-indexed ``f`` lines."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices, float)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, int)]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as exc:
        raise OSError(f"cannot write OBJ to {path}: {exc}") from exc


def load_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts, float).reshape(-1, 3), np.array(faces, int).reshape(-1, 3)


_TEMPLATE_FIELDS = ("rest_vertices", "faces", "shape_basis", "skin_weights", "joint_regressor",
                    "parents", "keypoint_map")


def template_tensors(t: ModelTemplate, prefix: str = "") -> dict:
    out = {prefix + k: getattr(t, k) for k in _TEMPLATE_FIELDS}
    out[prefix + "taxon"] = np.frombuffer(t.taxon.encode("utf-8"), np.uint8)
    return out


def template_from_tensors(tensors: dict, prefix: str = "") -> ModelTemplate:
    kw = {k: tensors[prefix + k] for k in _TEMPLATE_FIELDS}
    for k in ("faces", "parents", "keypoint_map"):
        kw[k] = kw[k].astype(np.int64)
    return ModelTemplate(taxon=bytes(tensors[prefix + "taxon"]).decode("utf-8"), **kw)
