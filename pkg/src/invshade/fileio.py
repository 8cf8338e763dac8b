"""Readers and writers: OBJ subset, skin-weight sidecars, PFM, PNG previews,
field containers, probe images and JSON documents."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .fields import UVField
from .geom import TriangleMesh

# ---------------------------------------------------------------------------
# OBJ


def read_obj(path, weights_path=None) -> TriangleMesh:
    """Triangles only; ``f v/vt/vn`` with 1-based (or negative) indices."""
    pos, uvs, faces, fuv = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                pos.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                corners = parts[1:]
                if len(corners) != 3:
                    raise ValueError(f"{path}:{lineno}: only triangles are supported, got a {len(corners)}-gon")
                vi, ti = [], []
                for c in corners:
                    fields = c.split("/")
                    vi.append(_obj_index(fields[0], len(pos)))
                    if len(fields) > 1 and fields[1]:
                        ti.append(_obj_index(fields[1], len(uvs)))
                faces.append(vi)
                if ti:
                    if len(ti) != 3:
                        raise ValueError(f"{path}:{lineno}: mixed corners with and without vt")
                    fuv.append(ti)
            # vn and everything else: normals are recomputed
    if fuv and len(fuv) != len(faces):
        raise ValueError(f"{path}: some faces lack texture indices")
    weights = read_weights(weights_path) if weights_path is not None else None
    uv_arr = np.array(uvs) if uvs else None
    face_uvs = None
    if fuv:
        face_uvs = np.array(fuv)
        if np.array_equal(face_uvs, np.array(faces)) and len(uvs) == len(pos):
            face_uvs = None
    return TriangleMesh(np.array(pos).reshape(-1, 3), np.array(faces).reshape(-1, 3), uvs=uv_arr,
                        face_uvs=face_uvs, skin_weights=weights)


def _obj_index(token: str, count: int) -> int:
    i = int(token)
    return i - 1 if i > 0 else count + i


def write_obj(path, mesh: TriangleMesh, weights_path=None):
    with open(path, "w") as fh:
        for p in mesh.positions:
            fh.write("v %r %r %r\n" % tuple(float(c) for c in p))
        if mesh.uvs is not None:
            for t in mesh.uvs:
                fh.write("vt %r %r\n" % (float(t[0]), float(t[1])))
        normals = mesh.normals / np.linalg.norm(mesh.normals, axis=1, keepdims=True)
        for n in normals:
            fh.write("vn %r %r %r\n" % tuple(float(c) for c in n))
        tix = mesh.corner_uv_indices
        for f, t in zip(mesh.faces, tix):
            if mesh.uvs is not None:
                fh.write("f " + " ".join(f"{v + 1}/{u + 1}/{v + 1}" for v, u in zip(f, t)) + "\n")
            else:
                fh.write("f " + " ".join(f"{v + 1}//{v + 1}" for v in f) + "\n")
    if weights_path is not None and mesh.skin_weights is not None:
        write_weights(weights_path, mesh.skin_weights)


def read_weights(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2)


def write_weights(path, weights: np.ndarray):
    np.savetxt(path, weights, fmt="%.17g")


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, image: np.ndarray):
    """Little-endian float32, rows stored bottom-to-top as the format requires."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        header = "Pf"
        h, w = img.shape
    elif img.ndim == 3 and img.shape[2] == 3:
        header = "PF"
        h, w = img.shape[:2]
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise OSError(f"{path}: truncated PFM header at byte {pos}")
        tokens.append((data[start:pos], start))
    pos += 1  # single whitespace byte ends the header
    magic, at = tokens[0]
    if magic not in (b"PF", b"Pf"):
        raise OSError(f"{path}: bad PFM magic {magic!r} at byte {at}")
    try:
        w, h = int(tokens[1][0]), int(tokens[2][0])
    except ValueError:
        raise OSError(f"{path}: bad PFM dimensions at byte {tokens[1][1]}") from None
    try:
        scale = float(tokens[3][0])
    except ValueError:
        raise OSError(f"{path}: bad PFM scale at byte {tokens[3][1]}") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise OSError(f"{path}: invalid PFM header values at byte {tokens[1][1]}")
    ch = 3 if magic == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * ch
    if len(data) - pos < 4 * n:
        raise OSError(f"{path}: PFM payload truncated at byte {len(data)}, expected {pos + 4 * n}")
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos).astype(np.float32)
    arr = arr.reshape(h, w, ch) if ch == 3 else arr.reshape(h, w)
    return arr[::-1].copy()


# ---------------------------------------------------------------------------
# PNG previews


def write_png(path, image: np.ndarray, gamma: float = 2.2):
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if gamma != 1.0:
        img = img ** (1.0 / gamma)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def read_png(path, gamma: float = 2.2) -> np.ndarray:
    img = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return img ** gamma if gamma != 1.0 else img


def encode_normals(normals: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    enc = (np.asarray(normals) + 1.0) * 0.5
    if mask is not None:
        enc = np.where(mask[..., None], enc, 0.0)
    return enc


def decode_normals(encoded: np.ndarray) -> np.ndarray:
    return np.asarray(encoded) * 2.0 - 1.0


def write_normal_png(path, normals: np.ndarray, mask=None):
    write_png(path, encode_normals(normals, mask), gamma=1.0)


def read_normal_png(path) -> np.ndarray:
    return decode_normals(read_png(path, gamma=1.0))


# ---------------------------------------------------------------------------
# field containers

FIELD_MAGIC = b"UVFIELD1"
_FIELD_HEADER = struct.Struct("<8sIIIIcdd")


def write_field(path, field: UVField, dtype: str = "float64"):
    """Header (magic, W, H, C, F, dtype code, clamp lo, clamp hi) then row-major nodes.

    float64 payloads round-trip exactly; float32 is accepted for compact dumps.
    """
    code = {"float64": b"d", "float32": b"f"}[dtype]
    w, h = field.resolution
    lo, hi = field.clamp if field.clamp is not None else (np.nan, np.nan)
    with open(path, "wb") as fh:
        fh.write(_FIELD_HEADER.pack(FIELD_MAGIC, w, h, field.channels, field.frames, code, lo, hi))
        fh.write(field.values.astype("<" + code.decode()).tobytes())
        if field.residuals is not None:
            fh.write(field.residuals.astype("<" + code.decode()).tobytes())


def read_field(path) -> UVField:
    data = Path(path).read_bytes()
    if len(data) < _FIELD_HEADER.size:
        raise OSError(f"{path}: truncated field header at byte {len(data)}")
    magic, w, h, c, f, code, lo, hi = _FIELD_HEADER.unpack_from(data, 0)
    if magic != FIELD_MAGIC:
        raise OSError(f"{path}: bad field magic {magic!r} at byte 0")
    if code not in (b"d", b"f"):
        raise OSError(f"{path}: bad dtype code {code!r} at byte 24")
    dt = np.dtype("<" + code.decode())
    n = w * h * c
    need = _FIELD_HEADER.size + dt.itemsize * n * (1 + f)
    if len(data) != need:
        raise OSError(f"{path}: field payload size mismatch at byte {len(data)}, expected {need}")
    values = np.frombuffer(data, dtype=dt, count=n, offset=_FIELD_HEADER.size).reshape(h, w, c)
    residuals = None
    if f:
        residuals = np.frombuffer(data, dtype=dt, count=n * f,
                                  offset=_FIELD_HEADER.size + dt.itemsize * n).reshape(f, h, w, c)
    clamp = None if np.isnan(lo) else (lo, hi)
    return UVField(values.astype(np.float64), clamp, None if residuals is None else residuals.astype(np.float64))


def export_field_channels(directory, stem: str, field: UVField):
    """One lossless float image per channel, for inspection."""
    directory = Path(directory)
    for ch in range(field.channels):
        write_pfm(directory / f"{stem}_c{ch}.pfm", field.values[..., ch])


# ---------------------------------------------------------------------------
# JSON


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=_json_default) + "\n")
