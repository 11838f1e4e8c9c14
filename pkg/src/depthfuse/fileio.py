"""Plain-file formats: PLY clouds, PGM depth, PPM images, binary checkpoints, CSV traces."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .geometry import PointCloud, SparseDepthMap
from .renderer import RenderedImage, VoxelRadianceField

MODEL_MAGIC = b"DFMC"
FIELD_MAGIC = b"DFVF"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def file_hash(path) -> str:
    """Git-style blob hash (sha1 over "blob <size>\\0" + content)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# point clouds ---------------------------------------------------------------

def write_ply(path, cloud: PointCloud) -> None:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z", "property int tag",
             "end_header"]
    for (x, y, z), tag in zip(cloud.points, cloud.tags):
        lines.append(f"{float(x)!r} {float(y)!r} {float(z)!r} {int(tag)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n, props, i = None, [], 1
    while i < len(text) and text[i] != "end_header":
        parts = text[i].split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[-1])
        i += 1
    if n is None or props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: expected vertex element with x y z")
    rows = [r.split() for r in text[i + 1:i + 1 + n]]
    if len(rows) != n:
        raise FormatError(f"{path}: truncated vertex list")
    pts = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(n, 3)
    tags = np.array([int(r[3]) if len(r) > 3 else 0 for r in rows], dtype=np.int64)
    return PointCloud(pts, tags)


# depth maps -----------------------------------------------------------------

def _write_pgm16(path, values: np.ndarray) -> None:
    h, w = values.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + values.astype(">u2").tobytes())


def _read_pnm(path, magic: bytes):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic!r}, got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return w, h, maxval, data[pos + 1:]


def write_depth_pgm(path, depth_map: SparseDepthMap) -> Path:
    """Normalized depth quantized to 16 bits; the mask goes to a ``.mask.pgm`` sidecar."""
    path = Path(path)
    d = np.clip(depth_map.normalized(), 0.0, 1.0)
    _write_pgm16(path, np.round(d * 65535.0))
    mask_path = path.with_suffix(".mask.pgm")
    _write_pgm16(mask_path, depth_map.valid.astype(np.float64) * 65535.0)
    return mask_path


def read_depth_pgm(path):
    """Returns (normalized depth, valid mask)."""
    path = Path(path)
    out = []
    for p in (path, path.with_suffix(".mask.pgm")):
        w, h, maxval, body = _read_pnm(p, b"P5")
        dtype = ">u2" if maxval > 255 else "u1"
        out.append(np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w) / float(maxval))
    return out[0], out[1] > 0.5


# images ---------------------------------------------------------------------

def to_bytes8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image) -> None:
    rgb = image.rgb if isinstance(image, RenderedImage) else np.asarray(image)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes8(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    w, h, maxval, body = _read_pnm(path, b"P6")
    return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3) / float(maxval)


# checkpoints ----------------------------------------------------------------

def _pack_blocks(blocks: Iterable[Dict[str, np.ndarray]]) -> bytes:
    return b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes()
                    for blk in blocks for v in blk.values())


def write_field(path, fld: VoxelRadianceField) -> None:
    header = FIELD_MAGIC + struct.pack("<IId", FORMAT_VERSION, fld.resolution, fld.extent)
    body = _pack_blocks([fld.params()])
    Path(path).write_bytes(header + body)


def read_field(path) -> VoxelRadianceField:
    data = Path(path).read_bytes()
    if data[:4] != FIELD_MAGIC:
        raise FormatError(f"{path}: not a field checkpoint")
    version, g, extent = struct.unpack_from("<IId", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    vals = np.frombuffer(data, dtype="<f8", offset=20)
    if vals.size != 4 * g ** 3:
        raise FormatError(f"{path}: expected {4 * g ** 3} values, found {vals.size}")
    density = vals[: g ** 3].reshape(g, g, g).copy()
    color = vals[g ** 3:].reshape(g, g, g, 3).copy()
    return VoxelRadianceField(density, color, extent)


def write_model(path, model) -> None:
    """Header (magic, version, kind, widths, rank, embed dim, shapes, scales, schedule)
    then little-endian float64 blocks theta, phi, psi in declaration order."""
    kind = model.kind.encode("ascii")
    sched = model.schedule
    h, w, c = model.image_shape
    head = [MODEL_MAGIC, struct.pack("<IB", FORMAT_VERSION, len(kind)), kind,
            struct.pack("<I", len(model.widths)), struct.pack(f"<{len(model.widths)}I", *model.widths),
            struct.pack("<IIIIIII", model.rank, model.embed_dim, model.time_dim, h, w, c, model.basis_rank),
            struct.pack("<dddd", model.lambda_inject, model.lambda_lora, model.data_mean, model.data_std),
            struct.pack("<Idd", sched.T, float(sched.betas[0]), float(sched.betas[-1])),
            struct.pack("<B", 1 if sched.weighting == "variance" else 0)]
    Path(path).write_bytes(b"".join(head) + _pack_blocks([model.theta, model.phi, model.psi]))


def read_model(path):
    from .diffusion.models import MLPDenoiser
    from .diffusion.schedule import build_schedule

    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint")
    pos = 4
    version, klen = struct.unpack_from("<IB", data, pos)
    pos += 5
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    kind = data[pos:pos + klen].decode("ascii")
    pos += klen
    if kind != MLPDenoiser.kind:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    (n_w,) = struct.unpack_from("<I", data, pos)
    pos += 4
    widths = list(struct.unpack_from(f"<{n_w}I", data, pos))
    pos += 4 * n_w
    rank, embed_dim, time_dim, h, w, c, basis_rank = struct.unpack_from("<IIIIIII", data, pos)
    pos += 28
    lam_i, lam_l, d_mean, d_std = struct.unpack_from("<dddd", data, pos)
    pos += 32
    T, b0, b1 = struct.unpack_from("<Idd", data, pos)
    pos += 20
    (wflag,) = struct.unpack_from("<B", data, pos)
    pos += 1
    sched = build_schedule(T, b0, b1, "variance" if wflag else "constant")
    model = MLPDenoiser((h, w, c), sched, hidden=widths[1:-1], embed_dim=embed_dim,
                        time_dim=time_dim, rank=rank, lambda_inject=lam_i, lambda_lora=lam_l,
                        data_mean=d_mean, data_std=d_std, basis_rank=basis_rank)
    vals = np.frombuffer(data, dtype="<f8", offset=pos)
    offset = 0
    for name in ("theta", "phi", "psi"):
        blk = {}
        for key, ref in model.block(name).items():
            n = ref.size
            if offset + n > vals.size:
                raise FormatError(f"{path}: truncated parameter block {name}")
            blk[key] = vals[offset:offset + n].reshape(ref.shape).copy()
            offset += n
        model.set_block(name, blk)
    if offset != vals.size:
        raise FormatError(f"{path}: {vals.size - offset} trailing values")
    return model


# traces ---------------------------------------------------------------------

def write_losses(path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def read_losses(path) -> List[float]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "loss"]:
        raise FormatError(f"{path}: expected step,loss header")
    return [float(r[1]) for r in rows[1:]]


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
