"""Bit-exact dataset persistence.

Canonical sample storage is a directory of PFM images plus a JSON manifest;
masks are binary PGM (P5).  Network weights use a little-endian binary
checkpoint ("MSPS" magic).  A separate import path reads DiLiGenT-style
benchmark directories (numbered PNG/PFM images, light_directions.txt,
light_intensities.txt, mask image, optional pre-converted normal PFM).

All writes go through a temp file plus rename, so a crashed write never
leaves a readable-but-corrupt file behind.
"""

from __future__ import annotations

import json
import os
import re
import struct
from pathlib import Path

import cv2
import numpy as np

from .samples import LightSample, NormalMap, PsSample

MANIFEST_VERSION = 1
CHECKPOINT_MAGIC = b"MSPS"
CHECKPOINT_VERSION = 1


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# PFM: "PF"/"Pf" magic, ASCII "width height", scale line whose sign encodes
# endianness (negative = little-endian), float32 rows stored bottom-to-top.


def write_pfm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM image must be (H,W) or (H,W,3), got {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("PFM cannot store non-finite values")
    h, w = img.shape[:2]
    header = magic + f"\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.flipud(img).astype("<f4").tobytes()
    _atomic_write(path, header + payload)


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()

    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PFM header")
        tokens.append(raw[start:pos])
    pos += 1  # exactly one whitespace byte separates the header from the payload

    magic = tokens[0]
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise ValueError(f"{path}: bad PFM magic {magic!r}")
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scl = float(tokens[3])
    except ValueError as e:
        raise ValueError(f"{path}: malformed PFM header: {e}") from None
    if w <= 0 or h <= 0 or scl == 0:
        raise ValueError(f"{path}: malformed PFM header ({w}x{h}, scale {scl})")
    expected = w * h * channels * 4
    actual = len(raw) - pos
    if actual != expected:
        raise ValueError(
            f"{path}: PFM payload is {actual} bytes, expected {expected} "
            f"for {w}x{h}x{channels}"
        )
    dtype = "<f4" if scl < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype, count=w * h * channels, offset=pos)
    img = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    return np.flipud(img).astype(np.float64)


# ---------------------------------------------------------------------------
# PGM (P5) masks: 0 = background, 255 = foreground


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {mask.shape}")
    h, w = mask.shape
    payload = np.where(mask.astype(bool), 255, 0).astype(np.uint8).tobytes()
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + payload)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: bad PGM magic {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 PGM supported, got {maxval}")
    if len(raw) - pos != w * h:
        raise ValueError(f"{path}: PGM payload is {len(raw) - pos} bytes, expected {w * h}")
    return (np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w) > 127)


# ---------------------------------------------------------------------------
# Canonical sample directories


def write_sample(directory, sample: PsSample, generator: dict | None = None) -> None:
    """Persist a sample as PFM images + PGM mask + JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    k, c, h, w = sample.images.shape
    lights = []
    for i, light in enumerate(sample.lights):
        name = f"image_{i:03d}.pfm"
        img = sample.images[i].transpose(1, 2, 0)
        write_pfm(directory / name, img if c == 3 else img[:, :, 0])
        lights.append(
            {
                "image": name,
                "direction": [float(v) for v in light.direction],
                "intensity": [float(v) for v in light.intensity],
            }
        )
    write_pgm(directory / "mask.pgm", sample.mask)
    manifest = {
        "version": MANIFEST_VERSION,
        "resolution": [h, w],
        "k": k,
        "lights": lights,
        "mask": "mask.pgm",
    }
    if sample.gt_normals is not None:
        write_pfm(directory / "normals.pfm", sample.gt_normals.values)
        manifest["normal_gt"] = "normals.pfm"
    if generator is not None:
        manifest["generator"] = generator
    _atomic_write(
        directory / "manifest.json",
        (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"),
    )


def read_sample(directory) -> PsSample:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text("utf-8"))
    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise ValueError(f"{directory}: unknown manifest version {version!r}")
    k = manifest["k"]
    if k < 3:
        raise ValueError(f"{directory}: manifest declares k={k}, need at least 3 lights")
    if len(manifest["lights"]) != k:
        raise ValueError(f"{directory}: manifest declares k={k} but lists {len(manifest['lights'])} lights")
    h, w = manifest["resolution"]

    def existing(name):
        p = directory / name
        if not p.exists():
            raise FileNotFoundError(f"{directory}: manifest references missing file {name}")
        return p

    images = []
    lights = []
    for rec in manifest["lights"]:
        img = read_pfm(existing(rec["image"]))
        if img.ndim == 2:
            img = img[:, :, None]
        if img.shape[:2] != (h, w):
            raise ValueError(
                f"{directory}/{rec['image']}: image is {img.shape[:2]}, manifest says {(h, w)}"
            )
        images.append(img.transpose(2, 0, 1))
        lights.append(LightSample(np.array(rec["direction"]), np.array(rec["intensity"])))
    mask = read_pgm(existing(manifest["mask"]))
    gt = None
    if "normal_gt" in manifest:
        vals = read_pfm(existing(manifest["normal_gt"]))
        gt = NormalMap(_renormalize(vals, mask), mask.copy())
    return PsSample(np.stack(images), lights, mask, gt, meta=manifest.get("generator", {}))


def _renormalize(vals: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Snap float32-quantized unit vectors back to exact unit length under the mask."""
    out = vals.copy()
    norms = np.linalg.norm(out[mask], axis=-1)
    safe = np.where(norms > 1e-8, norms, 1.0)
    out[mask] = out[mask] / safe[:, None]
    out[mask & (np.linalg.norm(vals, axis=-1) <= 1e-8)] = (0.0, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# DiLiGenT-style benchmark import


def _srgb_to_linear(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def _decode_image(path) -> np.ndarray:
    """Decode PNG/PFM to linear float (H,W,3).

    16-bit PNGs are treated as linear captures; 8-bit PNGs are assumed
    sRGB-encoded and are decoded to linear.
    """
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        img = read_pfm(path)
        return np.repeat(img[:, :, None], 3, axis=2) if img.ndim == 2 else img
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"could not decode image {path}")
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    if raw.shape[2] == 3:
        raw = raw[:, :, ::-1]  # BGR -> RGB
    if raw.dtype == np.uint8:
        img = _srgb_to_linear(raw.astype(np.float64) / 255.0)
    elif raw.dtype == np.uint16:
        img = raw.astype(np.float64) / 65535.0
    else:
        img = raw.astype(np.float64)
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img


_NUMBERED = re.compile(r"^(.*?)(\d+)\.(png|pfm)$", re.IGNORECASE)


def import_diligent(directory) -> PsSample:
    """Read one DiLiGenT-layout object directory into a PsSample."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    dir_file = directory / "light_directions.txt"
    int_file = directory / "light_intensities.txt"
    if not dir_file.exists():
        raise FileNotFoundError(f"{directory}: missing light_directions.txt")
    if not int_file.exists():
        raise FileNotFoundError(f"{directory}: missing light_intensities.txt")
    directions = np.loadtxt(dir_file, dtype=np.float64).reshape(-1, 3)
    intensities = np.loadtxt(int_file, dtype=np.float64).reshape(-1, 3)
    if len(directions) != len(intensities):
        raise ValueError(
            f"{directory}: {len(directions)} direction rows but {len(intensities)} intensity rows"
        )

    entries = []
    for p in directory.iterdir():
        m = _NUMBERED.match(p.name)
        if m and not p.name.lower().startswith(("mask", "normal")):
            entries.append((m.group(1), int(m.group(2)), p))
    entries.sort(key=lambda e: (e[0], e[1]))
    if len(entries) != len(directions):
        raise ValueError(
            f"{directory}: found {len(entries)} numbered images but "
            f"{len(directions)} light direction rows"
        )

    norms = np.linalg.norm(directions, axis=1)
    if np.abs(norms - 1.0).max() > 1e-3:
        raise ValueError(
            f"{directory}: light directions deviate from unit length by "
            f"{np.abs(norms - 1.0).max():.3g} (tolerance 1e-3)"
        )
    directions = directions / norms[:, None]
    if np.any(intensities <= 0):
        raise ValueError(f"{directory}: light intensities must be positive")

    images = np.stack([_decode_image(p).transpose(2, 0, 1) for _, _, p in entries])

    mask = None
    for name in ("mask.png", "mask.pgm", "mask.bmp"):
        p = directory / name
        if p.exists():
            if p.suffix == ".pgm":
                mask = read_pgm(p)
            else:
                m = cv2.imread(str(p), cv2.IMREAD_GRAYSCALE)
                if m is None:
                    raise ValueError(f"could not decode mask {p}")
                mask = m > 127
            break
    if mask is None:
        raise FileNotFoundError(f"{directory}: missing mask image")

    gt = None
    gt_path = directory / "normal_gt.pfm"
    if gt_path.exists():
        vals = read_pfm(gt_path)
        gt_mask = mask & (np.linalg.norm(vals, axis=-1) > 0.5)
        gt = NormalMap(_renormalize(vals, gt_mask), gt_mask)

    lights = [LightSample(d, i) for d, i in zip(directions, intensities)]
    return PsSample(images, lights, mask, gt, meta={"source": str(directory)})


# ---------------------------------------------------------------------------
# Weight checkpoints: magic "MSPS", u32 version, then per tensor
# u32 name length, name bytes, u32 rank, u32 dims[], float64 payload.
# Everything little-endian.


def write_checkpoint(path, arrays: dict[str, np.ndarray], version: int = CHECKPOINT_VERSION) -> None:
    blob = [CHECKPOINT_MAGIC, struct.pack("<I", version)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        blob.append(struct.pack("<I", len(name_b)))
        blob.append(name_b)
        blob.append(struct.pack("<I", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.astype("<f8").tobytes())
    _atomic_write(path, b"".join(blob))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(dims)
    return out


def save_loss_trace(path, trace) -> None:
    """Loss trace CSV with a `step,loss` header."""
    lines = ["step,loss"] + [f"{step},{loss!r}" for step, loss in trace]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))
