"""File formats: PNG images, raw f32 arrays with JSON sidecars, checkpoints, config files."""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
from PIL import Image

from .errors import ConfigError, LoadError

CHECKPOINT_MAGIC = b"PFOACKPT"
CHECKPOINT_VERSION = 1


def write_png16(path, values):
    arr = np.asarray(np.round(values), dtype=np.uint16)
    Image.fromarray(arr).save(path, optimize=False)


def write_png8(path, values01):
    arr = np.asarray(np.round(np.clip(values01, 0, 1) * 255), dtype=np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path):
    """Grayscale PNG (8 or 16 bit) as float64 in the file's native units."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I;16B", "I", "I;16L"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64)


def write_array(path, arr, **header):
    """Raw little-endian f32 array plus ``<path>.json`` sidecar."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    meta = {"dtype": "float32", "shape": list(arr.shape), **header}
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True)


def read_array(path):
    try:
        with open(path + ".json") as fh:
            meta = json.load(fh)
        data = np.fromfile(path, dtype="<f4")
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read array {path}: {exc}") from exc
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise LoadError(f"{path}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape), meta


def save_checkpoint(path, arrays, meta=None):
    """Single-file checkpoint: magic, version, manifest length, JSON manifest, f32 payload."""
    manifest = {"meta": meta or {}, "tensors": []}
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest["tensors"].append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise LoadError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + struct.calcsize("<IQ"):
        raise LoadError(f"{path}: truncated checkpoint header")
    version, head_len = struct.unpack_from("<IQ", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    try:
        manifest = json.loads(raw[pos : pos + head_len])
    except ValueError as exc:
        raise LoadError(f"{path}: corrupt checkpoint manifest ({exc})") from exc
    payload = memoryview(raw)[pos + head_len :]
    arrays = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"]))
        start = t["offset"]
        if start + 4 * count > len(payload):
            raise LoadError(f"{path}: tensor {t['name']!r} is truncated")
        arrays[t["name"]] = np.frombuffer(payload[start : start + 4 * count], dtype="<f4").reshape(t["shape"]).copy()
    return arrays, manifest.get("meta", {})


def checkpoint_manifest(path):
    arrays, meta = load_checkpoint(path)
    return {name: list(a.shape) for name, a in arrays.items()}, meta


# ---------------------------------------------------------------------------
# configuration


def _parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(",") if t.strip())
    return text


def read_config(path):
    """Plain ``key = value`` file; ``#`` starts a comment; dotted keys nest one level.

    ``effect_strengths.bmi = 0.5`` becomes ``{"effect_strengths": {"bmi": 0.5}}``.
    """
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            head, sub = key.split(".", 1)
            out.setdefault(head, {})[sub] = _parse_value(value)
        else:
            out[key] = _parse_value(value)
    return out


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()
