"""File formats: binary volumes/images with JSON sidecars, CSV tables, hashing.

Conventions
-----------
* Volumes are little-endian float32, C row-major with z slowest, i.e. the
  in-memory array is indexed ``[z, y, x]`` and the sidecar records
  ``dims = [nx, ny, nz]`` plus ``spacing_mm`` / ``origin_mm`` per axis.
* 2-D fields (images, masks, time series) use the same .bin + .json pairing;
  masks are uint8.
* Every ``save_*`` writes ``<path>`` and ``<path with .json suffix>``; the
  loaders return ``(array, meta)`` with meta the parsed sidecar.
"""

import csv
import hashlib
import json
from pathlib import Path

import numpy as np


class FileFormatError(OSError):
    """Corrupt or inconsistent on-disk artifact (treated as an I/O failure)."""


def _sidecar_path(path):
    return Path(path).with_suffix(".json")


def _write_sidecar(path, meta):
    _sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_sidecar(path):
    sidecar = _sidecar_path(path)
    try:
        return json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"corrupt sidecar {sidecar}: {exc}") from exc


def save_volume(path, data, spacing_mm, origin_mm, extra=None):
    """Write a 3-D float32 volume (indexed [z, y, x]) with its sidecar."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected 3-D volume, got shape {data.shape}")
    nz, ny, nx = data.shape
    meta = {
        "dims": [int(nx), int(ny), int(nz)],
        "spacing_mm": [float(s) for s in spacing_mm],
        "origin_mm": [float(o) for o in origin_mm],
        "dtype": "float32",
        "order": "C_zyx",
    }
    if extra:
        meta.update(extra)
    Path(path).write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    _write_sidecar(path, meta)
    return Path(path)


def load_volume(path):
    meta = _read_sidecar(path)
    nx, ny, nz = meta["dims"]
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size != nx * ny * nz:
        raise FileFormatError(
            f"{path}: payload has {raw.size} values, sidecar dims imply {nx * ny * nz}"
        )
    return raw.reshape(nz, ny, nx).copy(), meta


def save_image(path, data, pixel_pitch_mm, center_mm=(0.0, 0.0), extra=None):
    """Write a 2-D float32 field (indexed [row=y, col=x]) with its sidecar."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"expected 2-D image, got shape {data.shape}")
    ny, nx = data.shape
    meta = {
        "shape": [int(ny), int(nx)],
        "pixel_pitch_mm": float(pixel_pitch_mm),
        "fov_mm": [nx * float(pixel_pitch_mm), ny * float(pixel_pitch_mm)],
        "center_mm": [float(c) for c in center_mm],
        "dtype": "float32",
    }
    if extra:
        meta.update(extra)
    Path(path).write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    _write_sidecar(path, meta)
    return Path(path)


def load_image(path):
    meta = _read_sidecar(path)
    ny, nx = meta["shape"]
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size != nx * ny:
        raise FileFormatError(
            f"{path}: payload has {raw.size} values, sidecar shape implies {nx * ny}"
        )
    return raw.reshape(ny, nx).copy(), meta


def save_mask(path, mask, pixel_pitch_mm, kind, region_id, extra=None):
    """Write an 8-bit region raster; nonzero marks membership."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected 2-D mask, got shape {mask.shape}")
    meta = {
        "shape": [int(mask.shape[0]), int(mask.shape[1])],
        "pixel_pitch_mm": float(pixel_pitch_mm),
        "kind": str(kind),
        "region_id": str(region_id),
        "dtype": "uint8",
    }
    if extra:
        meta.update(extra)
    Path(path).write_bytes(np.ascontiguousarray(mask != 0, dtype=np.uint8).tobytes())
    _write_sidecar(path, meta)
    return Path(path)


def load_mask(path):
    meta = _read_sidecar(path)
    ny, nx = meta["shape"]
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size != nx * ny:
        raise FileFormatError(
            f"{path}: payload has {raw.size} values, sidecar shape implies {nx * ny}"
        )
    return raw.reshape(ny, nx).astype(bool), meta


def save_timeseries(path, data, dt_us, t0_us, positions_mm, extra=None):
    """Write detector time series, one row per element."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"expected (n_elements, n_samples) data, got {data.shape}")
    if np.iscomplexobj(data):
        raise ValueError("time-series files hold real pressure traces")
    meta = {
        "n_elements": int(data.shape[0]),
        "n_samples": int(data.shape[1]),
        "dt_us": float(dt_us),
        "t0_us": float(t0_us),
        "element_positions_mm": np.asarray(positions_mm, dtype=float).tolist(),
        "dtype": "float32",
    }
    if extra:
        meta.update(extra)
    Path(path).write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    _write_sidecar(path, meta)
    return Path(path)


def load_timeseries(path):
    meta = _read_sidecar(path)
    ne, ns = meta["n_elements"], meta["n_samples"]
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size != ne * ns:
        raise FileFormatError(
            f"{path}: payload has {raw.size} values, sidecar implies {ne * ns}"
        )
    return raw.reshape(ne, ns).copy(), meta


def write_pgm(path, data):
    """8-bit PGM preview, min-max normalised. Purely cosmetic output."""
    data = np.asarray(data, dtype=float)
    lo, hi = float(np.nanmin(data)), float(np.nanmax(data))
    span = hi - lo if hi > lo else 1.0
    img = np.nan_to_num((data - lo) / span, nan=0.0)
    img8 = (img * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{img8.shape[1]} {img8.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + img8.tobytes())
    return Path(path)


def write_csv(path, rows, fieldnames):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def canonical_json(obj):
    """Deterministic JSON encoding used for hashing configs and manifests."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_digest(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
