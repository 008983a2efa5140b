"""Data model and bit-exact readers/writers for all on-disk formats.

Conventions used throughout the package:

* images are numpy float32 arrays of shape (H, W, C), channel-interleaved
  row-major, C in {1..5};
* flow fields are float32 arrays of shape (H, W, 2) holding per-pixel
  (u, v) displacements, u rightward and v downward, in pixels;
* every on-disk float is 32-bit little-endian (PFM additionally honors
  its scale-sign convention).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    BadHeader,
    BadMagic,
    DimMismatch,
    FewerThanThreeFrames,
    MissingFrameFile,
    NonAlternatingExposures,
    NonFiniteValues,
    NonPositiveExposure,
    ShapeOverflow,
    TruncatedFile,
    VersionMismatch,
)

FLO_MAGIC = 202021.25
PARAMS_MAGIC = b"F2HW"
PARAMS_VERSION = 1
MAX_TENSOR_RANK = 8


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

def as_image_plane(data, channels=None):
    """Normalize to a float32 (H, W, C) array and validate invariants."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimMismatch(f"expected 2-D or 3-D pixel data, got ndim={arr.ndim}")
    h, w, c = arr.shape
    if h < 1 or w < 1 or c not in (1, 2, 3, 4, 5):
        raise DimMismatch(f"invalid image shape {arr.shape}")
    if channels is not None and c != channels:
        raise DimMismatch(f"expected {channels} channels, got {c}")
    if not np.isfinite(arr).all():
        raise NonFiniteValues("image contains NaN or Inf")
    return arr


def as_flow_field(data):
    """Normalize to a float32 (H, W, 2) flow array and validate."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise DimMismatch(f"expected (H, W, 2) flow, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteValues("flow contains NaN or Inf")
    return arr


@dataclass
class ExposureFrame:
    """An LDR image in [0, 1] paired with its exposure and gamma."""

    image: np.ndarray
    exposure: float
    gamma: float = 2.2

    def __post_init__(self):
        self.image = as_image_plane(self.image)
        if self.exposure <= 0:
            raise NonPositiveExposure(f"exposure must be > 0, got {self.exposure}")
        if self.gamma <= 0:
            raise NonPositiveExposure(f"gamma must be > 0, got {self.gamma}")
        self.image = np.clip(self.image, 0.0, 1.0)


@dataclass
class SequenceManifest:
    """Ordered frame list with alternating exposures plus sliding-window stride."""

    frames: list  # list of (Path, float exposure)
    gamma: float = 2.2
    stride: int = 1

    def __len__(self):
        return len(self.frames)

    def reference_indices(self):
        """Frame indices that have both temporal neighbors available."""
        return list(range(1, len(self.frames) - 1, self.stride))


class ParamStore:
    """Named, shaped, ordered collection of float32 tensors.

    Behaves as a mapping from name to array; iteration order is insertion
    order, which the binary serialization preserves exactly.
    """

    def __init__(self, entries=None):
        self._entries = {}
        if entries:
            for name, values in entries:
                self.add(name, values)

    def add(self, name, values):
        if name in self._entries:
            raise ShapeOverflow(f"duplicate parameter name {name!r}")
        self._entries[name] = np.ascontiguousarray(values, dtype=np.float32)

    def __getitem__(self, name):
        return self._entries[name]

    def __setitem__(self, name, values):
        self._entries[name] = np.ascontiguousarray(values, dtype=np.float32)

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def get(self, name, default=None):
        return self._entries.get(name, default)

    def copy(self):
        out = ParamStore()
        for name, values in self._entries.items():
            out.add(name, values.copy())
        return out


# ---------------------------------------------------------------------------
# Middlebury flow container
# ---------------------------------------------------------------------------

def read_flow_file(path) -> np.ndarray:
    """Read a Middlebury .flo file into an (H, W, 2) float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: shorter than magic")
    (magic,) = struct.unpack("<f", raw[:4])
    if magic != FLO_MAGIC:
        raise BadMagic(f"{path}: magic {magic!r} != {FLO_MAGIC}")
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: missing width/height")
    width, height = struct.unpack("<ii", raw[4:12])
    if width < 1 or height < 1:
        raise BadHeader(f"{path}: bad dims {width}x{height}")
    need = 12 + 8 * width * height
    if len(raw) < need:
        raise TruncatedFile(f"{path}: payload {len(raw) - 12} < {need - 12} bytes")
    flat = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=12)
    flow = flat.reshape(height, width, 2).astype(np.float32)
    if not np.isfinite(flow).all():
        raise NonFiniteValues(f"{path}: flow contains NaN or Inf")
    return flow


def write_flow_file(flow, path):
    """Write an (H, W, 2) flow to the Middlebury .flo container."""
    flow = as_flow_field(flow)
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# PFM (portable float map)
# ---------------------------------------------------------------------------

def read_pfm(path) -> np.ndarray:
    """Read a PFM file; returns (H, W, 3) for 'PF', (H, W, 1) for 'Pf'."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4:
        raise BadHeader(f"{path}: incomplete PFM header")
    tag, dims, scale_s, payload = parts
    if tag == b"PF":
        channels = 3
    elif tag == b"Pf":
        channels = 1
    else:
        raise BadHeader(f"{path}: bad PFM tag {tag!r}")
    try:
        width, height = (int(t) for t in dims.split())
        scale = float(scale_s)
    except ValueError as exc:
        raise BadHeader(f"{path}: unparsable PFM header") from exc
    if width < 1 or height < 1 or scale == 0:
        raise BadHeader(f"{path}: bad dims/scale")
    count = width * height * channels
    if len(payload) < 4 * count:
        raise TruncatedFile(f"{path}: payload {len(payload)} < {4 * count} bytes")
    dtype = "<f4" if scale < 0 else ">f4"
    flat = np.frombuffer(payload, dtype=dtype, count=count)
    image = flat.reshape(height, width, channels)
    image = image[::-1].astype(np.float32)  # rows stored bottom-to-top
    if not np.isfinite(image).all():
        raise NonFiniteValues(f"{path}: image contains NaN or Inf")
    return np.ascontiguousarray(image)


def write_pfm(image, path, scale=-1.0):
    """Write a 1- or 3-channel image as PFM (negative scale = little-endian)."""
    image = as_image_plane(image)
    h, w, c = image.shape
    if c not in (1, 3):
        raise DimMismatch(f"PFM supports 1 or 3 channels, got {c}")
    tag = b"PF" if c == 3 else b"Pf"
    dtype = "<f4" if scale < 0 else ">f4"
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(f"{scale:f}\n".encode())
        f.write(np.ascontiguousarray(image[::-1], dtype=dtype).tobytes())


# ---------------------------------------------------------------------------
# LDR PNG
# ---------------------------------------------------------------------------

def read_ldr_png(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG as float32 in [0, 1] (integer / (2^bits - 1))."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise MissingFrameFile(f"cannot read PNG {path}")
    if raw.dtype == np.uint8:
        denom = 255.0
    elif raw.dtype == np.uint16:
        denom = 65535.0
    else:
        raise BadHeader(f"{path}: unsupported PNG dtype {raw.dtype}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    image = raw.astype(np.float32) / np.float32(denom)
    return as_image_plane(image)


def write_ldr_png(image, path, bits=8):
    """Write a [0, 1] image as an 8- or 16-bit PNG with round-to-nearest."""
    image = as_image_plane(image)
    if bits == 8:
        peak, dtype = 255.0, np.uint8
    elif bits == 16:
        peak, dtype = 65535.0, np.uint16
    else:
        raise BadHeader(f"unsupported PNG bit depth {bits}")
    quant = np.rint(np.clip(image, 0.0, 1.0).astype(np.float64) * peak).astype(dtype)
    if quant.shape[2] == 1:
        out = quant[:, :, 0]
    elif quant.shape[2] == 3:
        out = cv2.cvtColor(quant, cv2.COLOR_RGB2BGR)
    else:
        raise DimMismatch(f"PNG supports 1 or 3 channels, got {quant.shape[2]}")
    if not cv2.imwrite(str(path), out):
        raise MissingFrameFile(f"cannot write PNG {path}")


# ---------------------------------------------------------------------------
# sequence manifest
# ---------------------------------------------------------------------------

def read_manifest(path, gamma=2.2) -> SequenceManifest:
    """Parse a line-oriented manifest: `path<TAB>exposure`, '#' comments.

    A `# gamma=<value>` comment overrides the default gamma. Frame paths are
    resolved relative to the manifest's directory and must exist.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFrameFile(f"manifest {path} does not exist")
    base = path.parent
    frames = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            directive = line[1:].strip()
            if directive.startswith("gamma="):
                gamma = float(directive.split("=", 1)[1])
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise BadHeader(f"{path}:{lineno}: expected `path<TAB>exposure`")
        frame_path = base / fields[0]
        try:
            exposure = float(fields[1])
        except ValueError as exc:
            raise BadHeader(f"{path}:{lineno}: bad exposure {fields[1]!r}") from exc
        if exposure <= 0:
            raise NonPositiveExposure(f"{path}:{lineno}: exposure {exposure} <= 0")
        if not frame_path.exists():
            raise MissingFrameFile(f"{path}:{lineno}: missing frame {frame_path}")
        frames.append((frame_path, exposure))

    if len(frames) < 3:
        raise FewerThanThreeFrames(f"{path}: {len(frames)} frames, need >= 3")
    exposures = [e for _, e in frames]
    values = sorted(set(exposures))
    if len(values) != 2:
        raise NonAlternatingExposures(
            f"{path}: exposures use {len(values)} distinct values, need exactly 2"
        )
    for a, b in zip(exposures, exposures[1:]):
        if a == b:
            raise NonAlternatingExposures(f"{path}: consecutive equal exposures {a}")
    return SequenceManifest(frames=frames, gamma=gamma)


def load_frame(manifest: SequenceManifest, index: int) -> ExposureFrame:
    """Load one manifest entry as an ExposureFrame (PNG or PFM by suffix)."""
    frame_path, exposure = manifest.frames[index]
    if frame_path.suffix.lower() == ".pfm":
        image = read_pfm(frame_path)
    else:
        image = read_ldr_png(frame_path)
    return ExposureFrame(image=image, exposure=exposure, gamma=manifest.gamma)


# ---------------------------------------------------------------------------
# "F2HW" parameter container
# ---------------------------------------------------------------------------

def save_params(store: ParamStore, path):
    """Serialize a ParamStore to the binary F2HW container."""
    blobs = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(store))]
    for name, values in store.items():
        if values.ndim > MAX_TENSOR_RANK:
            raise ShapeOverflow(f"{name}: rank {values.ndim} > {MAX_TENSOR_RANK}")
        encoded = name.encode("utf-8")
        blobs.append(struct.pack("<I", len(encoded)))
        blobs.append(encoded)
        blobs.append(struct.pack("<I", values.ndim))
        blobs.append(struct.pack(f"<{values.ndim}I", *values.shape))
        blobs.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(blobs))


def load_params(path) -> ParamStore:
    """Read a ParamStore from the binary F2HW container."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: shorter than magic")
    if raw[:4] != PARAMS_MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r} != {PARAMS_MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: missing header")
    version, count = struct.unpack("<II", raw[4:12])
    if version != PARAMS_VERSION:
        raise VersionMismatch(f"{path}: version {version} != {PARAMS_VERSION}")
    store = ParamStore()
    offset = 12
    for _ in range(count):
        if offset + 4 > len(raw):
            raise TruncatedFile(f"{path}: truncated entry header")
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if offset + name_len + 4 > len(raw):
            raise TruncatedFile(f"{path}: truncated entry name")
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if rank > MAX_TENSOR_RANK:
            raise ShapeOverflow(f"{path}: {name}: rank {rank} > {MAX_TENSOR_RANK}")
        if offset + 4 * rank > len(raw):
            raise TruncatedFile(f"{path}: truncated dims for {name}")
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if offset + 4 * n > len(raw):
            raise TruncatedFile(f"{path}: truncated payload for {name}")
        values = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        if not np.isfinite(values).all():
            raise NonFiniteValues(f"{path}: {name} contains NaN or Inf")
        store.add(name, values.reshape(shape).astype(np.float32))
    return store
