"""Format bridge: .mat archive -> binary cube file + JSON sidecar.

The output format (shared contract with the training pipeline):

    magic 'HSI1', u16 version = 1, u32 little-endian height, width, bands,
    u8 dtype code (0 = float32), then band-sequential float32 samples.

Values are written un-normalized; scaling to [0,1] is the training
pipeline's job. The sidecar records everything needed to audit the
conversion: source file checksum, the axis permutation applied, the
original dtype and value range.

Legacy .mat files are read with scipy.io.loadmat; v7.3 (HDF5) archives are
read with h5py. Note that HDF5-backed .mat files store arrays transposed
relative to MATLAB's logical shape; the --order declaration applies to the
array as this tool reads it, and verify() will catch a wrong declaration on
any non-cubic array via the band-count or dimension checks.
"""

import hashlib
import json
import os
import struct
import sys
from dataclasses import dataclass

import numpy as np

CUBE_MAGIC = b"HSI1"
CUBE_VERSION = 1

AXIS_ORDERS = ("HWC", "CHW")

# expected band counts for the labeled datasets this tool is used with
KNOWN_BANDS = {
    "pavia_university": 103,
    "salinas": 204,
    "cuprite": 224,
    "urban": 210,
}


class ConvertError(ValueError):
    pass


@dataclass
class SourceDescriptor:
    path: str
    var: str
    order: str  # axis order of the stored array: HWC or CHW
    label: str = ""

    def __post_init__(self):
        self.order = self.order.upper()
        if self.order not in AXIS_ORDERS:
            raise ConvertError(
                f"axis order must be one of {AXIS_ORDERS}, got {self.order!r}"
            )


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_mat_variable(path, var):
    """Returns (array, available_names). Tries the legacy reader first and
    falls back to HDF5 for v7.3 archives."""
    import scipy.io

    try:
        doc = scipy.io.loadmat(path)
        names = sorted(k for k in doc if not k.startswith("__"))
        if var not in doc:
            raise ConvertError(
                f"variable {var!r} not in {path}; available: {names}"
            )
        return np.asarray(doc[var]), names
    except ConvertError:
        raise
    except NotImplementedError:
        pass  # v7.3 archives are HDF5-backed
    except ValueError:
        pass  # not a legacy .mat at all; try HDF5
    import h5py

    with h5py.File(path, "r") as f:
        names = sorted(k for k in f.keys() if not k.startswith("#"))
        if var not in f:
            raise ConvertError(
                f"variable {var!r} not in {path}; available: {names}"
            )
        return np.asarray(f[var]), names


def load_source(descriptor):
    """Load and validate the source array, returned in [bands, H, W] order
    along with the permutation that was applied."""
    if not os.path.exists(descriptor.path):
        raise ConvertError(f"input not found: {descriptor.path}")
    arr, _ = _load_mat_variable(descriptor.path, descriptor.var)
    if arr.ndim != 3:
        raise ConvertError(
            f"variable {descriptor.var!r} is {arr.ndim}-D "
            f"(shape {arr.shape}); a 3-D cube is required"
        )
    if not np.issubdtype(arr.dtype, np.number):
        raise ConvertError(f"variable {descriptor.var!r} is not numeric ({arr.dtype})")
    perm = (2, 0, 1) if descriptor.order == "HWC" else (0, 1, 2)
    cube = np.transpose(arr, perm)

    label = descriptor.label
    if label in KNOWN_BANDS:
        if cube.shape[0] != KNOWN_BANDS[label]:
            raise ConvertError(
                f"dataset {label!r} must have {KNOWN_BANDS[label]} bands, "
                f"but axis order {descriptor.order} yields {cube.shape[0]}"
            )
    elif label:
        print(f"warning: unknown dataset label {label!r}; "
              f"band-count check skipped", file=sys.stderr)
    return cube, perm


def _sidecar_path(path):
    stem, _ = os.path.splitext(path)
    return stem + ".meta.json"


def write_cube(data, path):
    """data: [bands, H, W]; stored as little-endian float32."""
    bands, h, w = data.shape
    out = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(CUBE_MAGIC)
        f.write(struct.pack("<H", CUBE_VERSION))
        f.write(struct.pack("<III", h, w, bands))
        f.write(struct.pack("<B", 0))
        f.write(out.tobytes())
    return out


def read_cube(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CUBE_MAGIC:
        raise ConvertError("not a cube file (bad magic)")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != CUBE_VERSION:
        raise ConvertError(f"unsupported cube version {version}")
    h, w, bands = struct.unpack("<III", blob[6:18])
    if blob[18] != 0:
        raise ConvertError(f"unknown dtype code {blob[18]}")
    body = blob[19:]
    if len(body) != 4 * bands * h * w:
        raise ConvertError(
            f"cube body is {len(body)} bytes, expected {4 * bands * h * w}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(bands, h, w)


def convert(descriptor, out_path):
    """Archive -> cube file + sidecar. Returns the sidecar dict."""
    cube, perm = load_source(descriptor)
    stored = write_cube(cube, out_path)
    meta = {
        "name": descriptor.label or descriptor.var,
        "bands": int(cube.shape[0]),
        "height": int(cube.shape[1]),
        "width": int(cube.shape[2]),
        "value_range": [float(stored.min()), float(stored.max())],
        "source_file": os.path.basename(descriptor.path),
        "source_sha256": _file_sha256(descriptor.path),
        "source_variable": descriptor.var,
        "source_dtype": str(cube.dtype),
        "axis_order": descriptor.order,
        "axis_permutation": list(perm),
    }
    with open(_sidecar_path(out_path), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")
    return meta


@dataclass
class VerifyReport:
    ok: bool
    deltas: dict

    def __str__(self):
        status = "pass" if self.ok else "FAIL"
        parts = ", ".join(f"{k}={v:.3e}" for k, v in self.deltas.items())
        return f"{status} ({parts})" if parts else status


def verify(cube_path, descriptor, atol_ulps=1.0):
    """Re-read both sides and compare min/max/mean within float32 rounding.
    A corrupt or truncated cube file fails with the reader's message."""
    source, _ = load_source(descriptor)
    try:
        stored = read_cube(cube_path)
    except ConvertError as e:
        return VerifyReport(ok=False, deltas={}), str(e)
    if stored.shape != source.shape:
        return VerifyReport(ok=False, deltas={}), (
            f"shape mismatch: cube {stored.shape} vs source {source.shape}"
        )
    src32 = source.astype(np.float64)
    tol = atol_ulps * np.finfo(np.float32).eps * max(1.0, float(np.abs(src32).max()))
    deltas = {
        "min": abs(float(stored.min()) - float(src32.min())),
        "max": abs(float(stored.max()) - float(src32.max())),
        "mean": abs(float(stored.mean(dtype=np.float64)) - float(src32.mean())),
        "max_abs": float(np.abs(stored.astype(np.float64) - src32).max()),
    }
    ok = all(d <= tol for d in deltas.values())
    return VerifyReport(ok=ok, deltas=deltas), None
