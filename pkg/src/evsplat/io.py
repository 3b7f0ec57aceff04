"""File formats: pose manifests (JSON), clouds (PLY), images (PNG, PFM), configs (TOML)."""
from __future__ import annotations

import io
import json
import logging
import sys
from dataclasses import dataclass, field

import numpy as np

from .core_math import CameraView, UnitQuaternion
from .errors import FormatError, InputError, SchemaError
from .gaussians import GaussianCloud

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

# quaternions this close to unit norm are normalized with a warning
QUAT_NORM_TOLERANCE = 1e-2
INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


# ---------------------------------------------------------------------------
# poses


@dataclass
class PoseManifest:
    """Camera intrinsics, a time-ordered pose track and optional exposure intervals.

    Rotations are world-to-camera, stored as ``[w, x, y, z]``; translations
    are world-to-camera too (``x_cam = R x_world + t``).
    """

    intrinsics: dict
    views: list
    exposures: list = field(default_factory=list)  # (start, end) seconds

    @property
    def times(self) -> np.ndarray:
        return np.array([v.time for v in self.views])

    def to_json(self) -> bytes:
        doc = dict(
            intrinsics=dict(self.intrinsics),
            views=[dict(time=float(v.time), rotation=[float(q) for q in v.rotation.as_array()],
                        translation=[float(c) for c in v.translation]) for v in self.views],
        )
        if self.exposures:
            doc["exposures"] = [dict(start=float(a), end=float(b)) for a, b in self.exposures]
        return json.dumps(doc, indent=1).encode()

    @classmethod
    def from_views(cls, views: list, exposures=()) -> "PoseManifest":
        v = views[0]
        intr = dict(fx=v.fx, fy=v.fy, cx=v.cx, cy=v.cy, width=v.width, height=v.height)
        return cls(intr, list(views), list(exposures))


def _number(value, path, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise SchemaError("expected a finite number", path)
    if positive and value <= 0:
        raise SchemaError("must be positive", path)
    return float(value)


def _vector(value, n, path):
    if not isinstance(value, list) or len(value) != n:
        raise SchemaError(f"expected an array of {n} numbers", path)
    return np.array([_number(c, f"{path}[{i}]") for i, c in enumerate(value)])


def load_poses(data: bytes | str) -> PoseManifest:
    """Parse and validate a pose manifest.

    Schema: ``{"intrinsics": {fx, fy, cx, cy, width, height},
    "views": [{"time", "rotation": [w,x,y,z], "translation": [x,y,z]}, ...],
    "exposures": [{"start", "end"}, ...]}`` (``exposures`` optional).
    """
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object")
    intr = doc.get("intrinsics")
    if not isinstance(intr, dict):
        raise SchemaError("missing intrinsics object", "$.intrinsics")
    intrinsics = {}
    for key in INTRINSIC_KEYS:
        if key not in intr:
            raise SchemaError("missing field", f"$.intrinsics.{key}")
        val = _number(intr[key], f"$.intrinsics.{key}", positive=key in ("fx", "fy", "width", "height"))
        if key in ("width", "height"):
            if val != int(val):
                raise SchemaError("must be an integer", f"$.intrinsics.{key}")
            val = int(val)
        intrinsics[key] = val
    raw_views = doc.get("views")
    if not isinstance(raw_views, list) or not raw_views:
        raise SchemaError("expected a non-empty array", "$.views")
    views = []
    for i, rv in enumerate(raw_views):
        path = f"$.views[{i}]"
        if not isinstance(rv, dict):
            raise SchemaError("expected an object", path)
        for key in ("time", "rotation", "translation"):
            if key not in rv:
                raise SchemaError("missing field", f"{path}.{key}")
        t = _number(rv["time"], f"{path}.time")
        q = _vector(rv["rotation"], 4, f"{path}.rotation")
        tr = _vector(rv["translation"], 3, f"{path}.translation")
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > QUAT_NORM_TOLERANCE:
            raise SchemaError(f"quaternion norm {norm:.4g} is not within {QUAT_NORM_TOLERANCE} of 1",
                              f"{path}.rotation")
        if norm != 1.0:
            log.warning("%s.rotation: normalizing quaternion of norm %.6g", path, norm)
        if views and t <= views[-1].time:
            raise SchemaError(f"time {t} does not increase (previous {views[-1].time})", f"{path}.time")
        views.append(CameraView(UnitQuaternion.from_array(q / norm), tr, time=t, **intrinsics))
    exposures = []
    raw_exp = doc.get("exposures", [])
    if not isinstance(raw_exp, list):
        raise SchemaError("expected an array", "$.exposures")
    for i, e in enumerate(raw_exp):
        path = f"$.exposures[{i}]"
        if not isinstance(e, dict) or "start" not in e or "end" not in e:
            raise SchemaError("expected an object with start and end", path)
        a, b = _number(e["start"], f"{path}.start"), _number(e["end"], f"{path}.end")
        if b <= a:
            raise SchemaError("end must be after start", path)
        exposures.append((a, b))
    return PoseManifest(intrinsics, views, exposures)


# ---------------------------------------------------------------------------
# PLY


def _ply_names(sh_degree: int) -> list[str]:
    k = (sh_degree + 1) ** 2
    names = ["x", "y", "z"] + [f"log_scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    names += ["opacity_logit"] + [f"f_dc_{c}" for c in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    return names


def save_ply(cloud: GaussianCloud) -> bytes:
    """Binary little-endian PLY with float64 properties.

    ``f_rest_*`` is channel-major: all higher-band coefficients of red, then
    green, then blue.
    """
    n, k = len(cloud), cloud.sh.shape[1]
    names = _ply_names(cloud.sh_degree)
    cols = np.empty((n, len(names)), dtype="<f8")
    cols[:, 0:3] = cloud.means
    cols[:, 3:6] = cloud.log_scales
    cols[:, 6:10] = cloud.rotations
    cols[:, 10] = cloud.opacity_logits
    cols[:, 11:14] = cloud.sh[:, 0, :]
    cols[:, 14:] = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (k - 1))
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {name}" for name in names] + ["end_header"]
    return ("\n".join(header) + "\n").encode("ascii") + cols.tobytes()


_PLY_TYPES = {"double": "<f8", "float64": "<f8", "float": "<f4", "float32": "<f4"}


def load_ply(data: bytes) -> GaussianCloud:
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file (missing magic or end_header)")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(marker):]
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError("only binary_little_endian 1.0 PLY is supported")
    n = None
    props = []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("format", "comment", "obj_info"):
            continue
        if parts[0] == "element":
            if parts[1] != "vertex" or n is not None:
                raise FormatError(f"unsupported element {' '.join(parts[1:])}")
            try:
                n = int(parts[2])
            except (IndexError, ValueError) as exc:
                raise FormatError(f"bad element line {line!r}") from exc
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise FormatError(f"unsupported property line {line!r}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if n is None or n < 0:
        raise FormatError("missing vertex element")
    names = [p[0] for p in props]
    n_rest = len(names) - 14
    if n_rest < 0 or n_rest % 3:
        raise FormatError(f"unexpected property count {len(names)}")
    k = n_rest // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if (degree + 1) ** 2 != k or names != _ply_names(degree):
        raise FormatError("properties do not match the Gaussian layout")
    dtype = np.dtype(props)
    if len(body) < n * dtype.itemsize:
        raise FormatError(f"truncated: need {n * dtype.itemsize} bytes of vertex data, found {len(body)}")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    cols = np.stack([rec[name].astype(np.float64) for name in names], axis=1) if n else np.zeros((0, len(names)))
    sh = np.empty((n, k, 3))
    sh[:, 0, :] = cols[:, 11:14]
    sh[:, 1:, :] = cols[:, 14:].reshape(n, 3, k - 1).transpose(0, 2, 1)
    return GaussianCloud(cols[:, 0:3].copy(), cols[:, 3:6].copy(), cols[:, 6:10].copy(), cols[:, 10].copy(), sh)


# ---------------------------------------------------------------------------
# images


def save_png(image: np.ndarray) -> bytes:
    """8-bit PNG of an image in [0, 1] (values outside are clipped)."""
    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    u8 = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return buf.getvalue()


def load_png(data: bytes) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"unreadable PNG: {exc}") from exc
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_pfm(image: np.ndarray) -> bytes:
    """32-bit float PFM (little endian, rows stored bottom to top)."""
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    elif arr.ndim == 2:
        tag = b"Pf"
    else:
        raise InputError(f"PFM needs an (H, W) or (H, W, 3) image, got {arr.shape}")
    h, w = arr.shape[:2]
    return tag + f"\n{w} {h}\n-1.0\n".encode() + np.ascontiguousarray(arr[::-1]).tobytes()


def load_pfm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise FormatError("not a PFM file")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise FormatError(f"bad PFM header: {exc}") from exc
    ch = 3 if parts[0] == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * ch * 4
    if len(parts[3]) < need:
        raise FormatError(f"truncated PFM: need {need} bytes, found {len(parts[3])}")
    arr = np.frombuffer(parts[3], dtype=dtype, count=w * h * ch).reshape((h, w, ch) if ch == 3 else (h, w))
    return arr[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# config


def load_toml(data: bytes | str) -> dict:
    text = data.decode() if isinstance(data, bytes) else data
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"invalid TOML: {exc}") from exc


def dump_toml(doc: dict) -> str:
    import tomli_w

    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items() if x is not None}
        if isinstance(v, (tuple, list)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return v.item()
        return v

    return tomli_w.dumps(clean(doc))
