"""Scene data model: Gaussian clouds, cameras, splat PLY I/O and SH colors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

_VALID_BASES = {1: 0, 4: 1, 9: 2, 16: 3}
OPACITY_CLAMP = 1e-6


class PlyError(ValueError):
    """Raised for malformed or incomplete splat PLY files."""


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def canonicalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Normalize (w, x, y, z) quaternions and flip so the first nonzero component is positive."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    q = q / np.where(norm > 0, norm, 1.0)
    nz = q != 0
    first = np.argmax(nz, axis=-1)
    lead = np.take_along_axis(q, first[..., None], axis=-1)
    return np.where(lead < 0, -q, q)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions stored as (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from(scale, rotation) -> np.ndarray:
    """Sigma = R diag(s^2) R^T. Works on single Gaussians or stacked (N, 3)/(N, 4) arrays."""
    s = np.asarray(scale, dtype=np.float64)
    R = quaternion_to_matrix(rotation)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def sh_degree(num_bases: int) -> int:
    if num_bases not in _VALID_BASES:
        raise ValueError(f"SH basis count must be one of 1, 4, 9, 16; got {num_bases}")
    return _VALID_BASES[num_bases]


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values (..., (degree+1)^2) for unit directions, 3DGS sign convention."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        out += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def evaluate_sh(sh_coeffs, d) -> np.ndarray:
    """RGB from SH coefficients (..., 3, B) seen along direction(s) d.

    Directions are normalized here; the result is clamp(0.5 + sum_b Y_b(d) k_b, 0, 1).
    """
    k = np.asarray(sh_coeffs, dtype=np.float64)
    degree = sh_degree(k.shape[-1])
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    d = d / np.where(norm > 0, norm, 1.0)
    Y = sh_basis(d, degree)
    rgb = np.einsum("...cb,...b->...c", k, Y)
    return np.clip(rgb + 0.5, 0.0, 1.0)


@dataclass
class GaussianCloud:
    """Splat scene with activated attributes (opacity in [0, 1], positive scales)."""

    positions: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.ndim == 2 and sh.shape[1] == 3:
            sh = sh[:, :, None]
        self.sh_coeffs = sh.reshape(n, 3, sh.shape[-1] if sh.ndim == 3 else -1)
        sh_degree(self.sh_coeffs.shape[-1])

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def degree(self) -> int:
        return sh_degree(self.sh_coeffs.shape[-1])

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(
            self.positions[index],
            self.opacities[index],
            self.scales[index],
            self.rotations[index],
            self.sh_coeffs[index],
        )

    def colors(self, camera_center) -> np.ndarray:
        """Per-Gaussian RGB seen from a camera center."""
        d = self.positions - np.asarray(camera_center, dtype=np.float64)
        return evaluate_sh(self.sh_coeffs, d)

    def validate(self):
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite positions")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacities outside [0, 1]")
        if np.any(~(self.scales > 0)):
            raise ValueError("scales must be positive")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1) > 1e-5):
            raise ValueError("rotations must be unit quaternions")

    @classmethod
    def empty(cls, degree: int = 0) -> "GaussianCloud":
        b = (degree + 1) ** 2
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3, b)))


@dataclass
class CameraPose:
    """Pinhole camera. ``rotation`` maps world to camera axes (x right, y down, z forward)."""

    rotation: np.ndarray
    center: np.ndarray
    focal: tuple = (100.0, 100.0)
    principal: tuple = (64.0, 64.0)
    size: tuple = (128, 128)  # (width, height)
    name: str = field(default="")

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.focal = tuple(float(f) for f in self.focal)
        self.principal = tuple(float(c) for c in self.principal)
        self.size = (int(self.size[0]), int(self.size[1]))
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if min(self.focal) <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def width(self) -> int:
        return self.size[0]

    @property
    def height(self) -> int:
        return self.size[1]

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), **kw) -> "CameraPose":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(np.stack([right, down, fwd]), eye, **kw)

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "center": self.center.tolist(),
            "focal": list(self.focal),
            "principal": list(self.principal),
            "size": list(self.size),
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(d["rotation"], d["center"], d["focal"], d["principal"], d["size"], name=d.get("name", ""))


def load_cameras(path) -> list[CameraPose]:
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = data["cameras"]
    return [CameraPose.from_dict(d) for d in data]


def save_cameras(cameras, path):
    with open(path, "w") as f:
        json.dump({"cameras": [c.to_dict() for c in cameras]}, f, indent=1)


# --- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2", "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4",
}


def _parse_header(data: bytes):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise PlyError("not a PLY file (missing 'ply' magic or end_header)")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    count = None
    props = []
    in_vertex = False
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
            elif count is None:
                raise PlyError(f"unsupported element before vertex: {tok[1]}")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise PlyError(f"list property not supported: {tok[-1]}")
            if tok[1] not in _PLY_TYPES:
                raise PlyError(f"unknown property type {tok[1]} for {tok[2]}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise PlyError(f"only binary_little_endian PLY is supported, got {fmt}")
    if count is None:
        raise PlyError("missing vertex element")
    return count, props, end + len(b"end_header\n")


def load_ply(data) -> GaussianCloud:
    """Parse a 3DGS-layout PLY (bytes or path) into an activated GaussianCloud."""
    if not isinstance(data, (bytes, bytearray, memoryview)):
        with open(data, "rb") as f:
            data = f.read()
    data = bytes(data)
    count, props, offset = _parse_header(data)
    dtype = np.dtype(props)
    if len(data) - offset < count * dtype.itemsize:
        raise PlyError("vertex data truncated")
    v = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    names = set(dtype.names or ())

    def column(name):
        if name not in names:
            raise PlyError(f"missing required property {name}")
        col = v[name].astype(np.float64)
        if not np.all(np.isfinite(col)):
            raise PlyError(f"non-finite values in property {name}")
        return col

    def columns(names_):
        return np.stack([column(n) for n in names_], axis=-1) if names_ else np.zeros((count, 0))

    pos = columns(["x", "y", "z"])
    dc = columns([f"f_dc_{i}" for i in range(3)])
    rest_names = sorted((n for n in names if n.startswith("f_rest_")), key=lambda n: int(n[7:]))
    rest = columns(rest_names)
    if rest.shape[1] % 3:
        raise PlyError(f"f_rest count {rest.shape[1]} is not a multiple of 3")
    per_channel = rest.shape[1] // 3
    sh_degree(per_channel + 1)
    sh = np.concatenate([dc[:, :, None], rest.reshape(count, 3, per_channel)], axis=2)
    opacity = sigmoid(column("opacity"))
    scale = np.exp(columns([f"scale_{i}" for i in range(3)]))
    rot = canonicalize_quaternions(columns([f"rot_{i}" for i in range(4)]))
    return GaussianCloud(pos, opacity, scale, rot, sh)


def save_ply(cloud: GaussianCloud, path=None) -> bytes:
    """Serialize with inverse activations; opacities are clamped away from 0 and 1 first."""
    n = len(cloud)
    rest = cloud.sh_coeffs.shape[2] - 1
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    arr = np.empty((n, len(names)), dtype="<f4")
    arr[:, 0:3] = cloud.positions
    arr[:, 3:6] = 0.0
    arr[:, 6:9] = cloud.sh_coeffs[:, :, 0]
    arr[:, 9:9 + 3 * rest] = cloud.sh_coeffs[:, :, 1:].reshape(n, -1)
    o = np.clip(cloud.opacities, OPACITY_CLAMP, 1 - OPACITY_CLAMP)
    arr[:, 9 + 3 * rest] = logit(o)
    arr[:, 10 + 3 * rest:13 + 3 * rest] = np.log(cloud.scales)
    arr[:, 13 + 3 * rest:] = cloud.rotations
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    out = ("\n".join(header) + "\n").encode("ascii") + arr.tobytes()
    if path is not None:
        with open(path, "wb") as f:
            f.write(out)
    return out
