"""3D Gaussian primitives, spherical-harmonics colour and PLY interchange.

A ``GaussianScene`` stores the *raw* encodings used by 3DGS tooling
(opacity as a logit, scale as a log) so the PLY round trip is exact; the
activated values are exposed as properties.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import quat_normalize, quat_to_rotmat

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)
SH_DC_OFFSET = 0.5
MAX_SH_DEGREE = 3

LOG_SCALE_MIN = float(np.log(1e-6))
LOG_SCALE_MAX = float(np.log(1e2))


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_for(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if degree < 0 or degree > MAX_SH_DEGREE or sh_coeff_count(degree) != count:
        raise ValueError(f"{count} SH coefficients per channel does not match any degree 0..{MAX_SH_DEGREE}")
    return degree


def sh_basis(dirs, degree: int) -> list:
    """Real SH basis terms (3DGS sign convention) for unit directions ``dirs[..., 3]``.

    Works on numpy arrays and autodiff tensors alike; returns one term per
    coefficient, each shaped like ``dirs[..., 0]``.
    """
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    terms = [x * 0.0 + SH_C0]
    if degree > 0:
        terms += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        terms += [
            SH_C2[0] * (x * y),
            SH_C2[1] * (y * z),
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * (x * z),
            SH_C2[4] * (xx - yy),
        ]
    if degree > 2:
        terms += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * (x * y) * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return terms


def sh_eval(coeffs, direction, clamp: bool = True) -> np.ndarray:
    """RGB from SH coefficients ``coeffs[..., n, 3]`` along unit ``direction[..., 3]``.

    Adds the 0.5 DC offset; clamps to [0, 1] unless ``clamp`` is False.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim < 2 or coeffs.shape[-1] != 3:
        raise ValueError(f"SH coefficients must be shaped (..., n, 3), got {coeffs.shape}")
    degree = sh_degree_for(coeffs.shape[-2])
    basis = np.stack(sh_basis(np.asarray(direction, dtype=np.float64), degree), axis=-1)
    rgb = np.einsum("...n,...nc->...c", basis, coeffs) + SH_DC_OFFSET
    return np.clip(rgb, 0.0, 1.0) if clamp else rgb


def rgb_to_sh_dc(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - SH_DC_OFFSET) / SH_C0


def covariance(rotation, scale) -> np.ndarray:
    """``R diag(s)^2 R^T`` for a quaternion and positive per-axis scales."""
    s = np.asarray(scale, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError(f"scales must be positive, got {s}")
    R = quat_to_rotmat(rotation)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class Gaussian3D:
    center: np.ndarray
    opacity: float
    rotation: np.ndarray
    scale: np.ndarray
    sh: np.ndarray  # (n, 3)

    def __post_init__(self):
        if not 0.0 < self.opacity < 1.0:
            raise ValueError(f"opacity must lie in (0, 1), got {self.opacity}")
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError(f"scale components must be positive, got {self.scale}")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must be unit norm")
        sh_degree_for(np.asarray(self.sh).shape[0])


@dataclass
class GaussianScene:
    """Struct-of-arrays Gaussian set in the canonical (reference-view) frame."""

    means: np.ndarray  # (G, 3)
    opacity_logits: np.ndarray  # (G,)
    rotations: np.ndarray  # (G, 4) unit
    log_scales: np.ndarray  # (G, 3)
    sh: np.ndarray  # (G, n, 3)
    frame: str = "canonical"

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float32).reshape(-1, 3)
        g = len(self.means)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float32).reshape(g)
        self.rotations = np.asarray(self.rotations, dtype=np.float32).reshape(g, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float32).reshape(g, 3)
        sh = np.asarray(self.sh, dtype=np.float32)
        self.sh = sh.reshape(g, -1, 3) if sh.size else np.zeros((g, sh.shape[1] if sh.ndim == 3 else 1, 3), np.float32)
        sh_degree_for(self.sh.shape[1])

    @classmethod
    def from_activated(cls, means, opacities, rotations, scales, sh) -> GaussianScene:
        rotations = np.asarray(rotations, dtype=np.float64)
        if len(rotations):
            rotations = quat_normalize(rotations)
        return cls(means, logit(opacities), rotations, np.log(np.asarray(scales, dtype=np.float64)), sh)

    @classmethod
    def empty(cls, sh_degree: int = 1) -> GaussianScene:
        n = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, n, 3)))

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i].astype(np.float64), float(self.opacities[i]),
                          self.rotations[i].astype(np.float64), self.scales[i], self.sh[i].astype(np.float64))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def sh_degree(self) -> int:
        return sh_degree_for(self.sh.shape[1])

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    def subset(self, index) -> GaussianScene:
        return GaussianScene(self.means[index], self.opacity_logits[index], self.rotations[index],
                             self.log_scales[index], self.sh[index], self.frame)

    def equals(self, other: GaussianScene) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(
            (self.means, self.opacity_logits, self.rotations, self.log_scales, self.sh),
            (other.means, other.opacity_logits, other.rotations, other.log_scales, other.sh)))


# -- PLY interchange ----------------------------------------------------------


class PlyError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _ply_fields(n_coeffs: int) -> list[str]:
    fields = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    fields += [f"f_rest_{i}" for i in range(3 * (n_coeffs - 1))]
    fields += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return fields


def export_ply(scene: GaussianScene, path) -> None:
    n = scene.sh.shape[1]
    fields = _ply_fields(n)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(scene)}"]
    header += [f"property float {f}" for f in fields]
    header.append("end_header")
    g = len(scene)
    # f_rest is channel-major: all coefficients of R, then G, then B
    rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(g, 3 * (n - 1))
    rows = np.concatenate([
        scene.means, np.zeros((g, 3), np.float32), scene.sh[:, 0, :], rest,
        scene.opacity_logits[:, None], scene.log_scales, scene.rotations,
    ], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rows.tobytes())


def import_ply(path) -> GaussianScene:
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n"):
        raise PlyError("missing 'ply' magic line", 0)
    if end < 0:
        raise PlyError("header has no end_header line", len(buf))
    body_start = end + len(b"end_header\n")
    count = None
    fields: list[str] = []
    offset = 4
    for line in buf[4:end].decode("ascii", errors="replace").splitlines():
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            pass
        elif parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise PlyError(f"unsupported format {' '.join(parts[1:])!r}", offset)
        elif parts[0] == "element":
            if len(parts) != 3 or parts[1] != "vertex" or count is not None:
                raise PlyError(f"unexpected element declaration {line!r}", offset)
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyError(f"bad vertex count {parts[2]!r}", offset) from None
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] != "float":
                raise PlyError(f"only 'property float <name>' is supported, got {line!r}", offset)
            fields.append(parts[2])
        else:
            raise PlyError(f"unrecognised header line {line!r}", offset)
        offset += len(line) + 1
    if count is None:
        raise PlyError("no vertex element declared", body_start)
    n_rest = sum(f.startswith("f_rest_") for f in fields)
    n_coeffs = n_rest // 3 + 1
    expected = _ply_fields(n_coeffs)
    if fields != expected:
        raise PlyError(f"unexpected property layout {fields[:12]}...", body_start)
    need = count * len(fields) * 4
    if len(buf) - body_start < need:
        raise PlyError(f"truncated payload: need {need} bytes, have {len(buf) - body_start}",
                       len(buf))
    rows = np.frombuffer(buf, dtype="<f4", count=count * len(fields), offset=body_start)
    rows = rows.reshape(count, len(fields)).astype(np.float32)
    col = {name: i for i, name in enumerate(fields)}
    means = rows[:, 0:3]
    dc = rows[:, col["f_dc_0"]:col["f_dc_0"] + 3]
    rest = rows[:, col["f_dc_0"] + 3:col["opacity"]].reshape(count, 3, n_coeffs - 1).transpose(0, 2, 1)
    sh = np.concatenate([dc[:, None, :], rest], axis=1)
    return GaussianScene(
        means.copy(),
        rows[:, col["opacity"]].copy(),
        rows[:, col["rot_0"]:col["rot_0"] + 4].copy(),
        rows[:, col["scale_0"]:col["scale_0"] + 3].copy(),
        sh,
    )
