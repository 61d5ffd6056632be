"""FLAME-style parametric head: blendshapes followed by linear blend skinning.

Vertices are produced as ``W(V_b + S @ shape + B @ expr, pose)`` where ``W`` is
standard LBS over a small kinematic tree. Pose correctives are not modelled.

The math lives in :class:`HeadLayer` (torch, batched, differentiable) so the
same code path serves mesh export and the vertex loss used during training.
The numpy functions below are thin wrappers around it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archive import load_archive, save_archive
from .errors import ConfigurationError, DomainError, ShapeError, ValidationError

_SMALL_ANGLE = 1e-8


@dataclass(frozen=True, eq=False)
class HeadModel:
    """Linear head model. Arrays are float64, vertices in meters.

    ``pose_joints`` maps consecutive 3-vectors of the pose parameter onto joint
    indices; the default maps slot 0 to the root (global rotation) and slot 1 to
    joint 1 (jaw).
    """

    base_vertices: np.ndarray  # (N, 3)
    shape_basis: np.ndarray  # (N, 3, M)
    expr_basis: np.ndarray  # (N, 3, K)
    faces: np.ndarray  # (F, 3) int
    joint_regressor: np.ndarray  # (J, N)
    skin_weights: np.ndarray  # (N, J)
    joint_parents: tuple  # (J,)
    pose_dim: int = 6
    pose_joints: tuple | None = None
    _layer: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        for name in ("base_vertices", "shape_basis", "expr_basis", "joint_regressor", "skin_weights"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "joint_parents", tuple(int(p) for p in self.joint_parents))
        if self.pose_joints is None:
            object.__setattr__(self, "pose_joints", tuple(range(self.pose_dim // 3)))
        else:
            object.__setattr__(self, "pose_joints", tuple(int(j) for j in self.pose_joints))
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.base_vertices.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[2]

    @property
    def n_joints(self) -> int:
        return len(self.joint_parents)

    def validate(self):
        n = self.base_vertices.shape[0]
        if self.base_vertices.shape != (n, 3):
            raise ShapeError(f"base_vertices must be (N, 3), got {self.base_vertices.shape}")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[:2] != (n, 3):
            raise ShapeError(f"shape_basis must be (N, 3, M), got {self.shape_basis.shape}")
        if self.expr_basis.ndim != 3 or self.expr_basis.shape[:2] != (n, 3):
            raise ShapeError(f"expr_basis must be (N, 3, K), got {self.expr_basis.shape}")
        j = len(self.joint_parents)
        if self.joint_regressor.shape != (j, n):
            raise ShapeError(f"joint_regressor must be ({j}, {n}), got {self.joint_regressor.shape}")
        if self.skin_weights.shape != (n, j):
            raise ShapeError(f"skin_weights must be ({n}, {j}), got {self.skin_weights.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ShapeError("face index out of range")
        if (self.skin_weights < 0).any() or not np.allclose(self.skin_weights.sum(1), 1.0, atol=1e-6, rtol=0):
            raise ValidationError("skin weights must be non-negative with rows summing to 1")
        for idx, parent in enumerate(self.joint_parents):
            # parents precede children, which also rules out cycles
            if parent != -1 and not 0 <= parent < idx:
                raise ValidationError(f"joint {idx} has invalid parent {parent}")
        if self.pose_dim % 3 or len(self.pose_joints) != self.pose_dim // 3:
            raise ValidationError("pose_dim must be 3 * len(pose_joints)")
        if any(not 0 <= p < j for p in self.pose_joints):
            raise ValidationError(f"pose_joints {self.pose_joints} out of range for {j} joints")

    def layer(self, dtype=torch.float64) -> "HeadLayer":
        """Cached torch module holding this model's tensors."""
        if dtype not in self._layer:
            self._layer[dtype] = HeadLayer(self, dtype=dtype)
        return self._layer[dtype]

    def save(self, path) -> Path:
        tensors = {
            "base_vertices": self.base_vertices,
            "shape_basis": self.shape_basis,
            "expr_basis": self.expr_basis,
            "faces": self.faces,
            "joint_regressor": self.joint_regressor,
            "skin_weights": self.skin_weights,
            "joint_parents": np.asarray(self.joint_parents),
        }
        meta = {"kind": "head_model", "pose_dim": self.pose_dim, "pose_joints": list(self.pose_joints),
                "n_vertices": self.n_vertices, "n_shape": self.n_shape, "n_expr": self.n_expr}
        # float64 keeps a save/load round trip bit-exact
        return save_archive(path, tensors, meta, dtype="float64")

    @classmethod
    def load(cls, path) -> "HeadModel":
        tensors, meta = load_archive(path)
        return cls(
            base_vertices=tensors["base_vertices"],
            shape_basis=tensors["shape_basis"],
            expr_basis=tensors["expr_basis"],
            faces=tensors["faces"],
            joint_regressor=tensors["joint_regressor"],
            skin_weights=tensors["skin_weights"],
            joint_parents=tuple(tensors["joint_parents"].tolist()),
            pose_dim=int(meta.get("pose_dim", 6)),
            pose_joints=tuple(meta["pose_joints"]) if "pose_joints" in meta else None,
        )


@dataclass(frozen=True)
class FaceParams:
    """Coefficients of one face: shape, expression, pose (axis-angle) and camera."""

    shape: np.ndarray
    expression: np.ndarray
    pose: np.ndarray
    camera: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("shape", "expression", "pose", "camera"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            object.__setattr__(self, name, arr)
        if self.camera.shape != (3,):
            raise ShapeError(f"camera must have 3 entries, got {self.camera.shape[0]}")

    @classmethod
    def zeros(cls, model: HeadModel) -> "FaceParams":
        return cls(np.zeros(model.n_shape), np.zeros(model.n_expr), np.zeros(model.pose_dim))

    def replace(self, **changes) -> "FaceParams":
        fields = {"shape": self.shape, "expression": self.expression, "pose": self.pose, "camera": self.camera}
        fields.update(changes)
        return FaceParams(**fields)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("shape", "expression", "pose", "camera")}

    @classmethod
    def from_dict(cls, d: dict) -> "FaceParams":
        try:
            return cls(d["shape"], d["expression"], d["pose"], d.get("camera", [0.0, 0.0, 0.0]))
        except KeyError as exc:
            raise ValidationError(f"face params missing key {exc}") from exc


def rodrigues_minus_identity(rotvec: torch.Tensor) -> torch.Tensor:
    """Return ``R - I`` for axis-angle vectors of shape (..., 3).

    Working with ``R - I`` keeps the zero-pose case exact: every term vanishes
    identically instead of cancelling in floating point.
    """
    x, y, z = rotvec.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(rotvec.shape[:-1] + (3, 3))
    theta2 = (rotvec * rotvec).sum(-1)
    small = theta2 < _SMALL_ANGLE ** 2
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    return a[..., None, None] * k + b[..., None, None] * (k @ k)


class HeadLayer(nn.Module):
    """Batched, differentiable evaluation of a :class:`HeadModel`."""

    def __init__(self, model: HeadModel, dtype=torch.float64):
        super().__init__()
        as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
        self.register_buffer("base", as_t(model.base_vertices))
        self.register_buffer("shapedirs", as_t(model.shape_basis))
        self.register_buffer("exprdirs", as_t(model.expr_basis))
        self.register_buffer("j_regressor", as_t(model.joint_regressor))
        self.register_buffer("weights", as_t(model.skin_weights))
        self.parents = list(model.joint_parents)
        self.pose_joints = list(model.pose_joints)
        self.n_shape, self.n_expr, self.pose_dim = model.n_shape, model.n_expr, model.pose_dim

    def forward(self, shape: torch.Tensor, expr: torch.Tensor, pose: torch.Tensor) -> torch.Tensor:
        """(B, M), (B, K), (B, P) -> (B, N, 3)."""
        batch = pose.shape[0]
        blended = (self.base
                   + torch.einsum("nck,bk->bnc", self.shapedirs, shape)
                   + torch.einsum("nck,bk->bnc", self.exprdirs, expr))
        joints = torch.einsum("jn,bnc->bjc", self.j_regressor, blended)

        n_joints = len(self.parents)
        rotvecs = [torch.zeros(batch, 3, dtype=pose.dtype, device=pose.device) for _ in range(n_joints)]
        for slot, j in enumerate(self.pose_joints):
            rotvecs[j] = pose[:, 3 * slot:3 * slot + 3]
        local = rodrigues_minus_identity(torch.stack(rotvecs, 1))  # (B, J, 3, 3)

        # world rotation minus identity, and world joint displacement from rest
        rot_w, disp = [], []
        for j, parent in enumerate(self.parents):
            if parent < 0:
                rot_w.append(local[:, j])
                disp.append(torch.zeros_like(joints[:, j]))
            else:
                rp = rot_w[parent]
                rot_w.append(rp @ local[:, j] + rp + local[:, j])
                bone = joints[:, j] - joints[:, parent]
                disp.append(torch.einsum("bij,bj->bi", rp, bone) + disp[parent])
        rot_w = torch.stack(rot_w, 1)
        disp = torch.stack(disp, 1)

        # v' = v + sum_j w_j [(R_j - I)(v - J_j) + D_j]
        rel = blended[:, :, None, :] - joints[:, None, :, :]  # (B, N, J, 3)
        moved = torch.einsum("bjik,bnjk->bnji", rot_w, rel) + disp[:, None]
        return blended + torch.einsum("nj,bnji->bni", self.weights, moved)


def _check_params(model: HeadModel, params: FaceParams):
    for name, arr, n in (("shape", params.shape, model.n_shape),
                         ("expression", params.expression, model.n_expr),
                         ("pose", params.pose, model.pose_dim)):
        if arr.shape != (n,):
            raise ShapeError(f"{name} has {arr.shape[0]} entries, model expects {n}")
        if not np.isfinite(arr).all():
            raise DomainError(f"{name} contains non-finite values")
    if not np.isfinite(params.camera).all():
        raise DomainError("camera contains non-finite values")


def compute_vertices(model: HeadModel, params: FaceParams) -> np.ndarray:
    """Posed vertex positions (N, 3) for one set of face parameters."""
    _check_params(model, params)
    layer = model.layer(torch.float64)
    with torch.no_grad():
        out = layer(torch.from_numpy(params.shape[None]),
                    torch.from_numpy(params.expression[None]),
                    torch.from_numpy(params.pose[None]))
    return out[0].numpy()


def compute_vertices_batch(model: HeadModel, shape, expr, pose) -> np.ndarray:
    """Vectorised :func:`compute_vertices` over leading batch axis."""
    shape, expr, pose = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (shape, expr, pose))
    if shape.shape[1] != model.n_shape or expr.shape[1] != model.n_expr or pose.shape[1] != model.pose_dim:
        raise ShapeError("parameter widths do not match the head model")
    with torch.no_grad():
        out = model.layer(torch.float64)(torch.from_numpy(shape), torch.from_numpy(expr), torch.from_numpy(pose))
    return out.numpy()


def reconstruct_head(model: HeadModel, params: FaceParams) -> np.ndarray:
    """Head mesh for one frame. The hair/shoulder deformation term is zero here."""
    return compute_vertices(model, params)


def synth_model(n_vertices: int, n_shape: int, n_expr: int, n_joints: int, seed: int,
                pose_dim: int = 6) -> HeadModel:
    """Deterministic random head model with valid skinning data.

    Vertices lie in the unit ball, basis columns are scaled so a unit coefficient
    moves vertices by roughly a centimetre, and skin weights are a softmax of
    Gaussian logits (non-negative, rows sum to one).
    """
    if n_vertices < 4 or n_joints < 2 or n_shape < 1 or n_expr < 1:
        raise ConfigurationError("need n_vertices >= 4, n_joints >= 2, n_shape >= 1, n_expr >= 1")
    if pose_dim % 3 or pose_dim // 3 > n_joints:
        raise ConfigurationError(f"pose_dim {pose_dim} incompatible with {n_joints} joints")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(n_vertices, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(size=(n_vertices, 1)) ** (1.0 / 3.0)
    base = 0.1 * direction * radius  # head-sized: 10 cm radius

    shape_basis = 0.01 * rng.normal(size=(n_vertices, 3, n_shape)) / np.sqrt(n_shape)
    expr_basis = 0.01 * rng.normal(size=(n_vertices, 3, n_expr)) / np.sqrt(n_expr)

    # chain: root, then each joint hangs off a random earlier joint
    parents = [-1] + [int(rng.integers(0, j)) for j in range(1, n_joints)]
    regressor = rng.uniform(size=(n_joints, n_vertices)) ** 4
    regressor /= regressor.sum(1, keepdims=True)
    logits = 2.0 * rng.normal(size=(n_vertices, n_joints))
    weights = np.exp(logits - logits.max(1, keepdims=True))
    weights /= weights.sum(1, keepdims=True)

    faces = []
    for i in range(n_vertices - 2):
        faces.append((i, i + 1, i + 2) if i % 2 == 0 else (i + 1, i, i + 2))
    return HeadModel(base, shape_basis, expr_basis, np.asarray(faces), regressor, weights,
                     tuple(parents), pose_dim=pose_dim)


def export_obj(vertices, faces, path) -> Path:
    """Write a Wavefront OBJ with only ``v`` and ``f`` records."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ShapeError(f"vertices must be (N, 3), got {vertices.shape}")
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise ShapeError("face index out of range for vertex count")
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def parse_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back ``v``/``f`` records written by :func:`export_obj`."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)
