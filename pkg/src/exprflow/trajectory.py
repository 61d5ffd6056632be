"""Expression trajectories: keyframes joined by linear interpolation.

A trajectory starts at the source face and visits each generated anchor in
turn. Between consecutive keyframes ``l`` and ``n`` there are ``F`` in-between
frames with ``e = d * e_l + (1 - d) * e_n`` (same for pose) and
``d = 1 - k / (F + 1)`` for ``k = 1..F``. Shape and camera always come from
the source face.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, ValidationError
from .head_model import FaceParams, HeadModel, compute_vertices_batch, export_obj
from .ned import NEDModel, flame_zero_neutral, generate_neutral

ROLES = ("source", "anchor", "interpolated", "neutral")


@dataclass(frozen=True)
class ExpressionFrame:
    params: FaceParams
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown frame role {self.role!r}")


@dataclass
class Trajectory:
    frames: list
    anchor_indices: list
    frames_per_segment: int

    def __len__(self):
        return len(self.frames)

    def expressions(self) -> np.ndarray:
        return np.stack([f.params.expression for f in self.frames])

    def poses(self) -> np.ndarray:
        return np.stack([f.params.pose for f in self.frames])

    def to_dict(self) -> dict:
        return {
            "frames_per_segment": self.frames_per_segment,
            "anchor_indices": list(self.anchor_indices),
            "frames": [dict(f.params.to_dict(), role=f.role) for f in self.frames],
        }

    def save_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load_json(cls, path) -> "Trajectory":
        doc = json.loads(Path(path).read_text())
        frames = [ExpressionFrame(FaceParams.from_dict(f), f["role"]) for f in doc["frames"]]
        return cls(frames, doc["anchor_indices"], doc["frames_per_segment"])


def interpolate(frame_l: ExpressionFrame, frame_n: ExpressionFrame, delta: float) -> ExpressionFrame:
    """Blend expression and pose; ``delta=1`` returns ``frame_l``'s values."""
    if not 0.0 <= delta <= 1.0:
        raise DomainError(f"delta must lie in [0, 1], got {delta}")
    pl, pn = frame_l.params, frame_n.params
    if not (np.array_equal(pl.shape, pn.shape) and np.array_equal(pl.camera, pn.camera)):
        raise ValidationError("frames to interpolate must share shape and camera")
    if delta == 1.0:
        e, theta = pl.expression.copy(), pl.pose.copy()
    elif delta == 0.0:
        e, theta = pn.expression.copy(), pn.pose.copy()
    else:
        e = delta * pl.expression + (1.0 - delta) * pn.expression
        theta = delta * pl.pose + (1.0 - delta) * pn.pose
    return ExpressionFrame(pl.replace(expression=e, pose=theta), "interpolated")


def _keyframes_to_trajectory(keyframes: list, F: int) -> Trajectory:
    if F < 0:
        raise ValidationError("frames per segment must be >= 0")
    frames, anchors = [keyframes[0]], [0]
    for left, right in zip(keyframes, keyframes[1:]):
        for k in range(1, F + 1):
            frames.append(interpolate(left, right, 1.0 - k / (F + 1)))
        anchors.append(len(frames))
        frames.append(right)
    return Trajectory(frames, anchors, F)


def _anchor_frames(source: FaceParams, anchors, role="anchor"):
    out = []
    for e, theta in anchors:
        out.append(ExpressionFrame(source.replace(expression=np.asarray(e, dtype=np.float64),
                                                  pose=np.asarray(theta, dtype=np.float64)), role))
    return out


def build_trajectory(source: FaceParams, anchors, F: int = 10) -> Trajectory:
    """Source frame followed by each ``(e, theta)`` anchor, ``F`` frames apart."""
    anchors = list(anchors)
    if not anchors:
        raise ValidationError("need at least one anchor")
    keyframes = [ExpressionFrame(source, "source")] + _anchor_frames(source, anchors)
    return _keyframes_to_trajectory(keyframes, F)


def insert_neutral(source: FaceParams, anchors, F: int = 10, ned: NEDModel | None = None,
                   seed: int = 0) -> Trajectory:
    """Like :func:`build_trajectory` with a neutral keyframe between consecutive
    anchors. Neutrals come from ``ned`` (seeded per gap) or, without a model,
    from zeroing expression and jaw of the preceding anchor."""
    anchors = list(anchors)
    if len(anchors) < 2:
        raise ValidationError("neutral insertion needs at least two anchors")
    keyframes = [ExpressionFrame(source, "source")]
    anchor_frames = _anchor_frames(source, anchors)
    for i, frame in enumerate(anchor_frames):
        if i > 0:
            if ned is not None:
                e, theta = generate_neutral(ned, int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
            else:
                e, theta = flame_zero_neutral(anchor_frames[i - 1].params.pose)
            keyframes.append(ExpressionFrame(source.replace(expression=e, pose=theta), "neutral"))
        keyframes.append(frame)
    return _keyframes_to_trajectory(keyframes, F)


def meshes_for(traj: Trajectory, model: HeadModel) -> list:
    """Posed vertices for every frame, in order."""
    shape = np.stack([f.params.shape for f in traj.frames])
    expr = traj.expressions()
    pose = traj.poses()
    return list(compute_vertices_batch(model, shape, expr, pose))


def export_obj_sequence(traj: Trajectory, model: HeadModel, directory) -> list:
    """Write ``frame_0000.obj`` ... into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, verts in enumerate(meshes_for(traj, model)):
        paths.append(export_obj(verts, model.faces, directory / f"frame_{i:04d}.obj"))
    return paths
