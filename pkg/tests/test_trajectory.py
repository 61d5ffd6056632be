import numpy as np
import pytest

from exprflow.dataset import synth_neutral_set
from exprflow.errors import DomainError, ValidationError
from exprflow.head_model import FaceParams, compute_vertices, synth_model
from exprflow.ned import NEDConfig, train_ned
from exprflow.trajectory import (ExpressionFrame, Trajectory, build_trajectory, export_obj_sequence,
                                 insert_neutral, interpolate, meshes_for)


def frame(e, theta=None, shape=None, camera=None):
    p = FaceParams(np.zeros(10) if shape is None else shape, np.asarray(e, dtype=float),
                   np.zeros(6) if theta is None else theta, np.zeros(3) if camera is None else camera)
    return ExpressionFrame(p, "anchor")


@pytest.fixture
def setup(rng):
    source = FaceParams(rng.normal(size=10), rng.normal(size=50), 0.1 * rng.normal(size=6), rng.normal(size=3))
    anchors = [(rng.normal(size=50), 0.1 * rng.normal(size=6)) for _ in range(2)]
    return source, anchors


def test_interpolate_endpoints(rng):
    a, b = frame(rng.normal(size=50)), frame(rng.normal(size=50))
    assert np.array_equal(interpolate(a, b, 1.0).params.expression, a.params.expression)
    assert np.array_equal(interpolate(a, b, 0.0).params.expression, b.params.expression)
    assert interpolate(a, b, 0.3).role == "interpolated"


def test_interpolate_midpoint():
    e_l, e_n = np.zeros(50), np.zeros(50)
    e_l[0], e_n[1] = 1.0, 1.0
    out = interpolate(frame(e_l), frame(e_n), 0.5).params.expression
    expected = np.zeros(50)
    expected[:2] = 0.5
    assert np.array_equal(out, expected)


def test_interpolate_quarter(rng):
    a = frame(rng.normal(size=50), rng.normal(size=6))
    b = frame(rng.normal(size=50), rng.normal(size=6))
    out = interpolate(a, b, 0.25).params
    assert np.abs(out.expression - (0.25 * a.params.expression + 0.75 * b.params.expression)).max() < 1e-12
    assert np.abs(out.pose - (0.25 * a.params.pose + 0.75 * b.params.pose)).max() < 1e-12


@pytest.mark.parametrize("delta", [-0.01, 1.01, float("nan")])
def test_interpolate_rejects_delta(delta):
    with pytest.raises(DomainError):
        interpolate(frame(np.zeros(50)), frame(np.zeros(50)), delta)


def test_interpolate_rejects_identity_mismatch():
    with pytest.raises(ValidationError):
        interpolate(frame(np.zeros(50)), frame(np.zeros(50), shape=np.ones(10)), 0.5)
    with pytest.raises(ValidationError):
        interpolate(frame(np.zeros(50)), frame(np.zeros(50), camera=np.ones(3)), 0.5)


def test_frame_counts(setup):
    source, anchors = setup
    traj = build_trajectory(source, anchors, F=10)
    assert len(traj) == 23 and traj.anchor_indices == [0, 11, 22]
    assert [traj.frames[i].role for i in traj.anchor_indices] == ["source", "anchor", "anchor"]
    assert np.array_equal(traj.frames[11].params.expression, anchors[0][0])
    assert np.array_equal(traj.frames[22].params.pose, anchors[1][1])


def test_zero_frames_per_segment(setup):
    source, anchors = setup
    traj = build_trajectory(source, anchors, F=0)
    assert len(traj) == 3
    assert traj.frames[0].params is source
    assert np.array_equal(traj.frames[1].params.expression, anchors[0][0])


def test_rejects_empty_or_negative(setup):
    source, anchors = setup
    with pytest.raises(ValidationError):
        build_trajectory(source, [], F=3)
    with pytest.raises(ValidationError):
        build_trajectory(source, anchors, F=-1)


def test_segments_are_affine(setup):
    source, anchors = setup
    traj = build_trajectory(source, anchors, F=10)
    e, p = traj.expressions(), traj.poses()
    for lo, hi in zip(traj.anchor_indices, traj.anchor_indices[1:]):
        for series in (e[lo:hi + 1], p[lo:hi + 1]):
            steps = np.diff(series, axis=0)
            assert np.abs(steps - steps[0]).max() < 1e-10


def test_identity_and_camera_constant(setup):
    source, anchors = setup
    for f in build_trajectory(source, anchors, F=4).frames:
        assert np.array_equal(f.params.shape, source.shape)
        assert np.array_equal(f.params.camera, source.camera)


def test_delta_strictly_decreasing(setup):
    source, anchors = setup
    traj = build_trajectory(source, anchors, F=6)
    seg = traj.expressions()[11:23]
    # distance to the left anchor grows monotonically along the segment
    d = np.linalg.norm(seg - seg[0], axis=1)
    assert np.all(np.diff(d) > 0)


def test_neutral_insertion_flame_zero(setup):
    source, anchors = setup
    traj = insert_neutral(source, anchors, F=5)
    assert len(traj) == 19
    assert [traj.frames[i].role for i in traj.anchor_indices] == ["source", "anchor", "neutral", "anchor"]
    neutral = traj.frames[traj.anchor_indices[2]].params
    assert not neutral.expression.any() and not neutral.pose[3:].any()


def test_neutral_insertion_with_ned(setup):
    e, p, center, std = synth_neutral_set(200, seed=1)
    ned = train_ned(np.concatenate([e, p], 1), NEDConfig(epochs=60, seed=0))
    source, anchors = setup
    a = insert_neutral(source, anchors, F=5, ned=ned, seed=3)
    b = insert_neutral(source, anchors, F=5, ned=ned, seed=3)
    assert a.to_dict() == b.to_dict()
    n = a.frames[a.anchor_indices[2]].params
    assert np.all(np.abs(np.r_[n.expression, n.pose] - center) <= 3 * std)
    with pytest.raises(ValidationError):
        insert_neutral(source, anchors[:1], F=5, ned=ned)


def test_meshes_and_obj_sequence(tmp_path, setup):
    source, anchors = setup
    model = synth_model(32, 10, 50, 2, seed=0)
    traj = build_trajectory(source, anchors, F=10)
    meshes = meshes_for(traj, model)
    assert len(meshes) == 23
    assert np.abs(meshes[11] - compute_vertices(model, traj.frames[11].params)).max() < 1e-12
    paths = export_obj_sequence(traj, model, tmp_path / "obj")
    assert [p.name for p in paths][:2] == ["frame_0000.obj", "frame_0001.obj"] and len(paths) == 23
    same = Trajectory([traj.frames[0], traj.frames[0]], [0, 1], 0)
    m2 = meshes_for(same, model)
    assert np.array_equal(m2[0], m2[1])


def test_vertex_steps_respect_blendshape_bound(rng):
    model = synth_model(64, 10, 50, 3, seed=4)
    F = 7
    source = FaceParams(rng.normal(size=10), rng.normal(size=50), np.zeros(6))
    anchors = [(rng.normal(size=50), np.zeros(6)), (rng.normal(size=50), np.zeros(6))]
    traj = build_trajectory(source, anchors, F)
    meshes = np.stack(meshes_for(traj, model))
    # per-vertex operator norm of the expression basis bounds how far a vertex moves per unit of e
    lipschitz = max(np.linalg.norm(model.expr_basis[v], 2) for v in range(model.n_vertices))
    e = traj.expressions()
    for lo, hi in zip(traj.anchor_indices, traj.anchor_indices[1:]):
        bound = lipschitz * np.linalg.norm(e[hi] - e[lo]) / (F + 1)
        steps = np.linalg.norm(np.diff(meshes[lo:hi + 1], axis=0), axis=-1)
        assert steps.max() <= bound + 1e-12


def test_json_round_trip(tmp_path, setup):
    source, anchors = setup
    traj = build_trajectory(source, anchors, F=2)
    traj.save_json(tmp_path / "t.json")
    back = Trajectory.load_json(tmp_path / "t.json")
    assert back.to_dict() == traj.to_dict()
