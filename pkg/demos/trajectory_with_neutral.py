"""
Expression trajectories with a neutral pause
============================================

Anchors here are drawn by hand; in practice they come from ``generate``.
"""

import numpy as np

from exprflow import (FaceParams, NEDConfig, build_trajectory, export_obj_sequence, insert_neutral,
                      synth_model, synth_neutral_set, train_ned)

rng = np.random.default_rng(0)
model = synth_model(200, 100, 50, 2, seed=0)
source = FaceParams(rng.normal(size=100), np.zeros(50), np.zeros(6))
anchors = [(rng.normal(size=50), np.r_[0, 0, 0, 0.2, 0, 0]),
           (rng.normal(size=50), np.r_[0, 0, 0, 0.05, 0, 0])]

traj = build_trajectory(source, anchors, F=10)
print(len(traj), "frames, anchors at", traj.anchor_indices)

# a neutral face between the two expressions
expr, pose, _, _ = synth_neutral_set(500, seed=0)
ned = train_ned(np.c_[expr, pose], NEDConfig(epochs=50, seed=0))
print("NED reconstruction mse: %.5f -> %.5f" % (ned.history[0], ned.history[-1]))

traj = insert_neutral(source, anchors, F=5, ned=ned, seed=1)
print(len(traj), "frames:", [traj.frames[i].role for i in traj.anchor_indices])

paths = export_obj_sequence(traj, model, "trajectory_obj")
print("wrote", len(paths), "OBJ files to trajectory_obj/")
