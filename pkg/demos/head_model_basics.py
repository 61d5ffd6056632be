"""
Posing a synthetic head model
=============================

Build a small FLAME-style model, move the jaw, and write the result as OBJ.
"""

import numpy as np

from exprflow import FaceParams, compute_vertices, export_obj, synth_model

model = synth_model(n_vertices=500, n_shape=100, n_expr=50, n_joints=2, seed=0)
print("vertices:", model.base_vertices.shape, "faces:", model.faces.shape)

# all-zero parameters give the template back untouched
rest = compute_vertices(model, FaceParams.zeros(model))
print("template recovered exactly:", np.array_equal(rest, model.base_vertices))

# open the jaw a little and add a random expression
params = FaceParams.zeros(model).replace(
    expression=np.random.default_rng(1).normal(size=50),
    pose=np.array([0, 0, 0, 0.25, 0, 0]))
posed = compute_vertices(model, params)
print("max vertex displacement: %.4f" % np.linalg.norm(posed - rest, axis=1).max())

export_obj(posed, model.faces, "posed_head.obj")
print("wrote posed_head.obj")
