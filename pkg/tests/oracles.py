"""Independent reference implementations used only by the tests."""

import numpy as np


def rodrigues(rotvec):
    theta = np.linalg.norm(rotvec)
    if theta < 1e-12:
        return np.eye(3)
    k = rotvec / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


def lbs_bruteforce(model, shape, expr, pose):
    """Per-vertex loop with explicit 4x4 world transforms (rest pose removed)."""
    n = model.base_vertices.shape[0]
    rest = np.zeros((n, 3))
    for v in range(n):
        for c in range(3):
            acc = model.base_vertices[v, c]
            for i in range(len(shape)):
                acc += model.shape_basis[v, c, i] * shape[i]
            for i in range(len(expr)):
                acc += model.expr_basis[v, c, i] * expr[i]
            rest[v, c] = acc
    joints = model.joint_regressor @ rest

    n_joints = len(model.joint_parents)
    local_rot = [np.eye(3) for _ in range(n_joints)]
    for slot, j in enumerate(model.pose_joints):
        local_rot[j] = rodrigues(np.asarray(pose[3 * slot:3 * slot + 3], dtype=float))

    world = []
    for j, parent in enumerate(model.joint_parents):
        local = np.eye(4)
        local[:3, :3] = local_rot[j]
        local[:3, 3] = joints[j] - (joints[parent] if parent >= 0 else 0.0)
        world.append(local if parent < 0 else world[parent] @ local)
    skinning = []
    for j in range(n_joints):
        inv_rest = np.eye(4)
        inv_rest[:3, 3] = -joints[j]
        skinning.append(world[j] @ inv_rest)

    out = np.zeros((n, 3))
    for v in range(n):
        blended = np.zeros((4, 4))
        for j in range(n_joints):
            blended += model.skin_weights[v, j] * skinning[j]
        out[v] = (blended @ np.append(rest[v], 1.0))[:3]
    return out


def gradcheck(loss_fn, tensors, n_entries=12, eps=1e-6, seed=0):
    """Relative error between autograd and central differences, sampled on a
    random subset of entries per tensor (float64 tensors expected)."""
    import torch

    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic, numeric = [], []
    gen = np.random.default_rng(seed)
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            for i in gen.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
                analytic.append(0.0 if t.grad is None else t.grad.view(-1)[i].item())
    return rel_error(analytic, numeric)


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))
