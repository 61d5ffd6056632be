"""Benchmark and ablation runner shared by the CLI and the acceptance tests.

A run is fully described by a plain dict (see :func:`default_run_config`), so
the resolved configuration written next to every output is enough to repeat
the run bit-for-bit.
"""

from __future__ import annotations

import copy
import time

import numpy as np

from .dataset import SyntheticGenConfig, generate_synthetic, split
from .eval_harness import evaluate_generation
from .head_model import synth_model
from .i2fet import I2FETConfig, TrainConfig, build_model, embed_manifest, train
from .text_embed import ExpressionVocabulary, make_provider

# desk-scale settings of the end-to-end benchmark
BENCHMARK_EPOCHS = 50


def default_run_config() -> dict:
    return {
        "data": {"vocab": "ck", "samples_per_pair": 50, "seed": 0, "noise_std": 0.05,
                 "global_pose_jitter_std": 0.02, "n_shape": 100, "class_multipliers": None,
                 "test_frac": 0.10, "val_frac_of_train": 0.10},
        "embedding": {"kind": "hashing", "n_rows": 16, "dim": 64, "seed": 0, "context_decay": 0.5},
        "head": {"n_vertices": 32, "n_joints": 2, "seed": 0},
        "model": {k: v for k, v in I2FETConfig().to_dict().items() if k not in ("text_rows", "text_dim")},
        "train": dict(TrainConfig(epochs=BENCHMARK_EPOCHS).to_dict()),
        "eval": {"seed": 0, "repeats": 1},
        "trajectory": {"frames_per_segment": 10},
    }


def merge(base: dict, override: dict | None) -> dict:
    """Recursive dict update returning a new dict."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def data_config(cfg: dict) -> SyntheticGenConfig:
    d = cfg["data"]
    return SyntheticGenConfig(vocab=ExpressionVocabulary.named(d["vocab"]) if isinstance(d["vocab"], str)
                              else ExpressionVocabulary(d["vocab"]),
                              samples_per_pair=d["samples_per_pair"], noise_std=d["noise_std"],
                              global_pose_jitter_std=d["global_pose_jitter_std"], seed=d["seed"],
                              n_shape=d["n_shape"], class_multipliers=d.get("class_multipliers"))


def model_config(cfg: dict) -> I2FETConfig:
    emb = cfg["embedding"]
    return I2FETConfig.from_dict(dict(cfg["model"], text_rows=emb["n_rows"], text_dim=emb["dim"],
                                      ifed_enabled=cfg["train"]["ifed_enabled"]))


def build_dataset(cfg: dict):
    d = cfg["data"]
    manifest = generate_synthetic(data_config(cfg))
    return split(manifest, d["test_frac"], d["val_frac_of_train"], seed=d["seed"])


def run_benchmark(cfg: dict | None = None, manifest=None, embeddings=None) -> dict:
    """Generate data, train, evaluate. Returns metrics plus the trained pieces."""
    cfg = merge(default_run_config(), cfg)
    start = time.perf_counter()
    if manifest is None:
        manifest = build_dataset(cfg)
    provider = make_provider(cfg["embedding"])
    if embeddings is None:
        embeddings = embed_manifest(manifest, provider)
    h = cfg["head"]
    head = synth_model(h["n_vertices"], manifest.samples[0].shape.shape[0], 50, h["n_joints"], h["seed"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    model = build_model(model_config(cfg), tcfg.seed)
    model, log = train(model, manifest, head, tcfg, embeddings=embeddings)
    test_idx = manifest.indices("test")
    test = manifest.subset("test")
    reports = [evaluate_generation(model, test, embeddings=embeddings[test_idx], seed=cfg["eval"]["seed"] + r)
               for r in range(cfg["eval"]["repeats"])]
    metrics = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("acc1", "acc2", "gmean")}
    metrics["std"] = {k: float(np.std([getattr(r, k) for r in reports])) for k in ("acc1", "acc2", "gmean")}
    metrics["ground_truth_acc1"] = reports[0].ground_truth.acc1
    metrics["final_val_total"] = float(log.rows[-1]["val_total"])
    metrics["first_val_total"] = float(log.rows[0]["val_total"])
    last = log.rows[-1]
    metrics["final_components"] = {k: float(last[f"val_{k}"]) for k in ("e", "p", "v")}
    metrics["seconds"] = time.perf_counter() - start
    return {"config": cfg, "metrics": metrics, "model": model, "log": log, "head": head,
            "manifest": manifest, "embeddings": embeddings, "report": reports[0]}


ABLATION_GRIDS = {
    # IFED on/off, plus the vertex-loss variant
    "ifed": {
        "w/o IFED": {"train": {"ifed_enabled": False, "use_vertex_loss": False}},
        "w/ IFED": {"train": {"ifed_enabled": True, "use_vertex_loss": False}},
        "w/ IFED + L_v": {"train": {"ifed_enabled": True, "use_vertex_loss": True}},
    },
    "loss": {
        "L_e": {"train": {"use_pose_loss": False, "use_vertex_loss": False}},
        "L_e+L_p": {"train": {"use_pose_loss": True, "use_vertex_loss": False}},
        "L_e+L_p+L_v": {"train": {"use_pose_loss": True, "use_vertex_loss": True}},
    },
    "caft": {
        "1 CAFT": {"model": {"n_caft_layers": 1, "n_facial_layers": 1, "n_text_layers": 1}},
        "2 CAFT": {"model": {"n_caft_layers": 2, "n_facial_layers": 1, "n_text_layers": 1}},
    },
    "layers": {
        "A (N=1, M=1)": {"model": {"n_facial_layers": 1, "n_text_layers": 1}},
        "B (N=2, M=1)": {"model": {"n_facial_layers": 2, "n_text_layers": 1}},
        "C (N=1, M=2)": {"model": {"n_facial_layers": 1, "n_text_layers": 2}},
        "D (N=2, M=2)": {"model": {"n_facial_layers": 2, "n_text_layers": 2}},
    },
}


def run_ablation(grid: str, base: dict | None = None, seeds=(0, 1, 2), progress=None) -> dict:
    """Train every variant of ``grid`` for each seed; report per-seed and median metrics.

    The dataset and its embeddings are shared across variants and seeds; only
    the model initialisation / shuffling seed changes.
    """
    if grid not in ABLATION_GRIDS:
        raise KeyError(f"unknown ablation grid {grid!r}; choose from {sorted(ABLATION_GRIDS)}")
    base = merge(default_run_config(), base)
    manifest = build_dataset(base)
    embeddings = embed_manifest(manifest, make_provider(base["embedding"]))
    table = {}
    for name, override in ABLATION_GRIDS[grid].items():
        runs = []
        for seed in seeds:
            cfg = merge(merge(base, override), {"train": {"seed": int(seed)}})
            res = run_benchmark(cfg, manifest=manifest, embeddings=embeddings)
            runs.append(res["metrics"])
            if progress:
                progress(name, seed, res["metrics"])
        table[name] = {
            "runs": runs,
            "median": {k: float(np.median([r[k] for r in runs])) for k in ("acc1", "acc2", "gmean")},
        }
    return {"grid": grid, "seeds": list(map(int, seeds)), "base": base, "results": table}
