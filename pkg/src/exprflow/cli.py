"""Command-line entry point: ``exprflow <subcommand> ...`` (or ``python -m exprflow``).

Every subcommand resolves its settings from defaults, an optional ``--config``
JSON file and explicit flags (in that order of precedence), and writes the
result as ``resolved_config.json`` next to its outputs. Passing that file back
with ``--config`` repeats the run.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .dataset import DatasetManifest, load_params_dataset, synth_neutral_set
from .errors import ExprFlowError, NotFoundError
from .eval_harness import ClassifierConfig, NearestCenterOracle, evaluate_repeated, train_classifier
from .head_model import FaceParams, HeadModel, synth_model
from .i2fet import I2FETModel, TrainConfig, build_model, embed_manifest, export_latents, generate, train
from .ned import NEDConfig, NEDModel, train_ned
from .text_embed import ExpressionVocabulary, make_provider, render_instruction, save_embeddings
from .trajectory import build_trajectory, export_obj_sequence, insert_neutral

log = logging.getLogger("exprflow")
DATA_ROOT_ENV = "EXPRFLOW_DATA"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def _resolve_path(p) -> Path:
    p = Path(p)
    return p if p.is_absolute() or p.exists() else _data_root() / p


def _load_config(args) -> dict:
    if getattr(args, "config", None):
        return json.loads(Path(args.config).read_text())
    return {}


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _overrides(pairs) -> dict:
    """Turn ``[(section, key, value-or-None), ...]`` into a nested override dict."""
    out: dict = {}
    for section, key, value in pairs:
        if value is not None:
            out.setdefault(section, {})[key] = value
    return out


# -- subcommands --------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    file_cfg = _load_config(args)
    cfg = experiments.merge(experiments.default_run_config(), file_cfg.get("run", file_cfg))
    multipliers = None
    if args.multiplier:
        multipliers = {}
        for item in args.multiplier:
            label, _, value = item.partition("=")
            multipliers[label] = float(value)
    cfg = experiments.merge(cfg, _overrides([
        ("data", "vocab", args.vocab), ("data", "samples_per_pair", args.pairs), ("data", "seed", args.seed),
        ("data", "noise_std", args.noise_std), ("data", "n_shape", args.n_shape),
        ("data", "class_multipliers", multipliers),
        ("embedding", "n_rows", args.embed_rows), ("embedding", "dim", args.embed_dim),
    ]))
    out = Path(args.out or file_cfg.get("out") or _data_root() / "data")
    manifest = experiments.build_dataset(cfg)
    manifest.save(out)
    provider = make_provider(cfg["embedding"])
    save_embeddings(out / "embeddings", {k: provider.embed(k) for k in {s.embedding_key for s in manifest.samples}})
    _write_json(out / "resolved_config.json", {"command": "synth-data", "out": str(out), "run": cfg})
    print(json.dumps({"samples": len(manifest), "histogram": manifest.histogram, "out": str(out)}))
    return 0


def _load_data(path) -> tuple[DatasetManifest, dict]:
    path = _resolve_path(path)
    manifest = load_params_dataset(path)
    cfg_path = path / "resolved_config.json"
    run = json.loads(cfg_path.read_text())["run"] if cfg_path.exists() else experiments.default_run_config()
    return manifest, run


def _embeddings_for(manifest, data_dir, run):
    emb_dir = Path(data_dir) / "embeddings"
    if emb_dir.exists():
        from .text_embed import LookupEmbedder
        return embed_manifest(manifest, LookupEmbedder.load(emb_dir))
    return embed_manifest(manifest, make_provider(run["embedding"]))


def cmd_train(args) -> int:
    file_cfg = _load_config(args)
    data_dir = _resolve_path(args.data or file_cfg.get("data_dir"))
    manifest, run = _load_data(data_dir)
    run = experiments.merge(run, file_cfg.get("run"))
    run = experiments.merge(run, _overrides([
        ("train", "epochs", args.epochs), ("train", "batch_size", args.batch_size),
        ("train", "learning_rate", args.lr), ("train", "seed", args.seed),
        ("train", "use_pose_loss", False if args.no_pose_loss else None),
        ("train", "use_vertex_loss", False if args.no_vertex_loss else None),
        ("train", "ifed_enabled", False if args.no_ifed else None),
        ("model", "n_facial_layers", args.facial_layers), ("model", "n_text_layers", args.text_layers),
        ("model", "n_caft_layers", args.caft_layers), ("model", "model_dim", args.model_dim),
    ]))
    out = Path(args.out or file_cfg.get("out") or _data_root() / "model")
    out.mkdir(parents=True, exist_ok=True)
    embeddings = _embeddings_for(manifest, data_dir, run)
    h = run["head"]
    head = synth_model(h["n_vertices"], manifest.samples[0].shape.shape[0], 50, h["n_joints"], h["seed"])
    tcfg = TrainConfig.from_dict(run["train"])
    model = build_model(experiments.model_config(run), tcfg.seed)
    model, tlog = train(model, manifest, head, tcfg, embeddings=embeddings,
                        progress=lambda r: log.info("epoch %d train %.5f val %.5f", r["epoch"],
                                                    r["train_total"], r["val_total"]))
    model.save(out / "checkpoint", {"embedding": run["embedding"], "best_epoch": tlog.best_epoch})
    head.save(out / "head_model")
    tlog.to_csv(out / "training_log.csv")
    _write_json(out / "resolved_config.json",
                {"command": "train", "data_dir": str(data_dir), "out": str(out), "run": run})
    print(json.dumps({"best_epoch": tlog.best_epoch, "final_val_total": tlog.rows[-1]["val_total"],
                      "out": str(out)}))
    return 0


def cmd_train_ned(args) -> int:
    file_cfg = _load_config(args)
    ned_cfg = NEDConfig.from_dict(file_cfg.get("ned", {}))
    for key, value in (("epochs", args.epochs), ("seed", args.seed)):
        if value is not None:
            setattr(ned_cfg, key, value)
    neutral = dict({"n": 500, "seed": 0}, **file_cfg.get("neutral", {}))
    if args.n is not None:
        neutral["n"] = args.n
    if args.data_seed is not None:
        neutral["seed"] = args.data_seed
    source = args.neutral or file_cfg.get("neutral_file")
    if source:
        doc = json.loads(Path(source).read_text())
        data = [(s["expression"], s["pose"]) for s in doc]
    else:
        expr, pose, _, _ = synth_neutral_set(neutral["n"], neutral["seed"])
        data = np.concatenate([expr, pose], axis=1)
    out = Path(args.out or file_cfg.get("out") or _data_root() / "ned")
    model = train_ned(data, ned_cfg)
    model.save(out)
    _write_json(out / "resolved_config.json", {"command": "train-ned", "out": str(out), "ned": ned_cfg.to_dict(),
                                               "neutral": neutral, "neutral_file": source})
    print(json.dumps({"first_mse": model.history[0], "final_mse": model.history[-1], "out": str(out)}))
    return 0


def cmd_gen(args) -> int:
    file_cfg = _load_config(args)
    g = {"model": args.model, "text": args.text, "from": getattr(args, "from"), "to": args.to,
         "template": args.template, "source": args.source, "frames": args.frames, "seed": args.seed,
         "obj": args.obj, "ned": args.ned, "neutral": args.neutral, "out": args.out}
    g = {k: v for k, v in g.items() if v is not None}
    g = dict({"template": 1, "frames": 10, "seed": 0, "neutral": False}, **file_cfg.get("gen", {}), **g)
    if "model" not in g:
        raise UsageError("--model is required")
    model_dir = _resolve_path(g["model"])
    model = I2FETModel.load(model_dir / "checkpoint")
    head = HeadModel.load(model_dir / "head_model")
    from .archive import read_manifest
    emb_cfg = read_manifest(model_dir / "checkpoint")["meta"].get("embedding", {"kind": "hashing"})
    provider = make_provider(emb_cfg)
    if "text" in g:
        text = g["text"]
    elif "from" in g and "to" in g:
        vocab_labels = None
        cfg_path = model_dir / "resolved_config.json"
        if cfg_path.exists():
            vocab_labels = json.loads(cfg_path.read_text())["run"]["data"]["vocab"]
        vocab = (ExpressionVocabulary.named(vocab_labels) if isinstance(vocab_labels, str)
                 else ExpressionVocabulary(vocab_labels) if vocab_labels else ExpressionVocabulary.celebv())
        text = render_instruction(int(g["template"]), g["from"], g["to"], vocab).text
    else:
        raise UsageError("give --text or both --from and --to")
    if "source" in g:
        source = FaceParams.from_dict(json.loads(Path(g["source"]).read_text()))
    else:
        source = FaceParams.zeros(head)
    anchors = generate(model, provider.embed(text), int(g["seed"]))
    pairs = [(anchors.e0, anchors.theta0), (anchors.e1, anchors.theta1)]
    if g.get("neutral") or "ned" in g:
        ned = NEDModel.load(_resolve_path(g["ned"])) if "ned" in g else None
        traj = insert_neutral(source, pairs, int(g["frames"]), ned, int(g["seed"]))
    else:
        traj = build_trajectory(source, pairs, int(g["frames"]))
    out = Path(g.get("out") or g.get("obj") or ".")
    out.mkdir(parents=True, exist_ok=True)
    traj.save_json(out / "trajectory.json")
    if "obj" in g:
        export_obj_sequence(traj, head, g["obj"])
    _write_json(out / "resolved_config.json", {"command": "gen", "gen": g})
    print(json.dumps({"instruction": text, "frames": len(traj), "anchor_indices": traj.anchor_indices}))
    return 0


def cmd_eval(args) -> int:
    file_cfg = _load_config(args)
    e = {"model": args.model, "data": args.data, "repeats": args.repeats, "seed": args.seed,
         "classifier": args.classifier, "out": args.out}
    e = dict({"repeats": 10, "seed": 0, "classifier": "oracle"}, **file_cfg.get("eval", {}),
             **{k: v for k, v in e.items() if v is not None})
    if "model" not in e or "data" not in e:
        raise UsageError("--model and --data are required")
    model_dir, data_dir = _resolve_path(e["model"]), _resolve_path(e["data"])
    model = I2FETModel.load(model_dir / "checkpoint")
    manifest, run = _load_data(data_dir)
    embeddings = _embeddings_for(manifest, data_dir, run)
    test_idx = manifest.indices("test") if manifest.splits else np.arange(len(manifest))
    test = manifest.subset("test") if manifest.splits else manifest
    if e["classifier"] == "oracle":
        classifier = NearestCenterOracle.from_manifest(manifest)
    elif e["classifier"] == "mlp":
        classifier = train_classifier(manifest.subset("train"), cfg=ClassifierConfig(seed=int(e["seed"])))
    else:
        raise UsageError(f"unknown classifier {e['classifier']!r}")
    result = evaluate_repeated(model, test, classifier, embeddings=embeddings[test_idx],
                               repeats=int(e["repeats"]), seed=int(e["seed"]))
    out = Path(e.get("out") or model_dir / "eval")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", result)
    with open(out / "confusion.csv", "w") as fh:
        labels = result["last"]["labels"]
        fh.write("true\\pred," + ",".join(labels) + "\n")
        for label, row in zip(labels, result["last"]["confusion"]):
            fh.write(label + "," + ",".join(map(str, row)) + "\n")
    _write_json(out / "resolved_config.json", {"command": "eval", "eval": e})
    print(json.dumps({k: result[k] for k in ("acc1", "acc2", "gmean")}))
    return 0


def cmd_ablate(args) -> int:
    file_cfg = _load_config(args)
    a = dict({"grid": "ifed", "seeds": [0, 1, 2]}, **file_cfg.get("ablate", {}))
    if args.grid:
        a["grid"] = args.grid
    if args.seeds:
        a["seeds"] = [int(s) for s in args.seeds.split(",")]
    run = experiments.merge(experiments.default_run_config(), file_cfg.get("run"))
    run = experiments.merge(run, _overrides([("train", "epochs", args.epochs),
                                             ("data", "samples_per_pair", args.pairs)]))
    out = Path(args.out or file_cfg.get("out") or _data_root() / "ablation")
    grids = sorted(experiments.ABLATION_GRIDS) if a["grid"] == "all" else [a["grid"]]
    summary = {}
    for grid in grids:
        res = experiments.run_ablation(grid, run, a["seeds"], progress=lambda n, s, m: log.info(
            "%s seed %d acc1 %.4f acc2 %.4f gmean %.4f", n, s, m["acc1"], m["acc2"], m["gmean"]))
        _write_json(out / f"ablation_{grid}.json", res)
        summary[grid] = {name: r["median"] for name, r in res["results"].items()}
    _write_json(out / "resolved_config.json", {"command": "ablate", "ablate": a, "run": run, "out": str(out)})
    print(json.dumps(summary))
    return 0


def cmd_export_latents(args) -> int:
    model_dir, data_dir = _resolve_path(args.model), _resolve_path(args.data)
    model = I2FETModel.load(model_dir / "checkpoint")
    manifest, run = _load_data(data_dir)
    embeddings = _embeddings_for(manifest, data_dir, run)
    split_name = args.split if manifest.splits else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if split_name:
        export_latents(model, manifest, embeddings[manifest.indices(split_name)], out, split_name)
    else:
        export_latents(model, manifest, embeddings, out)
    print(json.dumps({"out": str(out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="exprflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic instruction dataset")
    p.add_argument("--config")
    p.add_argument("--vocab", choices=["ck", "celebv"])
    p.add_argument("--pairs", type=int, help="samples per ordered label pair")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--n-shape", type=int)
    p.add_argument("--multiplier", action="append", help="label=factor class-frequency skew")
    p.add_argument("--embed-rows", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the instruction-conditioned CVAE")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-pose-loss", action="store_true")
    p.add_argument("--no-vertex-loss", action="store_true")
    p.add_argument("--no-ifed", action="store_true")
    p.add_argument("--facial-layers", type=int)
    p.add_argument("--text-layers", type=int)
    p.add_argument("--caft-layers", type=int)
    p.add_argument("--model-dim", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-ned", help="train the neutral encoder-decoder")
    p.add_argument("--config")
    p.add_argument("--neutral", help="JSON list of {expression, pose} records; synthetic if omitted")
    p.add_argument("--n", type=int, help="number of synthetic neutral samples")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_ned)

    p = sub.add_parser("gen", help="generate a trajectory (and OBJ meshes) for one instruction")
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--text")
    p.add_argument("--from", dest="from")
    p.add_argument("--to")
    p.add_argument("--template", type=int)
    p.add_argument("--source")
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--obj")
    p.add_argument("--ned")
    p.add_argument("--neutral", action="store_true", default=None,
                   help="insert a neutral keyframe (zero expression unless --ned is given)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("eval", help="score generated anchors on the test split")
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--classifier", choices=["oracle", "mlp"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid over several seeds")
    p.add_argument("--config")
    p.add_argument("--grid", choices=sorted(experiments.ABLATION_GRIDS) + ["all"])
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-latents", help="write posterior means with labels to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_latents)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            raise UsageError("missing subcommand")
        return args.func(args)
    except UsageError as exc:
        print(f"exprflow: error: {exc}", file=sys.stderr)
        return 1
    except NotFoundError as exc:
        print(f"exprflow: not found: {exc}", file=sys.stderr)
        return 1
    except (ExprFlowError, json.JSONDecodeError) as exc:
        print(f"exprflow: invalid input: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"exprflow: I/O error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())
