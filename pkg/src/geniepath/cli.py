"""Command-line entry point: ``geniepath {train,eval,gradcheck,synth,paths}``.

Exit codes: 0 success, 1 failed check, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (SPLITS, DataFormatError, InfeasibleSpec, SynthSpec, gen_planted_path,
                   load_dataset, save_dataset)
from .graph import GraphError, build_graph
from .model import (CheckpointError, Model, ModelConfig, TrainingDiverged, evaluate,
                    load_checkpoint, model_grad_check, save_checkpoint, train)
from .paths import UnsupportedVariant, export_dot, extract_importance, receptive_subgraph

log = logging.getLogger("geniepath")

DATA_KEYS = {"edges", "features", "labels", "splits"}
RUN_KEYS = DATA_KEYS | {"num_classes", "inductive", "undirected", "output_dir"}
GRADCHECK_TOLERANCE = 1e-4


class InputError(Exception):
    pass


# ---------------------------------------------------------------- config

def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_run_config(path, overrides=(), seed=None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a JSON object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        cfg[key] = _parse_value(raw)
    if seed is not None:
        cfg["seed"] = seed
    unknown = set(cfg) - RUN_KEYS - ModelConfig.field_names()
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
    base = path.parent
    for key in DATA_KEYS:
        if key not in cfg:
            raise InputError(f"config is missing {key!r}")
        p = Path(cfg[key])
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise InputError(f"{key} file not found: {p}")
        cfg[key] = p
    out = Path(cfg.get("output_dir", "."))
    cfg["output_dir"] = out if out.is_absolute() else base / out
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**{k: v for k, v in cfg.items() if k in ModelConfig.field_names()})
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid model config: {exc}") from None


def dataset_from(cfg: dict, task: str):
    try:
        return load_dataset(cfg["edges"], cfg["features"], cfg["labels"], cfg["splits"], task,
                            num_classes=cfg.get("num_classes"),
                            undirected=cfg.get("undirected", True),
                            inductive=cfg.get("inductive", False))
    except (DataFormatError, GraphError, ValueError) as exc:
        raise InputError(str(exc)) from None


def _model_for(cfg, mc: ModelConfig, ds, checkpoint=None) -> Model:
    if checkpoint is None:
        return Model(mc, ds.num_features, ds.num_classes)
    ck = Path(checkpoint)
    if not ck.is_file():
        raise InputError(f"checkpoint not found: {ck}")
    try:
        return Model(mc, ds.num_features, ds.num_classes, load_checkpoint(ck))
    except (CheckpointError, ValueError) as exc:
        raise InputError(f"checkpoint {ck} does not fit this model/dataset: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    mc = model_config(cfg)
    ds = dataset_from(cfg, mc.task)
    model = _model_for(cfg, mc, ds)
    out = cfg["output_dir"]
    out.mkdir(parents=True, exist_ok=True)
    try:
        _, history = train(model, ds, mc)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if ds.test_mask.any():
            for metric, value in evaluate(model, ds, "test").as_dict().items():
                fh.write(json.dumps({"epoch": "final", "metric": metric, "split": "test",
                                     "value": value}, sort_keys=True) + "\n")
    save_checkpoint(out / "model.gnpk", model.params)
    print(f"wrote {out / 'model.gnpk'} and {out / 'metrics.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    mc = model_config(cfg)
    ds = dataset_from(cfg, mc.task)
    model = _model_for(cfg, mc, ds, args.checkpoint)
    if not ds.mask(args.split).any():
        raise InputError(f"split {args.split!r} has no nodes")
    m = evaluate(model, ds, args.split)
    print(json.dumps({"split": args.split, **m.as_dict()}, sort_keys=True))
    return 0


def tiny_instance(seed: int = 0, num_nodes: int = 6, num_features: int = 4, num_classes: int = 3):
    """Small random graph, features and labels for gradient checks."""
    rng = np.random.default_rng(seed)
    pairs = {(int(a), int(b)) for a, b in rng.integers(0, num_nodes, size=(2 * num_nodes, 2)) if a < b}
    pairs |= {(i, i + 1) for i in range(num_nodes - 1)}
    g = build_graph(sorted(pairs), num_nodes)
    X = rng.normal(size=(num_nodes, num_features))
    y_class = rng.integers(0, num_classes, size=num_nodes)
    y_bits = rng.integers(0, 2, size=(num_nodes, num_classes))
    mask = np.ones(num_nodes, dtype=bool)
    mask[0] = False
    return g, X, y_class, y_bits, mask


def cmd_gradcheck(args) -> int:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        combos = [model_config({k: v for k, v in raw.items() if k in ModelConfig.field_names()})]
    else:
        combos = [ModelConfig(variant=v, depth=2, hidden=3, task=t, seed=args.seed or 0,
                              l2_penalty=1e-3)
                  for v in args.variants for t in ("multi-class", "multi-label")]
    g, X, y_class, y_bits, mask = tiny_instance(args.seed or 0)
    worst_overall = 0.0
    for mc in combos:
        labels = y_class if mc.task == "multi-class" else y_bits
        model = Model(mc, X.shape[1], 3)
        # random values everywhere, so zero-initialised attention vectors are exercised too
        rng = np.random.default_rng(args.seed or 0)
        model.load_params({k: rng.normal(0.0, 0.7, v.shape) for k, v in model.params.items()})
        if args.corrupt_backward:
            with ad.corrupt_backward(args.corrupt_backward):
                res = model_grad_check(model, g, X, labels, mask, args.eps)
        else:
            res = model_grad_check(model, g, X, labels, mask, args.eps)
        worst_overall = max(worst_overall, res.max_rel_error)
        status = "ok" if res.max_rel_error <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{mc.variant:15s} {mc.task:12s} max_rel_error={res.max_rel_error:.3e} "
              f"worst={res.worst_param}{list(res.worst_index or ())} {status}")
    print(f"overall max_rel_error={worst_overall:.3e} tolerance={GRADCHECK_TOLERANCE:g}")
    return 0 if worst_overall <= GRADCHECK_TOLERANCE else 1


def cmd_synth(args) -> int:
    spec = SynthSpec(num_graphs=args.num_graphs, nodes_per_graph=args.nodes_per_graph,
                     signal_hops=args.hops, hub_degree=args.hub_degree, noise_std=args.noise_std,
                     seed=args.seed or 0, num_features=args.num_features,
                     num_val_graphs=args.num_val_graphs, num_test_graphs=args.num_test_graphs,
                     hub_decoy_scale=args.decoy_scale)
    try:
        ds = gen_planted_path(spec)
    except InfeasibleSpec as exc:
        raise InputError(f"infeasible spec: {exc}") from None
    out = Path(args.out)
    paths = save_dataset(ds, out)
    run = {"edges": paths["edges"].name, "features": paths["features"].name,
           "labels": paths["labels"].name, "splits": paths["splits"].name,
           "num_classes": 2, "inductive": True, "output_dir": "run",
           **asdict(ModelConfig(variant="geniepath", depth=spec.signal_hops, hidden=16,
                                epochs=300, seed=spec.seed))}
    (out / "config.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    print(f"wrote {ds.num_nodes} nodes in {spec.num_graphs + spec.num_val_graphs + spec.num_test_graphs} "
          f"graphs to {out}")
    return 0


def cmd_paths(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    mc = model_config(cfg)
    ds = dataset_from(cfg, mc.task)
    model = _model_for(cfg, mc, ds, args.checkpoint)
    if not 0 <= args.target < ds.num_nodes:
        raise InputError(f"target {args.target} out of range [0, {ds.num_nodes})")
    g = model.prepare_graph(ds.graph)
    try:
        imps = extract_importance(model, g, ds.features, args.layer)
    except (UnsupportedVariant, IndexError) as exc:
        raise InputError(str(exc)) from None
    text = export_dot(receptive_subgraph(g, args.target, args.hops), g, imps)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geniepath", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run config JSON")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (value parsed as JSON when possible)")

    sp = sub.add_parser("train", help="train a model and write metrics + checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    common(sp, config_required=False)
    sp.add_argument("--variants", nargs="+", default=["geniepath", "geniepath-lazy"])
    sp.add_argument("--eps", type=float, default=1e-6)
    sp.add_argument("--corrupt-backward", metavar="OP", default=None, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="write a planted-path benchmark dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    d = SynthSpec()
    sp.add_argument("--num-graphs", type=int, default=d.num_graphs)
    sp.add_argument("--num-val-graphs", type=int, default=d.num_val_graphs)
    sp.add_argument("--num-test-graphs", type=int, default=d.num_test_graphs)
    sp.add_argument("--nodes-per-graph", type=int, default=d.nodes_per_graph)
    sp.add_argument("--hops", type=int, default=d.signal_hops)
    sp.add_argument("--hub-degree", type=int, default=d.hub_degree)
    sp.add_argument("--noise-std", type=float, default=d.noise_std)
    sp.add_argument("--decoy-scale", type=float, default=d.hub_decoy_scale)
    sp.add_argument("--num-features", type=int, default=d.num_features)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("paths", help="export learned receptive paths as DOT")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--target", type=int, required=True)
    sp.add_argument("--hops", type=int, default=2)
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_paths)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
