"""``gsn`` command line: gen, train, eval, gradcheck, dump-attn.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__, kernels
from .coattention import coattn_forward, export_heatmap
from .graph import GraphParseError, GraphValidationError, parse_graphs
from .gradsuite import run_suite
from .heads import format_report, report_json
from .layers import ConfigError, gsn_layer_forward
from .synth import SpecError, TaskSpec, write_dataset
from .training import (CheckpointError, TrainConfig, TrainingError, check_labels, evaluate,
                       load_checkpoint, parse_kv, save_checkpoint, train)

CHECKPOINT = "checkpoint.gsnckpt"


class UsageError(Exception):
    pass


def _read_text(path, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror or exc}") from None


def _atomic_write(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data, encoding="utf-8")
    tmp.replace(path)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    return out


def write_manifest(out: Path, command: str, config_text: str, inputs: dict, outputs: dict,
                   started: float, metrics: dict | None = None, argv=None) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "argv": list(argv or []),
        "config": parse_kv(config_text) if config_text else {},
        "inputs": inputs,
        "outputs": outputs,
        "wall_clock_seconds": round(time.time() - started, 3),
        "metrics": metrics or {},
    }
    _atomic_write(out / "run_manifest.json", json.dumps(manifest, indent=2) + "\n")


def _load_config(args) -> TrainConfig:
    text = _read_text(args.config, "config") if args.config else ""
    values = parse_kv(text)
    for key in ("seed", "baseline", "layers", "combiner", "epochs"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    return TrainConfig.from_mapping(values)


def _load_split(data_dir, split: str):
    path = Path(data_dir) / f"{split}.gsn"
    text = _read_text(path, "dataset")
    try:
        return parse_graphs(text)
    except (GraphParseError, GraphValidationError) as exc:
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    started = time.time()
    if not args.config:
        raise UsageError("gen needs --config SPEC_FILE")
    values = parse_kv(_read_text(args.config, "spec"))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    spec = TaskSpec.from_mapping(values)
    out = _out_dir(args.out)
    manifest = write_dataset(spec, out)
    write_manifest(out, "gen", spec.to_text(), {"spec": str(args.config)},
                   {k: str(out / v) for k, v in manifest["files"].items()}, started,
                   argv=args.argv)
    print(f"wrote {manifest['counts']} {spec.kind} graphs to {out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    if not args.data:
        raise UsageError("train needs --data DIR")
    train_set = _load_split(args.data, "train")
    dev_path = Path(args.data) / "dev.gsn"
    dev_set = _load_split(args.data, "dev") if dev_path.exists() else []
    check_labels(cfg, train_set, "train")
    check_labels(cfg, dev_set, "dev")
    out = _out_dir(args.out)
    history_path = out / "history.jsonl"
    lines = []

    def log(record):
        lines.append(json.dumps(record, sort_keys=True))
        if not args.quiet:
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in record.items()), flush=True)

    ckpt = train(cfg, train_set, dev_set, log)
    save_checkpoint(ckpt, out / CHECKPOINT)
    _atomic_write(history_path, "\n".join(lines) + "\n")
    final = {k[4:]: v for k, v in ckpt.history[-1].items() if k.startswith("dev_")}
    if final:
        _atomic_write(out / "metrics.txt", format_report(final))
        _atomic_write(out / "metrics.json", report_json(final))
    write_manifest(out, "train", cfg.to_text(),
                   {"config": str(args.config) if args.config else None, "data": str(args.data)},
                   {"checkpoint": str(out / CHECKPOINT), "history": str(history_path)},
                   started, final, args.argv)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    if not args.checkpoint or not args.data:
        raise UsageError("eval needs --checkpoint PATH and --data DIR")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    expect = _load_config(args) if args.config else None
    ckpt = load_checkpoint(args.checkpoint, expect)
    graphs = _load_split(args.data, args.split)
    check_labels(ckpt.config, graphs, args.split)
    m = evaluate(ckpt.model(), graphs)
    report = format_report(m)
    sys.stdout.write(report)
    out = _out_dir(args.out) if args.out else Path(args.checkpoint).parent
    stem = f"eval_{args.split}"
    _atomic_write(out / f"{stem}.txt", report)
    _atomic_write(out / f"{stem}.json", report_json(m))
    write_manifest(out, "eval", ckpt.config.to_text(),
                   {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split},
                   {"report": str(out / f"{stem}.txt")}, started, m, args.argv)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    results = run_suite(seed=cfg.seed)
    failed = 0
    for name, rep in results:
        status = "ok" if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{name:26s} max_rel_err={rep.max_rel_err:.3e} {status}")
    print(f"{len(results) - failed}/{len(results)} checks passed (tol {results[0][1].tol:g})")
    return 1 if failed else 0


def cmd_dump_attn(args) -> int:
    started = time.time()
    if not args.checkpoint or not args.graph or not args.out:
        raise UsageError("dump-attn needs --checkpoint, --graph and --out")
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if cfg.baseline != "none":
        raise UsageError("dump-attn needs a GSN checkpoint; GCN nodes are vectors")
    graphs = parse_graphs(_read_text(args.graph, "graph file"))
    if not 0 <= args.index < len(graphs):
        raise UsageError(f"graph index {args.index} out of range (file has {len(graphs)})")
    g = graphs[args.index]
    i, j = args.node, args.neighbor
    if not (0 <= i < g.num_nodes and 0 <= j < g.num_nodes):
        raise UsageError(f"nodes must lie in [0, {g.num_nodes})")
    if not 0 <= args.layer < cfg.layers:
        raise UsageError(f"layer must lie in [0, {cfg.layers})")
    if g.num_relations != cfg.relations:
        raise UsageError(f"graph has {g.num_relations} relations, checkpoint {cfg.relations}")
    if args.relation is None:
        rels = [r for r in range(g.num_relations) if i == j or j in g.neighbors(r)[i]]
        if not rels:
            raise UsageError(f"nodes {i} and {j} are not adjacent under any relation")
        r = rels[0]
    else:
        r = args.relation
        if not 0 <= r < g.num_relations:
            raise UsageError(f"relation must lie in [0, {g.num_relations})")
        if i != j and j not in g.neighbors(r)[i]:
            raise UsageError(f"nodes {i} and {j} are not adjacent under relation {r}")
    model = ckpt.model()
    states = model.encode(g)
    for k in range(args.layer):
        states = gsn_layer_forward(g, states, model.gsn_layers[k])
    _, trace = coattn_forward(states[i], states[j], model.gsn_layers[args.layer].coattn[r])
    tok = (lambda n: n.tokens) if g.nodes[i].tokens is not None else (lambda n: None)
    csv, pgm = export_heatmap(trace, args.normalize, tok(g.nodes[i]), tok(g.nodes[j]))
    out = _out_dir(args.out)
    stem = f"attn_g{args.index}_l{args.layer}_r{r}_{i}_{j}"
    _atomic_write(out / f"{stem}.csv", csv)
    _atomic_write(out / f"{stem}.pgm", pgm)
    write_manifest(out, "dump-attn", cfg.to_text(),
                   {"checkpoint": str(args.checkpoint), "graph": str(args.graph)},
                   {"csv": str(out / f"{stem}.csv"), "pgm": str(out / f"{stem}.pgm")},
                   started, argv=args.argv)
    print(f"wrote {out / stem}.csv and .pgm (relation {r}, layer {args.layer})")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config (spec file for gen)")
    common.add_argument("--data", help="dataset directory with train.gsn / dev.gsn")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--baseline", choices=("gcn", "none"))
    common.add_argument("--layers", type=int)
    common.add_argument("--combiner", choices=("max", "mean"))
    common.add_argument("--epochs", type=int)

    p = argparse.ArgumentParser(prog="gsn", description="Graph sequential networks on toy multi-hop tasks")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset").set_defaults(fn=cmd_gen)
    t = sub.add_parser("train", parents=[common], help="train and checkpoint a model")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)
    e = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="dev", choices=("train", "dev"))
    e.set_defaults(fn=cmd_eval)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite") \
        .set_defaults(fn=cmd_gradcheck)
    d = sub.add_parser("dump-attn", parents=[common], help="export an attention heatmap")
    d.add_argument("--checkpoint")
    d.add_argument("--graph", help="graph file")
    d.add_argument("--index", type=int, default=0, help="graph index within the file")
    d.add_argument("--node", type=int, required=True)
    d.add_argument("--neighbor", type=int, required=True)
    d.add_argument("--relation", type=int)
    d.add_argument("--layer", type=int, default=0)
    d.add_argument("--normalize", choices=("neighbor-axis", "none"), default="neighbor-axis")
    d.set_defaults(fn=cmd_dump_attn)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        return args.fn(args)
    except (UsageError, ConfigError, SpecError, CheckpointError) as exc:
        print(f"gsn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, GraphParseError, GraphValidationError, OSError, ArithmeticError) as exc:
        print(f"gsn {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
