"""Command-line entry point: ``segrec <command> [flags]``.

Data goes to stdout or to the files named by flags. Diagnostics go to
stderr. Every command that writes files also writes ``manifest.json``
next to them.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from importlib import metadata
from pathlib import Path

import numpy as np

from . import costmodel, datakit, evalkit, expertlens, inference, maskgen, plotting
from .errors import PlanMismatch, SegrecError
from .seqcore import build_plan, parse_plan
from .tinyformer import ModelConfig, checkpoint_crc, init_model, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train


def _ints(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _plan(args):
    if getattr(args, "plan_file", None):
        return parse_plan(Path(args.plan_file).read_text())
    return build_plan(_ints(args.segments), _ints(args.experts))


def _write_manifest(args, out_dir: Path, outputs, crcs=None) -> Path:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "config": config,
        "seeds": {"seed": args.seed},
        "inputs": [str(v) for k, v in config.items() if k in ("data", "checkpoint", "cache", "settings") and v],
        "outputs": [str(p) for p in outputs],
        "checkpoint_crcs": crcs or {},
        "version": _version(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _items(args):
    """Dataset and its (users, events) item matrix, cut to the shortest user."""
    ds = datakit.ingest_tsv(args.data, min_events=2)
    return ds, ds.item_matrix(0, min(len(u) for u in ds.users))


def _model_config(args, plan, vocab: int) -> ModelConfig:
    return ModelConfig(
        num_layers=args.layers, model_dim=args.dim, num_heads=args.heads, ffn_dim=args.ffn or 2 * args.dim,
        vocab_size=vocab, max_positions=plan.n_flat, num_expert_slots=max(plan.total_experts, 1), seed=args.seed,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                       epochs=args.epochs, grad_clip=args.grad_clip, seed=args.seed)


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    names = {f.name for f in fields(datakit.SyntheticConfig)}
    cfg = datakit.SyntheticConfig(**{k: v for k, v in vars(args).items() if k in names})
    ds = datakit.generate_synthetic(cfg)
    out = _out_dir(args.out)
    datakit.write_tsv(ds, out / "events.tsv")
    datakit.write_item_map(ds, out / "item_map.tsv")
    with open(out / "user_clusters.tsv", "w") as fh:
        fh.write("user_id\tcluster\n")
        for u, c in enumerate(ds.labels["user_cluster"]):
            fh.write(f"{u}\t{c}\n")
    _write_manifest(args, out, [out / "events.tsv", out / "item_map.tsv", out / "user_clusters.tsv"])
    print(out / "events.tsv")
    return 0


def cmd_train(args) -> int:
    plan = _plan(args)
    ds, items = _items(args)
    window = items[:, args.start:args.start + plan.total_items]
    model = init_model(_model_config(args, plan, ds.vocab_size), dtype=np.float32)
    model, stats = train(model, window, plan, _train_config(args), causal=args.baseline,
                         on_epoch=lambda e, s: print(f"epoch {e + 1} loss {s.losses[-1]:.4f}", file=sys.stderr))
    out = _out_dir(args.out)
    crc = save_checkpoint(model, out / "model.ckpt")
    (out / "train_stats.csv").write_text(stats.csv())
    plotting.plot_losses(stats, out / "train_loss.png")
    _write_manifest(args, out, [out / "model.ckpt", out / "train_stats.csv", out / "train_loss.png"],
                    {"model.ckpt": crc})
    print(out / "model.ckpt")
    return 0


def cmd_eval(args) -> int:
    plan = _plan(args)
    model = load_checkpoint(args.checkpoint)
    _, items = _items(args)
    metrics = evalkit.evaluate(model, items, plan, _ints(args.ks), start=args.start)
    pre = plan.total_items - plan.segment_lengths[-1]
    text = evalkit.metrics_csv([(args.method, pre, plan.segment_lengths[-1], metrics)])
    out = _out_dir(args.out)
    (out / "metrics.csv").write_text(text)
    _write_manifest(args, out, [out / "metrics.csv"], {"model.ckpt": checkpoint_crc(model)})
    sys.stdout.write(text)
    return 0


def cmd_infer(args) -> int:
    plan = _plan(args)
    model = load_checkpoint(args.checkpoint)
    if args.cache:
        cache = inference.load_cache(args.cache, plan)
    else:
        cache = inference.compress_segments(model, _ints(args.history), plan)
        if args.save_cache:
            inference.save_cache(cache, args.save_cache)
    rec = inference.recommend(model, cache, _ints(args.recent), args.K)
    print("rank\titem_id\tscore")
    for r, (item, score) in enumerate(zip(rec.items, rec.scores), start=1):
        print(f"{r}\t{item}\t{score!r}")
    return 0


def cmd_mask(args) -> int:
    plan = _plan(args)
    text = maskgen.segmented_mask(plan).dump()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_cost(args) -> int:
    p = costmodel.CostParams(L=args.L, n=args.n, d=args.d, k=args.k, m=args.m)
    rep = costmodel.report(p)
    sys.stdout.write(rep.text())
    if args.out:
        out = _out_dir(args.out)
        (out / "cost.csv").write_text(rep.csv())
        ns = np.unique(np.linspace(max(args.m, 64), max(4 * args.n, 256), 40).astype(int))
        ratios = {
            "inference S": [costmodel.inference_ratio(costmodel.CostParams(args.L, int(n), args.d, args.k, args.m))
                            for n in ns],
            "training": [costmodel.training_ratio(costmodel.CostParams(args.L, int(n), args.d, args.k, args.m))
                         for n in ns],
        }
        plotting.plot_cost(ns, ratios, out / "cost.png")
        _write_manifest(args, out, [out / "cost.csv", out / "cost.png"])
    return 0


def cmd_decay(args) -> int:
    plan = _plan(args)
    if plan.num_segments < 2:
        raise PlanMismatch("decay needs a plan with a compressed segment")
    model = load_checkpoint(args.checkpoint)
    _, items = _items(args)
    prefix = plan.total_items - plan.segment_lengths[-1]
    hist = items[:, args.start:args.start + prefix]
    spans = items[:, args.start + prefix:]
    caches = evalkit.build_caches(model, hist, plan)
    window = args.window or plan.segment_lengths[-1]
    series = evalkit.decay_eval(model, caches, spans, window, args.stride, _ints(args.ks))
    out = _out_dir(args.out)
    (out / "decay.csv").write_text(series.csv())
    plotting.plot_decay({"personalized": series}, min(_ints(args.ks)), out / "decay.png")
    _write_manifest(args, out, [out / "decay.csv", out / "decay.png"], {"model.ckpt": checkpoint_crc(model)})
    print(f"cache fingerprint {series.cache_fingerprint} stable={series.cache_stable}", file=sys.stderr)
    sys.stdout.write(series.csv())
    return 0


def cmd_placement(args) -> int:
    settings = [parse_plan(line) for line in Path(args.settings).read_text().splitlines() if line.strip()]
    ds, items = _items(args)
    total = settings[0].total_items
    train_items = items[:, args.start:args.start + total]
    cfg = _train_config(args)

    def factory(plan):
        return init_model(_model_config(args, plan, ds.vocab_size), dtype=np.float32)

    def fit(model, data, plan):
        return train(model, data, plan, cfg)[0]

    rows = evalkit.placement_compare(factory, settings, train_items, items[:, args.start:],
                                     fit, _ints(args.ks))
    text = evalkit.placement_csv(rows)
    out = _out_dir(args.out)
    (out / "placement.csv").write_text(text)
    table = [(evalkit.setting_label(p), K, r, n) for p, m in rows for K, r, n in m.rows()]
    plotting.plot_placement(table, min(_ints(args.ks)), out / "placement.png")
    _write_manifest(args, out, [out / "placement.csv", out / "placement.png"])
    sys.stdout.write(text)
    return 0


def cmd_attribute(args) -> int:
    plan = _plan(args)
    model = load_checkpoint(args.checkpoint, dtype=np.float64)
    _, items = _items(args)
    user_items = items[args.user, args.start:args.start + plan.total_items]
    attributions = expertlens.attribute_experts(model, user_items, plan, args.top_n, basis=args.basis)
    sys.stdout.write(expertlens.attribution_tsv(attributions))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_plan(p, segments="64,16", experts="4,0"):
    p.add_argument("--segments", default=segments, help="comma-separated segment lengths")
    p.add_argument("--experts", default=experts, help="comma-separated experts per segment")
    p.add_argument("--plan-file", help="plan file: 'segments = [..]; experts = [..]' (overrides the lists)")


def _add_data(p):
    p.add_argument("--data", required=True, help="event TSV (user_id, item_id, event_type, timestamp)")
    p.add_argument("--start", type=int, default=0, help="index of the first event used per user")


def _add_model(p):
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ffn", type=int, default=0, help="feed-forward width (0 means 2 * dim)")


def _add_training(p):
    d = TrainConfig()
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--grad-clip", type=float, default=d.grad_clip)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segrec", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic event log")
    defaults = datakit.SyntheticConfig()
    for f in fields(datakit.SyntheticConfig):
        if f.name == "seed":
            continue
        p.add_argument("--" + f.name.replace("_", "-"), type=type(getattr(defaults, f.name)),
                       default=getattr(defaults, f.name))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_data(p)
    _add_plan(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--baseline", action="store_true", help="train with a plain causal mask")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="next-item metrics for a checkpoint")
    _add_data(p)
    _add_plan(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ks", default="10,50,200")
    p.add_argument("--method", default="model", help="label for the method column")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="recommend items from a cached history")
    _add_plan(p)
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--cache", help="saved expert cache")
    src.add_argument("--history", help="comma-separated items of the compressed segments")
    p.add_argument("--save-cache", help="write the cache built from --history here")
    p.add_argument("--recent", required=True, help="comma-separated recent items")
    p.add_argument("--K", type=int, default=10)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("mask", help="print the attention mask of a plan")
    _add_plan(p)
    p.add_argument("--out", help="write the dump here instead of stdout")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("cost", help="analytic cost report")
    p.add_argument("--L", type=int, default=16)
    p.add_argument("--n", type=int, default=1280)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--out", help="directory for cost.csv and cost.png")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("decay", help="slide the recent window over a frozen expert cache")
    _add_data(p)
    _add_plan(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window", type=int, default=0, help="recent window (0 means the last segment length)")
    p.add_argument("--stride", type=int, default=64)
    p.add_argument("--ks", default="10,50,200")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("placement", help="train and compare expert placements")
    _add_data(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--settings", required=True, help="file with one plan per line")
    p.add_argument("--ks", default="10,50,200")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_placement)

    p = sub.add_parser("attribute", help="non-negative attribution of expert outputs")
    _add_data(p)
    _add_plan(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", type=int, required=True, help="row of the user in the data")
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--basis", choices=expertlens.BASES, default="embedding",
                   help="item embeddings or contextual item-slot states")
    p.set_defaults(func=cmd_attribute)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except SegrecError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
