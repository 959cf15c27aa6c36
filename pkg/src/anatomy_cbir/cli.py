"""Command-line entry points for the full workflow.

Subcommands: phantom-gen, ingest, train, eval, index-build, query, serve,
export-figure.  Each accepts an optional JSON config file plus flag overrides;
exit code 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from anatomy_cbir import __version__


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _print(obj):
    print(json.dumps(obj, indent=2, default=str))


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    from anatomy_cbir.phantoms import DatasetSpec, make_phantom_dataset
    from anatomy_cbir.slices import save_slices

    spec = DatasetSpec(count=args.count, seed=args.seed, size=args.size,
                       normal_fraction=args.normal_fraction)
    slices = make_phantom_dataset(spec)
    out = save_slices(slices, args.out)
    n_abn = sum(1 for s in slices if s.is_abnormal)
    _print({"written": len(slices), "abnormal": n_abn,
            "normal": len(slices) - n_abn, "dir": str(out)})
    return 0


def cmd_ingest(args) -> int:
    from anatomy_cbir.slices import save_slices
    from anatomy_cbir.volumes import ingest_volume

    slices = ingest_volume(args.volume, format=args.format, size=args.size,
                           labels_path=args.labels)
    out = save_slices(slices, args.out)
    _print({"written": len(slices), "dir": str(out)})
    return 0


def _load_archive(data_dir, split=None, split_seed=0):
    from anatomy_cbir.phantoms import split_dataset
    from anatomy_cbir.slices import load_slices

    slices = load_slices(data_dir)
    if split:
        slices = split_dataset(slices, seed=split_seed)[split]
    return slices


def cmd_train(args) -> int:
    from anatomy_cbir.trainer import TrainConfig, train

    cfg_dict = _load_config(args.config)
    overrides = {
        "max_epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.lr, "image_size": args.image_size,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            cfg_dict[key] = value
    if args.no_augment:
        cfg_dict["augment"] = False
    if args.desk:
        config = TrainConfig.desk(**cfg_dict)
    else:
        config = TrainConfig.from_dict(cfg_dict) if cfg_dict else TrainConfig()

    slices = _load_archive(args.data, args.split, args.split_seed)
    budget_s = args.time_budget_min * 60.0 if args.time_budget_min else None
    import time
    t0 = time.monotonic()

    def progress(summary):
        line = (f"epoch {summary['epoch']:4d}  total {summary['total']:.4f}  "
                f"rec {summary['rec']:.5f}  seg {summary['seg']:.4f}  "
                f"dis {summary['dis']:.4f}  ({summary['seconds']:.1f}s)")
        print(line, file=sys.stderr)
        if budget_s is not None and time.monotonic() - t0 > budget_s:
            print("time budget reached; stopping", file=sys.stderr)
            return False
        return True

    result = train(slices, config, args.out, progress=progress)
    _print({"checkpoint": str(result.checkpoint_path), "epochs": result.epochs_run,
            "diverged": result.diverged,
            "final_total": result.loss_history[-1].get("total") if result.loss_history else None})
    return 1 if result.diverged else 0


def cmd_eval(args) -> int:
    from anatomy_cbir.trainer import evaluate_checkpoint

    slices = _load_archive(args.data, args.split, args.split_seed)
    report = evaluate_checkpoint(args.checkpoint, slices)
    payload = report.to_dict()
    if not args.per_slice:
        payload.pop("per_slice")
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    _print(payload)
    return 0


def cmd_index_build(args) -> int:
    from anatomy_cbir.checkpoint import load_checkpoint, restore_model
    from anatomy_cbir.retrieval import build_index, save_index

    model = restore_model(load_checkpoint(args.checkpoint))
    slices = _load_archive(args.data, args.split, args.split_seed)
    index = build_index(model, slices)
    save_index(index, args.out)
    _print({"entries": len(index), "codebook_hash": index.codebook_hash,
            "file": str(args.out)})
    return 0


def _query_pair(args, model, slices_by_id):
    from anatomy_cbir.retrieval import mix_codes
    from anatomy_cbir.service import decode_previews  # noqa: F401  (shared deps)
    from anatomy_cbir.trainer import slice_to_tensors
    from anatomy_cbir.retrieval import encode_pair

    def pair_for(slice_id):
        if slice_id not in slices_by_id:
            raise ValueError(f"unknown slice id {slice_id!r}")
        slc = slices_by_id[slice_id]
        x, _, _ = slice_to_tensors(slc, model.image_size)
        return encode_pair(model, x, slice_id, meta=slc.meta)

    normal_id = args.normal_id or args.id
    abnormal_id = args.abnormal_id or args.id
    if normal_id is None or abnormal_id is None:
        raise ValueError("pass --id, or both --normal-id and --abnormal-id")
    if normal_id == abnormal_id:
        return pair_for(normal_id)
    return mix_codes(pair_for(normal_id), pair_for(abnormal_id))


def cmd_query(args) -> int:
    from anatomy_cbir.checkpoint import load_checkpoint, restore_model
    from anatomy_cbir.retrieval import load_index, query_topk

    model = restore_model(load_checkpoint(args.checkpoint))
    index = load_index(args.index)
    slices = {s.id: s for s in _load_archive(args.data)}
    q = _query_pair(args, model, slices)
    result = query_topk(index, q, args.metric, args.k)
    _print(result.to_dict())
    return 0


def cmd_serve(args) -> int:
    from anatomy_cbir.service import load_app, serve

    app = load_app(args.checkpoint, args.index, args.data, ui_dir=args.ui)
    serve(app, host=args.host, port=args.port)
    return 0


def cmd_export_figure(args) -> int:
    from anatomy_cbir.checkpoint import load_checkpoint, restore_model
    from anatomy_cbir.figures import export_query_figure, export_reconstruction_figure
    from anatomy_cbir.retrieval import METRICS, load_index, query_topk

    model = restore_model(load_checkpoint(args.checkpoint))
    slices = {s.id: s for s in _load_archive(args.data)}
    if args.kind == "reconstruction":
        from anatomy_cbir.service import decode_previews
        import base64, io
        from PIL import Image

        rows = []
        ids = args.id.split(",") if args.id else sorted(slices)[: args.k]
        for slice_id in ids:
            slc = slices[slice_id]
            data = decode_previews(model, slc)

            def png_to_arr(b64):
                img = Image.open(io.BytesIO(base64.b64decode(b64))).convert("L")
                return np.asarray(img, dtype=np.float32) / 255.0

            rows.append({"id": slice_id,
                         "x": slc.pixels,
                         "x_hat_plus": png_to_arr(data["x_hat_plus"]),
                         "x_hat_minus": png_to_arr(data["x_hat_minus"])})
        export_reconstruction_figure(args.out, rows)
    else:
        index = load_index(args.index)
        q = _query_pair(args, model, slices)
        neighbors = {}
        for metric in METRICS:
            result = query_topk(index, q, metric, args.k)
            neighbors[metric] = [(slices[it.slice_id], it.distance)
                                 for it in result.items if it.slice_id in slices]
        query_slc = slices[args.normal_id or args.id]
        export_query_figure(args.out, query_slc, neighbors)
    _print({"figure": str(args.out)})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anatomy-cbir",
                                description="dual-code anatomy retrieval toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate a synthetic slice archive")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--normal-fraction", type=float, default=0.3)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_phantom_gen)

    g = sub.add_parser("ingest", help="slice a volume file into the archive format")
    g.add_argument("--volume", required=True)
    g.add_argument("--labels", default=None)
    g.add_argument("--format", choices=("auto", "nifti", "raw"), default="auto")
    g.add_argument("--size", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_ingest)

    def add_split(gp):
        gp.add_argument("--split", choices=("train", "query", "reference"), default=None)
        gp.add_argument("--split-seed", type=int, default=0)

    g = sub.add_parser("train", help="train the codec on a slice archive")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None, help="JSON file mirroring TrainConfig")
    g.add_argument("--desk", action="store_true", help="desk-scale defaults (128px, batch 16)")
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--image-size", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--no-augment", action="store_true")
    g.add_argument("--time-budget-min", type=float, default=None)
    add_split(g)
    g.set_defaults(fn=cmd_train)

    g = sub.add_parser("eval", help="evaluate a checkpoint on a slice archive")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", default=None)
    g.add_argument("--per-slice", action="store_true")
    add_split(g)
    g.set_defaults(fn=cmd_eval)

    g = sub.add_parser("index-build", help="build a retrieval index")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    add_split(g)
    g.set_defaults(fn=cmd_index_build)

    g = sub.add_parser("query", help="run a top-k retrieval query")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--index", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--id", default=None)
    g.add_argument("--normal-id", default=None)
    g.add_argument("--abnormal-id", default=None)
    g.add_argument("--metric", choices=("normal", "abnormal", "concat"), default="concat")
    g.add_argument("--k", type=int, default=5)
    g.set_defaults(fn=cmd_query)

    g = sub.add_parser("serve", help="run the read-only HTTP API")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--index", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--ui", default=None, help="directory of built UI assets to mount at /ui")
    g.add_argument("--host", default="127.0.0.1")
    g.add_argument("--port", type=int, default=8000)
    g.set_defaults(fn=cmd_serve)

    g = sub.add_parser("export-figure", help="write a retrieval or reconstruction grid")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--index", default=None)
    g.add_argument("--data", required=True)
    g.add_argument("--kind", choices=("query", "reconstruction"), default="query")
    g.add_argument("--id", default=None)
    g.add_argument("--normal-id", default=None)
    g.add_argument("--abnormal-id", default=None)
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_export_figure)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
