"""Command-line entry point.

Subcommands: gen (synthesize + export a dataset), hierrep (rebuild per-view
representations), train, eval (hier | instance | ablate-lambda | ablate-dim),
serve (interactive HTTP service).

Exit codes: 0 ok, 2 bad configuration, 3 missing file, 4 numerical abort.
Option precedence is flag > config file > built-in default; the effective
configuration is printed at startup unless --quiet is given.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

EXIT_BAD_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_NUMERICAL = 4

DATA_ENV = "OMNIFIELD_DATA"


def _threads_setup(n: int | None):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="override every seed-bearing option")
    shared.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads (default: all cores)")
    shared.add_argument("--quiet", action="store_true", help="suppress startup config echo and progress")

    p = argparse.ArgumentParser(prog="omnifield", description=__doc__, parents=[shared],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[shared], **kw)

    g = add_parser("gen", help="generate a synthetic scene dataset")
    g.add_argument("--spec", help="scene spec file (key = value); defaults apply when omitted")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--queries-per-view", type=int, default=2)

    h = add_parser("hierrep", help="(re)build per-view hierarchical representations")
    h.add_argument("--data", default=None, help=f"dataset dir (default ${DATA_ENV})")
    h.add_argument("--force", action="store_true", help="rebuild even when up to date")

    t = add_parser("train", help="train a feature field on a dataset")
    t.add_argument("--data", default=None)
    t.add_argument("--config", default=None, help="training config file (key = value)")
    t.add_argument("--out", required=True, help="output directory (checkpoint + loss log)")
    for name, typ in (("iterations", int), ("rays-per-batch", int), ("lam", float),
                      ("feature-dim", int), ("backend", str), ("phi-min", float)):
        t.add_argument(f"--{name}", type=typ, default=None)

    e = add_parser("eval", help="run benchmarks against a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--which", required=True, choices=["hier", "instance", "ablate-lambda", "ablate-dim"])
    e.add_argument("--out", default=None, help="directory for tables/records/overlays")
    e.add_argument("--config", default=None, help="training config for the ablation retrains")

    s = add_parser("serve", help="serve the interactive segmentation API")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", default=None)
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--scene-id", default="scene")
    return p


def _resolve_data(arg, parser) -> Path:
    path = arg or os.environ.get(DATA_ENV)
    if not path:
        parser.error(f"no dataset directory: pass --data or set ${DATA_ENV}")
    return Path(path)


def _echo_config(title, pairs, quiet):
    if quiet:
        return
    print(f"[{title}]")
    for key, val, source in pairs:
        print(f"  {key} = {val}  ({source})")


def _require_file(path, what: str):
    if not Path(path).exists():
        print(f"error: {what} not found: {path}", file=sys.stderr)
        raise SystemExit(EXIT_MISSING_FILE)


def cmd_gen(args) -> int:
    from .synthdata import HierSceneSpec, export_dataset, generate_scene

    try:
        if args.spec:
            _require_file(args.spec, "scene spec")
            spec = HierSceneSpec.from_file(args.spec)
            source = "config"
        else:
            spec = HierSceneSpec()
            source = "default"
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
    except (ValueError, TypeError) as exc:
        print(f"error: bad scene spec: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    _echo_config("gen", [(f.name, getattr(spec, f.name), source if args.spec else "default")
                         for f in fields(spec)], args.quiet)
    scene = generate_scene(spec)
    manifest = export_dataset(scene, args.out, queries_per_view=args.queries_per_view)
    if not args.quiet:
        print(f"wrote {manifest['n_views']} views, {manifest['n_points']} points, "
              f"{manifest['n_queries']} queries -> {args.out}")
    return 0


def cmd_hierrep(args, parser) -> int:
    from .hier2d import save_hierrep
    from .synthdata import SceneDataset, build_hierrep

    data = _resolve_data(args.data, parser)
    _require_file(data / "manifest", "dataset manifest")
    ds = SceneDataset(data)
    rebuilt = skipped = 0
    for view in range(ds.n_views):
        vdir = data / "views" / str(view)
        rep_path = vdir / "hierrep"
        masks_path = vdir / "masks"
        if (not args.force and rep_path.exists()
                and rep_path.stat().st_mtime >= masks_path.stat().st_mtime):
            skipped += 1
            continue
        rep = build_hierrep(ds.mask_set(view))
        provenance = (vdir / "masks.index").read_text().splitlines() if (vdir / "masks.index").exists() else []
        save_hierrep(rep, rep_path, source_image=f"view {view}", mask_provenance=provenance)
        rebuilt += 1
    if not args.quiet:
        print(f"hierrep: {rebuilt} rebuilt, {skipped} up to date")
    return 0


def _load_train_config(args):
    from .trainer import TrainConfig

    sources = {}
    if args.config:
        _require_file(args.config, "training config")
        cfg = TrainConfig.from_file(args.config)
        sources = {f.name: "config" for f in fields(cfg)}
    else:
        cfg = TrainConfig()
    overrides = {}
    for flag in ("iterations", "rays_per_batch", "lam", "feature_dim", "backend", "phi_min"):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[flag] = val
            sources[flag] = "flag"
    if args.seed is not None:
        overrides["seed"] = args.seed
        sources["seed"] = "flag"
    return replace(cfg, **overrides), sources


def cmd_train(args, parser) -> int:
    from .field import save_field
    from .trainer import TrainingDiverged, train_scene
    from .synthdata import SceneDataset

    data = _resolve_data(args.data, parser)
    _require_file(data / "manifest", "dataset manifest")
    try:
        cfg, sources = _load_train_config(args)
    except (ValueError, TypeError) as exc:
        print(f"error: bad training config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    _echo_config("train", [(f.name, getattr(cfg, f.name), sources.get(f.name, "default"))
                           for f in fields(cfg)], args.quiet)
    ds = SceneDataset(data)
    out = Path(args.out)
    try:
        field, _ = train_scene(ds, cfg, out_dir=out, quiet=args.quiet)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    save_field(field, out / "final.field")
    if not args.quiet:
        print(f"checkpoint -> {out / 'final.field'}")
    return 0


def cmd_eval(args, parser) -> int:
    import numpy as np

    from .evalbench import (
        ablation_sweep,
        hierarchical_benchmark,
        instance_benchmark,
        render_feature_view,
        save_png,
        score_to_rgb,
        tp_fp_fn_overlay,
        cosine_score_map,
        apply_threshold,
    )
    from .field import load_field
    from .synthdata import SceneDataset
    from .trainer import TrainConfig

    data = _resolve_data(args.data, parser)
    _require_file(data / "manifest", "dataset manifest")
    _require_file(args.checkpoint, "checkpoint")
    field = load_field(args.checkpoint)
    ds = SceneDataset(data)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    if args.which == "hier":
        bench = hierarchical_benchmark(field, ds)
        print(bench.table())
        if out:
            (out / "hier.txt").write_text(bench.table() + "\n")
            (out / "hier.jsonl").write_text(bench.records() + "\n")
            q = ds.queries[0]
            fmap, _ = render_feature_view(field, ds, q.view)
            sm = cosine_score_map(fmap, (q.x, q.y))
            save_png(score_to_rgb(sm.scores), out / "score_map.png")
            gt = ds.gt_masks(q.view)
            from .evalbench import best_iou_threshold

            thr, _ = best_iou_threshold(sm.scores, gt[q.l1_index])
            save_png(
                tp_fp_fn_overlay(apply_threshold(sm.scores, thr), gt[q.l1_index], ds.rgb_image(q.view)),
                out / "overlay_l1.png",
            )
    elif args.which == "instance":
        miou, pairs = instance_benchmark(field, ds, seed=args.seed or 0)
        print(f"instance propagation mIoU {miou:.4f} over {pairs} view pairs")
        if out:
            (out / "instance.txt").write_text(f"miou {miou:.6f}\npairs {pairs}\n")
    else:
        try:
            base = TrainConfig.from_file(args.config) if args.config else TrainConfig(
                iterations=2000, rays_per_batch=1024)
            if args.seed is not None:
                base = replace(base, seed=args.seed)
        except (ValueError, TypeError) as exc:
            print(f"error: bad training config: {exc}", file=sys.stderr)
            return EXIT_BAD_CONFIG
        kwargs = {"lam_values": (0.0, 0.5, 1.0)} if args.which == "ablate-lambda" else {"dim_values": (4, 16, 64)}
        _, table = ablation_sweep(ds, base, out_dir=out, quiet=args.quiet, **kwargs)
        print(table)
    return 0


def cmd_serve(args, parser) -> int:
    from .segserver import serve

    data = _resolve_data(args.data, parser)
    _require_file(data / "manifest", "dataset manifest")
    _require_file(args.checkpoint, "checkpoint")
    if not args.quiet:
        print(f"serving scene {args.scene_id!r} on {args.host}:{args.port}")
    serve({args.scene_id: (data, args.checkpoint)}, host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _threads_setup(args.threads)
    try:
        if args.command == "gen":
            return cmd_gen(args)
        if args.command == "hierrep":
            return cmd_hierrep(args, parser)
        if args.command == "train":
            return cmd_train(args, parser)
        if args.command == "eval":
            return cmd_eval(args, parser)
        if args.command == "serve":
            return cmd_serve(args, parser)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    parser.error(f"unknown command {args.command!r}")
    return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
