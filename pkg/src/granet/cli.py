"""``granet`` command line: tile, train, eval, predict, gradcheck, params, synth.

Exit status is 0 on success, 1 for contract or configuration errors and 2
for I/O or parse errors.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcheck as gc
from .config import RunConfig, load_run_config, resolve_config_path
from .errors import ConfigError, ContractError, GraNetError, ParseError
from .gra import GRA_MODES
from .metrics import ConfusionMatrix, report
from .network import ABLATION_TAGS, GraNetModel, NetworkConfig, build_ablation, load_checkpoint, param_count
from .pointcloud import (
    ClassMap,
    PointCloud,
    normalize_hag,
    read_pts,
    read_pts_auto,
    write_error_map,
    write_labels,
    write_pts,
)
from .spatial import tile_blocks, write_manifest
from .synthetic import SCENE_CLASSES, synthetic_scene
from .training import CHECKPOINT_NAME, LOG_NAME, make_blocks, predict_cloud, train

log = logging.getLogger("granet")

METRICS_NAME = "metrics.csv"
LABELS_NAME = "labels.pts"
ERRORMAP_NAME = "errormap.pts"


def class_map_for(count: int, names=()) -> ClassMap:
    if names:
        return ClassMap(tuple(names))
    if count == 9:
        return ClassMap.isprs()
    if count == 3:
        return SCENE_CLASSES
    return ClassMap(tuple(f"class{i}" for i in range(count)))


def _tiles(cloud: PointCloud, block: float, sub: float, stride: float):
    return tile_blocks(cloud.xyz, block=block, sub=sub, stride=stride)


# --------------------------------------------------------------------------
# commands


def cmd_tile(args) -> int:
    cloud = read_pts_auto(args.input)
    plan = _tiles(cloud, args.block, args.sub, args.stride)
    write_manifest(plan, args.manifest, len(cloud))
    counts = np.array([len(m) for m in plan.members])
    print(f"subblocks: {len(plan)}")
    print(f"points per subblock: min {counts.min()} mean {counts.mean():.1f} max {counts.max()}")
    for i, (origin, c) in enumerate(zip(plan.origins, counts)):
        print(f"  {i} origin=({float(origin[0])!r}, {float(origin[1])!r}) points={c}")
    return 0


def _load_config(args) -> RunConfig:
    path = resolve_config_path(getattr(args, "config", None))
    if path is None:
        raise ConfigError("no config given (use --config or set GRANET_CONFIG)")
    return load_run_config(path)


def _prepare(cloud: PointCloud, hag: bool, cell: float) -> PointCloud:
    return normalize_hag(cloud, cell) if hag else cloud


def _split(n: int, fraction: float, seed: int):
    if n < 2 or fraction <= 0:
        return np.arange(n), None
    n_val = max(1, int(round(fraction * n)))
    n_val = min(n_val, n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def cmd_train(args) -> int:
    rc = _load_config(args)
    net, tcfg, pre = rc.network, rc.training, rc.preprocess
    if args.epochs is not None:
        tcfg = tcfg.replace(max_epochs=args.epochs)
    if args.seed is not None:
        tcfg = tcfg.replace(seed=args.seed)
        net = net.replace(seed=args.seed)
    if rc.paths.train is None:
        raise ConfigError("config has no [paths] train file")
    cmap = class_map_for(net.class_count, pre.class_names)
    cloud = _prepare(read_pts(rc.paths.train, True, cmap), pre.hag, pre.hag_cell_size)
    tiles = _tiles(cloud, pre.block, pre.sub, pre.stride)
    blocks = make_blocks(cloud, tiles, net.points_per_block, seed=tcfg.seed)
    if rc.paths.validation:
        vcloud = _prepare(read_pts(rc.paths.validation, True, cmap), pre.hag, pre.hag_cell_size)
        val = make_blocks(vcloud, _tiles(vcloud, pre.block, pre.sub, pre.stride), net.points_per_block, tcfg.seed)
        train_blocks = blocks
    else:
        tr, va = _split(len(blocks), rc.paths.val_fraction, tcfg.seed)
        train_blocks = [blocks[i] for i in tr]
        val = None if va is None else [blocks[i] for i in va]
    out = Path(args.out or rc.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(
        RunConfig(net, tcfg, rc.paths, pre).to_text(), encoding="utf-8"
    )
    model = GraNetModel(net)
    meta = {
        "classes": ",".join(cmap.names),
        "hag": "true" if pre.hag else "false",
        "hag_cell_size": repr(pre.hag_cell_size),
        "block": repr(pre.block),
        "sub": repr(pre.sub),
        "stride": repr(pre.stride),
    }
    log.info("training on %d blocks (%d validation), %d epochs", len(train_blocks), len(val or []), tcfg.max_epochs)

    def report_epoch(rec):
        if args.verbose:
            print(f"epoch {rec.epoch} lr {rec.lr:.6g} train {rec.train_loss:.4f} val {rec.val_loss:.4f} oa {rec.val_oa:.4f}")
        return False

    history = train(model, train_blocks, val, tcfg, out_dir=out, on_epoch=report_epoch, meta=meta)
    if history.epochs:
        last = history.epochs[-1]
        best_epoch, best_loss = history.checkpoints[-1]
        print(f"epochs: {len(history.epochs)}  final train_loss {last.train_loss:.4f}  val_loss {last.val_loss:.4f}  val_oa {last.val_oa:.4f}")
        print(f"best checkpoint: epoch {best_epoch} val_loss {best_loss:.4f} -> {out / CHECKPOINT_NAME}")
    print(f"log: {out / LOG_NAME}")
    return 0


def _checkpoint_inputs(args, need_labels: bool):
    ck = load_checkpoint(args.checkpoint)
    meta = ck.meta
    names = tuple(n for n in meta.get("classes", "").split(",") if n)
    cmap = class_map_for(ck.config.class_count, names)
    cloud = read_pts_auto(args.data, cmap)
    if need_labels and not cloud.has_labels:
        raise ContractError(f"{args.data}: evaluation needs a labeled point file")
    hag = meta.get("hag", "false") == "true"
    prepared = _prepare(cloud, hag, float(meta.get("hag_cell_size", 25.0)))
    tiles = _tiles(
        prepared,
        float(meta.get("block", args.block)),
        float(meta.get("sub", args.sub)),
        float(meta.get("stride", args.stride)),
    )
    blocks = make_blocks(prepared, tiles, ck.config.points_per_block, seed=args.seed)
    pred = predict_cloud(ck.model, prepared, tiles, blocks)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    return ck, cloud, pred, out


def cmd_eval(args) -> int:
    ck, cloud, pred, out = _checkpoint_inputs(args, need_labels=True)
    cm = ConfusionMatrix(ck.config.class_count).accumulate(cloud.labels, pred)
    rep = report(cm, cloud.class_map.names)
    print(rep.to_table())
    rep.write_csv(out / METRICS_NAME)
    print(f"metrics: {out / METRICS_NAME}")
    return 0


def cmd_predict(args) -> int:
    ck, cloud, pred, out = _checkpoint_inputs(args, need_labels=False)
    write_labels(cloud, pred, out / LABELS_NAME)
    print(f"labels: {out / LABELS_NAME}")
    if cloud.has_labels:
        write_error_map(cloud, pred, out / ERRORMAP_NAME)
        oa = float(np.mean(cloud.labels == pred))
        print(f"error map: {out / ERRORMAP_NAME} (OA {oa:.4f})")
    else:
        log.warning("input has no ground-truth labels; no error map written")
    return 0


def cmd_gradcheck(args) -> int:
    names = gc.MODULES if args.module == "all" else (args.module,)
    ok = True
    for name in names:
        r = gc.check(name, seed=args.seed)
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.module:<15} max_rel_error {r.max_error:.3e}  {status}  ({r.coordinates} coords, {r.seconds:.2f}s)")
        ok &= r.passed
    return 0 if ok else 1


def cmd_params(args) -> int:
    path = resolve_config_path(args.config)
    net = load_run_config(path).network if path else NetworkConfig()
    if args.miniature:
        net = NetworkConfig.miniature(class_count=net.class_count)
    if args.ablation:
        net = build_ablation(args.ablation, net)
    if args.gra_mode:
        net = net.replace(gra_mode=args.gra_mode)
    rep = param_count(GraNetModel(net))
    for name, count in rep.by_module.items():
        print(f"{name:<10} {count:>12d}")
    print(f"{'total':<10} {rep.total:>12d}  ({rep.total / 1e6:.4f} M)")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = out / "scene.pts"
    write_pts(synthetic_scene(args.points, args.seed), scene)
    text = resources.files("granet").joinpath("data/synthetic.ini").read_text(encoding="utf-8")
    text = text.replace("train = synthetic_scene.pts", "train = scene.pts")
    (out / "config.ini").write_text(text, encoding="utf-8")
    print(f"scene: {scene}\nconfig: {out / 'config.ini'}")
    return 0


# --------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="granet", description="Semantic segmentation of ALS point clouds.")
    p.add_argument("--threads", type=int, default=None, help="cap numeric library threads (default: all cores)")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tile", help="split a point file into overlapping subblocks")
    t.add_argument("input")
    t.add_argument("manifest")
    t.add_argument("--block", type=float, default=100.0)
    t.add_argument("--sub", type=float, default=25.0)
    t.add_argument("--stride", type=float, default=12.5)
    t.set_defaults(func=cmd_tile)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", help="run config (default: $GRANET_CONFIG)")
    t.add_argument("--out", help="output directory (overrides [paths] out_dir)")
    t.add_argument("--epochs", type=int, help="override max_epochs")
    t.add_argument("--seed", type=int, help="override network and training seeds")
    t.add_argument("-v", "--verbose", action="store_true", help="print every epoch")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "score a labeled point file"),
        ("predict", cmd_predict, "label a point file"),
    ):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--checkpoint", required=True)
        t.add_argument("--data", required=True)
        t.add_argument("--out", help="output directory (default: next to the checkpoint)")
        t.add_argument("--seed", type=int, default=0, help="block resampling seed")
        t.add_argument("--block", type=float, default=100.0)
        t.add_argument("--sub", type=float, default=25.0)
        t.add_argument("--stride", type=float, default=12.5)
        t.set_defaults(func=func)

    t = sub.add_parser("gradcheck", help="finite-difference check of a miniature module")
    t.add_argument("--module", default="full", choices=(*gc.MODULES, "all"))
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("params", help="learnable parameter counts per module")
    t.add_argument("--config", help="run config (default: $GRANET_CONFIG, else built-in defaults)")
    t.add_argument("--gra-mode", choices=GRA_MODES)
    t.add_argument("--ablation", choices=ABLATION_TAGS)
    t.add_argument("--miniature", action="store_true")
    t.set_defaults(func=cmd_params)

    t = sub.add_parser("synth", help="write the synthetic three-class scene and a matching config")
    t.add_argument("out_dir")
    t.add_argument("--points", type=int, default=4096)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_synth)
    return p


def _thread_limit(n: Optional[int]):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ParseError as exc:
        print(f"granet: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        where = f"{exc.filename}: " if getattr(exc, "filename", None) else ""
        print(f"granet: error: {where}{exc.strerror or exc}", file=sys.stderr)
        return 2
    except (GraNetError, ValueError) as exc:
        print(f"granet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
