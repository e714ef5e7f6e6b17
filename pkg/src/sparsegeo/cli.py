"""Command line entry point: synth, backbone, train, refine, eval, bench, ablate."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .geo import DenseMap, MapKind, ValidityMask, depth_metrics, pointmap_metrics
from .pipeline import bench as B
from .pipeline.export import write_ply, write_png16, write_raw
from .pipeline.run import SELECTORS, Model, geometry_kind, run_pipeline
from .pipeline.scenes import BackboneOutput, SceneSample, default_long_side, synth_scene, synthetic_backbone
from .pipeline.tensorfile import read_tensor, write_tensor
from .pipeline.weights import load_model, save_model
from .sparse.refiner import RefinerConfig

log = logging.getLogger("sparsegeo")

SIZE_DESK = (512, 512)
SIZE_2K = (1536, 2048)
OBJECTS_DESK = 12
OBJECTS_2K = 48
TRAIN_SEED0 = 1000
TEST_SEED0 = 5000


# ---------------------------------------------------------------------------
# on-disk scenes: one directory per scene holding TensorFiles


def save_scene(d: Path, s: SceneSample):
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "rgb.rtft", s.rgb.values)
    write_tensor(d / "gt.rtft", s.gt_geo.values)
    write_tensor(d / "mask.rtft", s.mask.bits.astype(np.uint8))
    (d / "seed.txt").write_text(f"{s.seed}\n")


def load_scene(d: Path) -> SceneSample:
    gt = read_tensor(d / "gt.rtft")
    seed = int((d / "seed.txt").read_text()) if (d / "seed.txt").exists() else 0
    return SceneSample(DenseMap(read_tensor(d / "rgb.rtft"), MapKind.RGB),
                       DenseMap(gt, geometry_kind(gt.shape[2])),
                       ValidityMask(read_tensor(d / "mask.rtft").astype(bool)), seed)


def save_backbone(d: Path, b: BackboneOutput):
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "coarse_lr.rtft", b.coarse_lr.values)
    write_tensor(d / "logits_lr.rtft", b.logits_lr.values)


def load_backbone(coarse_path, logits_path) -> BackboneOutput:
    """Read an external (or synthetic) backbone from two TensorFiles and validate it."""
    coarse = read_tensor(coarse_path)
    logits = read_tensor(logits_path)
    if coarse.ndim != 3 or logits.ndim != 3:
        raise InvalidArgument("backbone tensors must be H x W x C")
    if not (np.isfinite(coarse).all() and np.isfinite(logits).all()):
        raise InvalidArgument("backbone tensors contain non-finite values")
    return BackboneOutput(DenseMap(coarse, geometry_kind(coarse.shape[2])), DenseMap(logits, MapKind.LOGITS),
                          max(coarse.shape[:2]))


def scene_dirs(root: Path) -> list[Path]:
    dirs = sorted(p for p in root.iterdir() if (p / "gt.rtft").exists())
    if not dirs:
        raise InvalidArgument(f"no scenes under {root}")
    return dirs


def make_scenes(seeds, size, n_objects, long_side, k_bins, geometry="depth"):
    out = []
    for s in seeds:
        sc = synth_scene(s, *size, n_objects=n_objects, geometry=geometry)
        out.append((sc, synthetic_backbone(sc, long_side, k_bins=k_bins, seed=s)))
    return out


# ---------------------------------------------------------------------------
# subcommands


def _size(args):
    return SIZE_2K if args.twok else SIZE_DESK


def _objects(args):
    return OBJECTS_2K if args.twok else OBJECTS_DESK


def _long_side(args):
    h, w = _size(args)
    return args.long_side or default_long_side(h, w)


def cmd_synth(args):
    out = Path(args.out)
    for i in range(args.count):
        seed = args.seed + i
        s = synth_scene(seed, *_size(args), n_objects=_objects(args), geometry=args.geometry)
        save_scene(out / f"scene_{seed:06d}", s)
    print(f"wrote {args.count} scenes to {out}")


def cmd_backbone(args):
    if args.coarse and args.logits:
        b = load_backbone(args.coarse, args.logits)
        print(f"ok: coarse {b.coarse_lr.shape}, logits {b.logits_lr.shape}")
        return
    for d in scene_dirs(Path(args.scenes)):
        s = load_scene(d)
        ls = args.long_side or default_long_side(s.rgb.height, s.rgb.width)
        save_backbone(d, synthetic_backbone(s, ls, k_bins=args.k_bins, seed=s.seed))
    print("backbone outputs written")


def _scene_backbone(d: Path):
    return load_scene(d), load_backbone(d / "coarse_lr.rtft", d / "logits_lr.rtft")


def cmd_train(args):
    from .trainer import TrainConfig, curve_to_csv, train

    if args.scenes:
        samples = [_scene_backbone(d) for d in scene_dirs(Path(args.scenes))]
    else:
        samples = make_scenes(range(TRAIN_SEED0, TRAIN_SEED0 + args.count), _size(args), _objects(args),
                              _long_side(args), args.k_bins)
    cfg = TrainConfig(steps=args.steps, batch=args.batch, learn_rate=args.lr, seed=args.seed,
                      alpha=args.alpha, halo=args.halo)
    rcfg = RefinerConfig(geo_channels=samples[0][0].gt_geo.channels)
    refiner, fusion, curve = train(samples, cfg, init_seed=args.seed, rcfg=rcfg, log_every=100)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "weights.rtfm", Model(rcfg, refiner, fusion))
    (out / "loss.csv").write_text(curve_to_csv(curve))
    print(f"final loss {curve[-1][1]:.5f}; weights in {out / 'weights.rtfm'}")


def cmd_refine(args):
    model = load_model(args.weights)
    d = Path(args.scene)
    scene, bb = _scene_backbone(d)
    out, diag = run_pipeline(scene.rgb, bb, model, alpha=args.alpha, halo=args.halo, strategy=args.strategy,
                             selector=args.selector, fraction=args.fraction, seed=args.seed)
    od = Path(args.out)
    od.mkdir(parents=True, exist_ok=True)
    write_raw(od / "refined.rtft", out)
    if out.channels == 1:
        write_png16(od / "refined.png", out, scene.mask)
    write_ply(od / "refined.ply", out, scene.mask)
    report = {"selected_fraction": diag.selected_fraction, "halo_fraction": diag.halo_fraction,
              "madds": diag.madds, "pair_counts": diag.pair_counts, "stage_times": diag.stage_times}
    (od / "diagnostics.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))


def cmd_eval(args):
    pred = read_tensor(args.pred)
    gt = read_tensor(args.gt)
    mask = ValidityMask(read_tensor(args.mask).astype(bool)) if args.mask else None
    if gt.shape[2] == 1:
        rep = depth_metrics(DenseMap(pred, MapKind.DEPTH), DenseMap(gt, MapKind.DEPTH), mask)
    else:
        valid = mask.bits if mask is not None else np.ones(gt.shape[:2], bool)
        rep = pointmap_metrics(pred[valid], gt[valid], accelerate=True)
    print(rep.to_text(), end="")


def _model_for(args, channels=1) -> Model:
    if args.weights:
        return load_model(args.weights)
    from .pipeline.weights import zero_head_model

    log.warning("no --weights given, using an untrained zero-head model")
    return zero_head_model(RefinerConfig(geo_channels=channels), args.seed)


def cmd_bench(args):
    scenes = make_scenes(range(TEST_SEED0, TEST_SEED0 + args.count), _size(args), _objects(args),
                         _long_side(args), args.k_bins)
    rows = B.bench(scenes, _model_for(args), halo=args.halo, strategy=args.strategy, warmup=args.warmup,
                   runs=args.runs)
    print(B.format_table(rows))
    dense = rows[-1]
    i = [r.alpha for r in rows].index(0.3) if 0.3 in [r.alpha for r in rows] else 0
    sparse = rows[i]
    print(f"\nat {sparse.label}: MAdds ratio dense/sparse = {dense.madds / max(sparse.madds, 1):.2f}, "
          f"refine time ratio = {dense.refine_time / max(sparse.refine_time, 1e-12):.2f}")


def cmd_ablate(args):
    scenes = make_scenes(range(TEST_SEED0, TEST_SEED0 + args.count), _size(args), _objects(args),
                         _long_side(args), args.k_bins)
    model = _model_for(args)
    if args.kind == "fusion":
        res = B.ablate_fusion(scenes, model, alpha=args.alpha, halo=args.halo)
        for k, v in res.items():
            print(f"{k:<8} full_rmse={np.mean(v):.5f}")
    elif args.kind == "selector":
        res = B.ablate_selector(scenes, model, fraction=args.fraction, halo=args.halo, seed=args.seed)
        for k, v in res.items():
            print(f"{k:<8} full_rmse={np.mean(v['full']):.5f} selected_rmse={np.mean(v['selected']):.5f}")
    else:
        print(B.format_table(B.ablate_threshold(scenes, model, halo=args.halo, warmup=args.warmup,
                                                runs=args.runs)))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--alpha", type=float, default=0.3)
    common.add_argument("--halo", type=int, default=1)
    common.add_argument("--long-side", type=int, default=None,
                        help="backbone resolution (default: image long side / 8)")
    common.add_argument("--k-bins", type=int, default=4)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="pin BLAS threads")
    common.add_argument("--strategy", choices=("gated", "direct", "entropy", "coarse"), default="gated")
    common.add_argument("--selector", choices=SELECTORS[:4], default="entropy")
    common.add_argument("--fraction", type=float, default=0.1, help="budget for topk/random/edge")
    common.add_argument("--weights", default=None)
    common.add_argument("--out", default="out")
    common.add_argument("--2k", dest="twok", action="store_true", help="2048x1536 scenes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparsegeo", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--geometry", choices=("depth", "pointmap"), default="depth")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("backbone", parents=[common], help="synthetic backbone, or validate external files")
    s.add_argument("--scenes", default=None)
    s.add_argument("--coarse", default=None)
    s.add_argument("--logits", default=None)
    s.set_defaults(fn=cmd_backbone)

    s = sub.add_parser("train", parents=[common], help="train refiner and gate")
    s.add_argument("--scenes", default=None, help="scene dirs with backbone outputs (default: synthesize)")
    s.add_argument("--count", type=int, default=50)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--lr", type=float, default=1e-3)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("refine", parents=[common], help="run the pipeline on one scene dir")
    s.add_argument("--scene", required=True)
    s.set_defaults(fn=cmd_refine)

    s = sub.add_parser("eval", parents=[common], help="metrics of a prediction against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--mask", default=None)
    s.set_defaults(fn=cmd_eval)

    for name, fn, helptext in (("bench", cmd_bench, "threshold sweep plus dense baseline"),
                               ("ablate", cmd_ablate, "selector / fusion / threshold ablations")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--count", type=int, default=10 if name == "ablate" else 1)
        s.add_argument("--warmup", type=int, default=B.WARMUP)
        s.add_argument("--runs", type=int, default=B.RUNS)
        if name == "ablate":
            s.add_argument("--kind", choices=("selector", "fusion", "threshold"), default="fusion")
        s.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    limit = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(limits=args.threads)
    try:
        with limit:
            args.fn(args)
    except (InvalidArgument, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
