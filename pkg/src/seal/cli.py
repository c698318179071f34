"""Command line entry point: ``seal <command> --out DIR [flags]``.

Commands regenerate the synthetic world from ``--seed`` and the run config,
so every artifact is reproducible from the command line alone.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn, pipeline, synth
from .evaluation import cosine_map, write_metrics_csv, write_robustness_csv
from .geom import build_pairs, save_calibration
from .partition import save_labelmap, save_pointcloud, slic

log = logging.getLogger("seal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# 256-entry violet -> yellow ramp (viridis, 8-bit, made injective)
_RAMP_HEX = (
    "44015444025645045745055946075a46085c460a5d460b5e470d60470e61471063471164471365481467481668481769"
    "48186a481a6c481b6d481c6e481d6f481f70482071482173482374482475482576482677482878482979472a7a472c7a"
    "472d7b472e7c472f7d46307e46327e46337f463480453581453781453882443983443a83443b84433d84433e85423f85"
    "4240864241864142874144874045884046883f47883f48893e49893e4a893e4c8a3d4d8a3d4e8a3c4f8a3c508b3b518b"
    "3b528b3a538b3a548c39558c39568c38588c38598c375a8c375b8d365c8d365d8d355e8d355f8d34608d34618d33628d"
    "33638d32648e32658e31668e31678e31688e30698e306a8e2f6b8e2f6c8e2e6d8e2e6e8e2e6f8e2d708e2d718e2c718e"
    "2c728e2c738e2b748e2b758e2a768e2a778e2a788e29798e297a8e297b8e287c8e287d8e277e8e277f8e27808e26818e"
    "26828e25828e25838e25848e25858e24868e24878e23888e23898e238a8d228b8d228c8d228d8d218e8d218f8d21908d"
    "21918c20928c20928d20938c1f948c1f958b1f968b1f978b1f988b1f998a1f9a8a1e9b8a1e9c891e9d891f9e891f9f88"
    "1fa0881fa1881fa1871fa28720a38620a48621a58521a68522a78522a88423a98324aa8325ab8225ac8226ad8127ad81"
    "28ae8029af7f2ab07f2cb17e2db27d2eb37c2fb47c31b57b32b67a34b67935b77937b87838b9773aba763bbb753dbc74"
    "3fbc7340bd7242be7144bf7046c06f48c16e4ac16d4cc26c4ec36b50c46a52c56954c56856c66758c7655ac8645cc863"
    "5ec96260ca6063cb5f65cb5e67cc5c69cd5b6ccd5a6ece5870cf5773d05675d05477d1537ad1517cd2507fd34e81d34d"
    "84d44b86d54989d5488bd6468ed64590d74393d74195d84098d83e9bd93c9dd93ba0da39a2da37a5db36a8db34aadc32"
    "addc30b0dd2fb2dd2db5de2bb8de29bade28bddf26c0df25c2df23c5e021c8e020cae11fcde11dd0e11cd2e21bd5e21a"
    "d8e219dae319dde318dfe318e2e418e5e419e7e419eae51aece51befe51cf1e51df4e61ef6e620f8e621fbe723fde725"
)
COLORMAP = np.frombuffer(bytes.fromhex(_RAMP_HEX), dtype=np.uint8).reshape(256, 3)


def colormap_index(values, lo=0.0, hi=1.0) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("colormap input must be finite")
    t = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return np.rint(t * 255).astype(np.int64)


def export_ppm(values, path, lo=0.0, hi=1.0) -> None:
    """Write a 2D map as a binary PPM through the fixed 256-entry ramp."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("export_ppm expects a 2D map")
    synth.save_ppm(COLORMAP[colormap_index(values, lo, hi)], path)


def ppm_indices(path) -> np.ndarray:
    """Inverse of :func:`export_ppm`: ramp index of every pixel."""
    img = synth.load_ppm(path).astype(np.int64)
    keys = (img[..., 0] << 16) | (img[..., 1] << 8) | img[..., 2]
    table = (COLORMAP[:, 0].astype(np.int64) << 16) | (COLORMAP[:, 1].astype(np.int64) << 8) | COLORMAP[:, 2]
    order = np.argsort(table)
    pos = np.clip(np.searchsorted(table[order], keys), 0, 255)
    if np.any(table[order][pos] != keys):
        raise ValueError(f"{path} contains colours outside the ramp")
    return order[pos]


# --- argument parsing ---------------------------------------------------------

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _u64(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not np.isfinite(v) or v <= 0:
        raise argparse.ArgumentTypeError("must be a positive number")
    return v


def _weights(text):
    parts = text.split(",")
    try:
        w = tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"weights must be F,F,F, got {text!r}") from None
    if len(w) != 3 or any(not np.isfinite(x) or x < 0 for x in w):
        raise argparse.ArgumentTypeError("weights must be three non-negative numbers")
    return w


def _corruption(text):
    try:
        return synth.CorruptionSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


_COMMON = ("--config", "--out", "--seed", "--deterministic")
_SOURCE = ("--mask-dir", "--slic-segments")
_TRAIN = ("--temperature", "--weights", "--epochs", "--batch", "--lr")

# accepted flags per command; the parser is built from this table
FLAGS = {
    "gen": _COMMON,
    "slic": _COMMON + ("--slic-segments",),
    "project": _COMMON + _SOURCE,
    "cluster": _COMMON,
    "pretrain": _COMMON + _SOURCE + _TRAIN,
    "probe": _COMMON + _SOURCE + ("--checkpoint",),
    "robust": _COMMON + _SOURCE + ("--checkpoint", "--corruption"),
    "cosmap": _COMMON + _SOURCE + ("--checkpoint", "--query"),
}

_HELP = {
    "gen": "render the synthetic world (clouds, images, masks, calibration)",
    "slic": "SLIC superpixels for every image, plus superpixel counts",
    "project": "LiDAR-to-pixel pairs for every camera image",
    "cluster": "ground removal and clustering on every temporal pair",
    "pretrain": "run the joint contrastive pretraining",
    "probe": "linear probe of a checkpoint",
    "robust": "corruption robustness against the random-init baseline",
    "cosmap": "cosine-similarity map of a query point",
}

_FLAG_SPECS = {
    "--config": dict(metavar="PATH", help="INI run config (flags override it)"),
    "--out": dict(metavar="DIR", required=True, help="output directory"),
    "--seed": dict(type=_u64, metavar="U64", help="world and model seed"),
    "--deterministic": dict(action="store_true", help="fully serial execution"),
    "--mask-dir": dict(metavar="DIR", help="read superpixel label maps from DIR"),
    "--slic-segments": dict(type=_positive_int, metavar="N", help="SLIC superpixel quota"),
    "--temperature": dict(type=_positive_float, metavar="F", help="contrastive temperature"),
    "--weights": dict(type=_weights, metavar="F,F,F", help="weights of the vfm, tmp and p2s terms"),
    "--epochs": dict(type=_positive_int, metavar="N"),
    "--batch": dict(type=_positive_int, metavar="N"),
    "--lr": dict(type=_positive_float, metavar="F", help="initial learning rate"),
    "--corruption": dict(type=_corruption, metavar="KIND:LEVEL",
                         help="one of " + ", ".join(synth.CORRUPTIONS) + " at level 1..3"),
    "--checkpoint": dict(metavar="PATH", required=True, help="checkpoint written by pretrain"),
    "--query": dict(type=_nonneg_int, metavar="IDX", default=0,
                    help="index of the query among the paired points of scene 0, tick 0, camera 0"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seal", description="Desk-scale LiDAR/camera contrastive pretraining.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for cmd, flags in FLAGS.items():
        p = sub.add_parser(cmd, help=_HELP[cmd], description=_HELP[cmd])
        group = p.add_mutually_exclusive_group() if all(f in flags for f in _SOURCE) else None
        for flag in flags:
            target = group if group is not None and flag in _SOURCE else p
            target.add_argument(flag, **_FLAG_SPECS[flag])
    return parser


def config_from_args(args) -> pipeline.PretrainConfig:
    """Defaults, then the config file, then flags."""
    cfg = pipeline.PretrainConfig()
    if getattr(args, "config", None):
        cfg = pipeline.load_config(args.config, cfg)
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.deterministic:
        top["deterministic"] = True
    for key in ("epochs", "batch", "lr"):
        if getattr(args, key, None) is not None:
            top[key] = getattr(args, key)
    loss = cfg.loss
    if getattr(args, "temperature", None) is not None:
        loss = replace(loss, temperature=args.temperature)
    if getattr(args, "weights", None) is not None:
        loss = replace(loss, w_vfm=args.weights[0], w_tmp=args.weights[1], w_p2s=args.weights[2])
    sp = cfg.superpixel
    if getattr(args, "mask_dir", None) is not None:
        sp = replace(sp, source="mask-dir", mask_dir=args.mask_dir)
    elif getattr(args, "slic_segments", None) is not None:
        sp = replace(sp, slic_segments=args.slic_segments)
        if args.command != "slic":
            sp = replace(sp, source="slic")
    return replace(cfg, loss=loss, superpixel=sp, **top)


# --- commands -------------------------------------------------------------------

def _items(world):
    d = world.data
    for s in range(d.n_scenes):
        for t in range(d.ticks):
            yield s, t


def cmd_gen(cfg, out: Path, args):
    world = pipeline.make_world(cfg)
    for sub in ("scenes", "clouds", "images", "masks", "calib"):
        (out / sub).mkdir(exist_ok=True)
    for s in range(world.data.n_scenes):
        synth.save_scene_spec(world.specs[s], out / "scenes" / f"scene{s:03d}.txt")
    for s, t in _items(world):
        save_pointcloud(world.frame(s, t), out / "clouds" / f"scene{s:03d}_t{t:03d}.pc")
        for c in range(world.data.cameras):
            stem = pipeline.mask_name(s, t, c)[:-4]
            view = world.view(s, t, c)
            synth.save_ppm(view.image, out / "images" / f"{stem}.ppm")
            save_labelmap(view.labelmap, out / "masks" / f"{stem}.pgm")
            save_calibration(world.chain(s, t, c), out / "calib" / f"{stem}.ini")
    log.info("generated %d scenes x %d ticks in %s", world.data.n_scenes, world.data.ticks, out)


def cmd_slic(cfg, out: Path, args):
    world = pipeline.make_world(cfg)
    sp = cfg.superpixel
    (out / "masks").mkdir(exist_ok=True)
    with open(out / "superpixel_counts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "semantic_mask", "slic"])
        for s, t in _items(world):
            for c in range(world.data.cameras):
                name = pipeline.mask_name(s, t, c)
                lm = slic(world.view(s, t, c).image, sp.slic_segments, sp.compactness, seed=cfg.seed)
                save_labelmap(lm, out / "masks" / name)
                w.writerow([name[:-4], world.view(s, t, c).labelmap.num_segments, lm.num_segments])


def cmd_project(cfg, out: Path, args):
    world = pipeline.make_world(cfg)
    (out / "pairs").mkdir(exist_ok=True)
    with open(out / "projection.csv", "w", newline="") as fh:
        summary = csv.writer(fh, lineterminator="\n")
        summary.writerow(["image", "pairs", "superpixels", "instance_agreement"])
        for s, t in _items(world):
            cloud = world.frame(s, t)
            for c in range(world.data.cameras):
                stem = pipeline.mask_name(s, t, c)[:-4]
                pairs = build_pairs(cloud, world.chain(s, t, c), world.superpixels(s, t, c))
                u, v = pairs.pixels[:, 0], pairs.pixels[:, 1]
                inst = world.view(s, t, c).instances[v, u]
                agree = float(np.mean(inst == cloud.instances[pairs.point_index])) if len(pairs) else float("nan")
                with open(out / "pairs" / f"{stem}.csv", "w", newline="") as ph:
                    w = csv.writer(ph, lineterminator="\n")
                    w.writerow(["point", "u", "v", "superpixel"])
                    w.writerows(zip(pairs.point_index.tolist(), u.tolist(), v.tolist(), pairs.superpixels.tolist()))
                summary.writerow([stem, len(pairs), len(np.unique(pairs.superpixels)), f"{agree:.6f}"])


def cmd_cluster(cfg, out: Path, args):
    world = pipeline.make_world(cfg)
    (out / "segments").mkdir(exist_ok=True)
    with open(out / "clusters.csv", "w", newline="") as fh:
        summary = csv.writer(fh, lineterminator="\n")
        summary.writerow(["scene", "tick", "segments", "shared_segments"])
        for s, t in world.pair_items():
            seg_t, seg_tn = world.segments(s, t)
            shared = np.intersect1d(seg_t.present(), seg_tn.present())
            with open(out / "segments" / f"scene{s:03d}_t{t:03d}.csv", "w", newline="") as sh:
                w = csv.writer(sh, lineterminator="\n")
                w.writerow(["frame", "point", "segment"])
                for f, seg in enumerate((seg_t, seg_tn)):
                    w.writerows((f, i, int(g)) for i, g in enumerate(seg.ids))
            summary.writerow([s, t, seg_t.num_segments, len(shared)])


def cmd_pretrain(cfg, out: Path, args):
    res = pipeline.pretrain(cfg, out)
    final = res.log.records[-1]["loss"] if len(res.log) else float("nan")
    log.info("pretrained %d steps (%d skipped), final loss %.6f", res.steps, res.skipped, final)


def _n_features(cfg) -> int:
    return pipeline.make_world(cfg).frame(0, 0).num_features


def _model(cfg, args):
    return pipeline.load_model(args.checkpoint, cfg, _n_features(cfg))


def cmd_probe(cfg, out: Path, args):
    res = pipeline.probe(_model(cfg, args), cfg)
    write_metrics_csv(res.iou, out / "metrics.csv", synth.CLASSES)
    with open(out / "metrics.csv", "a") as fh:
        fh.write(f"# miou={res.miou:.6f}\n")


def cmd_robust(cfg, out: Path, args):
    corruptions = [args.corruption] if args.corruption is not None else pipeline.default_corruptions()
    model = _model(cfg, args)
    data = pipeline.probe_data(cfg)
    baseline = pipeline.SealModel(_n_features(cfg), cfg.model, cfg.seed)
    _, base = pipeline.corrupted_mious(baseline, cfg, corruptions, data)
    rep = pipeline.evaluate_robustness(model, cfg, corruptions, base, data)
    write_robustness_csv(rep, out / "robustness.csv")


def cmd_cosmap(cfg, out: Path, args):
    model = _model(cfg, args)
    world = pipeline.make_world(cfg)
    cloud = world.frame(0, 0)
    pairs = build_pairs(cloud, world.chain(0, 0, 0), world.superpixels(0, 0, 0))
    if not 0 <= args.query < len(pairs):
        raise UsageError(f"--query must be in 0..{len(pairs) - 1}")
    feats = model.point_features(cloud).data[pairs.point_index]
    sim = cosine_map(feats, args.query)
    img = np.zeros((world.data.height, world.data.width))
    u, v = pairs.pixels[:, 0], pairs.pixels[:, 1]
    np.maximum.at(img, (v, u), np.clip(sim, 0.0, 1.0))
    export_ppm(img, out / "cosmap.ppm")
    with open(out / "cosmap.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", "u", "v", "similarity"])
        w.writerows(zip(pairs.point_index.tolist(), u.tolist(), v.tolist(), (f"{x:.9f}" for x in sim)))


COMMANDS = {
    "gen": cmd_gen, "slic": cmd_slic, "project": cmd_project, "cluster": cmd_cluster,
    "pretrain": cmd_pretrain, "probe": cmd_probe, "robust": cmd_robust, "cosmap": cmd_cosmap,
}


# --- entry point ------------------------------------------------------------------

_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("SEAL_LOG", "error").strip().lower()
    if level not in _LEVELS:
        raise UsageError(f"SEAL_LOG must be one of {', '.join(_LEVELS)}, got {level!r}")
    root = logging.getLogger("seal")
    root.setLevel(_LEVELS[level])
    if not root.handlers:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(h)


class _Lock:
    """Single instance per output directory."""

    def __init__(self, out: Path):
        self.path = out / ".seal.lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OSError(f"{self.path.parent} is in use by another run (remove {self.path} if stale)") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        self.path.unlink(missing_ok=True)


def run(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with _Lock(out):
            COMMANDS[args.command](cfg, out, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
