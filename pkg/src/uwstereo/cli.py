"""Command-line front end.

Subcommands cover the full workflow: dataset augmentation, the three
training stages, matching, texture restoration, 3D export and the
condition-grid evaluation. Exit codes: 0 ok, 1 usage/config error,
2 data error, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pfm
from .bubbles import build_transfer_dataset
from .calibration import CalibrationError, load_camera_json, rectify_pair
from .cloud import estimate_normals, remove_outliers, save_ply, triangulate
from .config import (ConfigError, PipelineConfig, apply_overrides, load_config,
                     save_config)
from .data import DataError, load_dataset, load_frame, load_image, save_image
from .matching import MatcherNet, train_matcher
from .nn import GradientError
from .restoration import (DetectNet, RestoreNet, match_gain_bias, train_detector,
                          train_restore_supervised, train_unsupervised)
from .report import run_grid
from .segmentation import SegNet, train_segmenter
from .stereo import match_descriptors
from .utils import to_uint8

logger = logging.getLogger("uwstereo")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    apply_overrides(cfg, args.set or [])
    return cfg.validate()


def _write_loss_csv(path, history):
    rows = ["step,loss"]
    for i, v in enumerate(history):
        v = v[0] if isinstance(v, tuple) else v
        rows.append(f"{i},{v:.8f}")
    Path(path).write_text("\n".join(rows) + "\n")


def _paired_images(directory, prefix_a, prefix_b):
    directory = Path(directory)
    pairs = []
    for pa in sorted(directory.glob(f"{prefix_a}*.png")):
        pb = directory / pa.name.replace(prefix_a, prefix_b, 1)
        if not pb.exists():
            raise DataError(f"missing counterpart {pb} for {pa}")
        pairs.append((load_image(pa), load_image(pb)))
    if not pairs:
        raise DataError(f"no {prefix_a}*.png files under {directory}")
    return pairs


# -- subcommand handlers -----------------------------------------------------


def cmd_augment(args):
    cfg = _load_cfg(args)
    frames = load_dataset(args.dataset or cfg.paths.dataset)
    fluct = None
    if cfg.fluctuation.amplitude > 0:
        fluct = {"amplitude": cfg.fluctuation.amplitude,
                 "wavelength": cfg.fluctuation.wavelength}
    manifest = build_transfer_dataset(frames, args.out, cfg.conditions,
                                      seed=cfg.seed, cfg=cfg.bubbles,
                                      fluctuation=fluct)
    print(manifest)
    return EXIT_OK


def cmd_train_seg(args):
    cfg = _load_cfg(args)
    pairs = _paired_images(args.samples, "image_", "mask_")
    samples = [(img, mask > 127) for img, mask in pairs]
    segnet = SegNet(cfg.segmenter)
    aug = cfg.segmenter_augment if not args.no_augment else None
    history = train_segmenter(segnet, samples, cfg.segmenter_train, aug)
    segnet.save(args.out)
    _write_loss_csv(Path(args.out).with_suffix(".loss.csv"), history)
    print(args.out)
    return EXIT_OK


def cmd_train_stereo(args):
    cfg = _load_cfg(args)
    if args.init:
        matcher = MatcherNet.load(args.init)
    else:
        matcher = MatcherNet(cfg.matcher)
    frames = load_dataset(args.dataset or cfg.paths.dataset)
    history = train_matcher(matcher, frames, cfg.matcher_train)
    matcher.save(args.out)
    _write_loss_csv(Path(args.out).with_suffix(".loss.csv"), history.loss)
    print(args.out)
    return EXIT_OK


def cmd_train_texture(args):
    cfg = _load_cfg(args)
    pairs = [(a, b) for a, b in _paired_images(args.pairs, "in_", "gt_")]
    if args.detector:
        diff_pairs = [(a, (a.astype(np.float32) - match_gain_bias(a, b) * 255.0)
                       / 255.0) for a, b in pairs]
        net = DetectNet(cfg.restore)
        history = train_detector(net, diff_pairs, cfg.restore_train)
    else:
        fitted = [(a, match_gain_bias(a, b)) for a, b in pairs]
        net = RestoreNet(cfg.restore)
        history = train_restore_supervised(net, fitted, cfg.restore_train)
        if args.unsupervised:
            detector = DetectNet.load(args.unsupervised_detector or cfg.paths.detector)
            images = [load_image(p) for p in sorted(Path(args.unsupervised).glob("*.png"))]
            if not images:
                raise DataError(f"no unsupervised images under {args.unsupervised}")
            history += [h[0] for h in train_unsupervised(
                net, detector, images, lam=args.lam, tcfg=cfg.restore_train)]
    net.save(args.out)
    _write_loss_csv(Path(args.out).with_suffix(".loss.csv"), history)
    print(args.out)
    return EXIT_OK


def cmd_match(args):
    cfg = _load_cfg(args)
    frame = load_frame(args.frame)
    matcher = MatcherNet.load(args.matcher or cfg.paths.matcher)
    if args.calibration or cfg.paths.calibration:
        model = load_camera_json(args.calibration or cfg.paths.calibration)
        rect, _ = rectify_pair(model, frame.left, frame.right,
                               args.depth_hint or model.anchors[0].depth)
        frame.left, frame.right = rect.left, rect.right
    if frame.mask_left is None and (args.segmenter or cfg.paths.segmenter):
        segnet = SegNet.load(args.segmenter or cfg.paths.segmenter)
        frame.mask_left = segnet.mask(frame.left)
        frame.mask_right = segnet.mask(frame.right)
    ml, mr = frame.full_masks()
    dl = matcher.describe_map(frame.left)
    dr = matcher.describe_map(frame.right)
    result = match_descriptors(dl, dr, ml, mr, cfg.stereo)
    if not np.isfinite(result.disp).any():
        raise GradientError("matching produced no valid disparities")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pfm.write_pfm(out / "disp0.pfm", result.disp)
    print(out / "disp0.pfm")
    return EXIT_OK


def cmd_restore(args):
    cfg = _load_cfg(args)
    net = RestoreNet.load(args.restorer or cfg.paths.restorer)
    image = load_image(args.image)
    save_image(args.out, to_uint8(net.restore(image)))
    print(args.out)
    return EXIT_OK


def cmd_reconstruct(args):
    cfg = _load_cfg(args)
    model = load_camera_json(args.calibration or cfg.paths.calibration)
    disp = pfm.read_pfm(args.disp)
    image = load_image(args.image) if args.image else None
    cloud = triangulate(disp, model, image=image, depth_hint=args.depth_hint)
    if len(cloud) == 0:
        raise DataError("no valid disparities to triangulate")
    cloud = remove_outliers(cloud, k=args.knn, sigma=args.sigma)
    cloud = estimate_normals(cloud, k=args.knn)
    save_ply(args.out, cloud)
    print(args.out)
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_cfg(args)
    frames = load_dataset(args.dataset or cfg.paths.dataset)
    matchers = {}
    for spec in args.matcher:
        if "=" in spec:
            name, path = spec.split("=", 1)
        else:
            name, path = Path(spec).stem, spec
        matchers[name] = MatcherNet.load(path)
    if not matchers:
        raise ConfigError("at least one --matcher required")
    conditions = cfg.conditions if args.grid else ["clean"]
    report = run_grid(frames, matchers, cfg, args.out, conditions=conditions,
                      workers=args.workers)
    for metric in ("rmse", "bad_ratio"):
        print(f"[{metric}]")
        table = report.table(metric)
        for name in report.methods:
            cells = " ".join(f"{table[name][c]:.4f}" for c in report.conditions)
            print(f"  {name}: {cells}")
    print(Path(args.out) / "report.json")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="uwstereo",
        description="Bubble-robust underwater dense stereo pipeline")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override a config field, e.g. stereo.d_max=128")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("augment", help="build the bubble transfer dataset")
    sp.add_argument("--dataset", help="clean dataset dir or manifest")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_augment)

    sp = sub.add_parser("train-seg", help="train the target segmenter")
    sp.add_argument("--samples", required=True,
                    help="directory of image_*.png / mask_*.png pairs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-augment", action="store_true")
    sp.set_defaults(fn=cmd_train_seg)

    sp = sub.add_parser("train-stereo", help="train the patch matcher")
    sp.add_argument("--dataset", help="dataset with ground-truth disparity")
    sp.add_argument("--init", help="checkpoint to resume from (transfer stage)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train_stereo)

    sp = sub.add_parser("train-texture", help="train texture recovery nets")
    sp.add_argument("--pairs", required=True,
                    help="directory of in_*.png / gt_*.png pairs")
    sp.add_argument("--detector", action="store_true",
                    help="train the degradation detector instead of the restorer")
    sp.add_argument("--unsupervised", help="directory of unlabeled images for "
                                           "detector-regularized refinement")
    sp.add_argument("--unsupervised-detector", help="detector checkpoint")
    sp.add_argument("--lam", type=float, default=1.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train_texture)

    sp = sub.add_parser("match", help="dense disparity for one frame directory")
    sp.add_argument("--frame", required=True)
    sp.add_argument("--matcher")
    sp.add_argument("--segmenter")
    sp.add_argument("--calibration")
    sp.add_argument("--depth-hint", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_match)

    sp = sub.add_parser("restore", help="remove pattern/bubbles from an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--restorer")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_restore)

    sp = sub.add_parser("reconstruct", help="disparity map -> PLY point cloud")
    sp.add_argument("--disp", required=True)
    sp.add_argument("--image")
    sp.add_argument("--calibration")
    sp.add_argument("--depth-hint", type=float)
    sp.add_argument("--knn", type=int, default=16)
    sp.add_argument("--sigma", type=float, default=2.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_reconstruct)

    sp = sub.add_parser("eval", help="condition-grid evaluation report")
    sp.add_argument("--dataset")
    sp.add_argument("--matcher", action="append", default=[],
                    metavar="NAME=CKPT", help="matcher checkpoint (repeatable)")
    sp.add_argument("--grid", action="store_true",
                    help="evaluate all configured conditions, not just clean")
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        logger.error("config: %s", e)
        return EXIT_CONFIG
    except (DataError, pfm.PfmError, CalibrationError, FileNotFoundError) as e:
        logger.error("data: %s", e)
        return EXIT_DATA
    except (GradientError, FloatingPointError) as e:
        logger.error("numerical: %s", e)
        return EXIT_NUMERIC
    except ValueError as e:
        logger.error("%s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
