"""Command-line front end: phantom, preprocess, train, segment, refine, eval, pipeline.

Every command writes its artifacts plus a ``manifest.json`` into ``--out``.
Commands exit with status 1 when a stage fails; the manifest then carries
``"status": "failed"`` and names the failing stage.
"""

from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import plots
from .config import PipelineConfig, RunManifest, derive_seed
from .energy import tile_windows, total_energy
from .ga import refine_mask
from .imaging import (
    PhantomSpec,
    ensure_dir,
    gamma_correct,
    generate_phantom,
    intensity_window,
    load_pgm,
    median_filter,
    overlay_mask,
    random_phantom_spec,
    save_pgm,
    save_ppm,
)
from .indrnn import binarize, init_network, load_checkpoint, predict_prob_map, train
from .metrics import MetricsReport, evaluate

logger = logging.getLogger("noduleseg")


class StageError(RuntimeError):
    def __init__(self, command: str, stage: str | None, cause: BaseException):
        where = f"{command}/{stage}" if stage else command
        super().__init__(f"[{where}] {type(cause).__name__}: {cause}")
        self.command = command
        self.stage = stage


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------

def load_mask_pgm(path) -> np.ndarray:
    return (load_pgm(path) >= 0.5).astype(np.uint8)


def save_mask_pgm(mask, path) -> None:
    save_pgm(np.asarray(mask, dtype=np.float64), path, bit_depth=8)


def write_loss_csv(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(losses, start=1):
            writer.writerow([epoch, repr(float(loss))])


def write_trace_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_index", "generation", "best_energy"])
        for window, gen, energy in rows:
            writer.writerow([window, gen, repr(float(energy))])


def window_grid(rgb: np.ndarray, size: int) -> np.ndarray:
    """Draw tile boundaries in green over an RGB raster."""
    out = rgb.copy()
    for w in tile_windows(rgb.shape[:2], size):
        out[w.row, w.col:w.col + w.width] = (0.0, 1.0, 0.0)
        out[w.row:w.row + w.height, w.col] = (0.0, 1.0, 0.0)
    return out


def _pairs_in(data_dir) -> list[tuple[Path, Path]]:
    data_dir = Path(data_dir)
    images = {m.group(1): p for p in data_dir.glob("img_*.pgm")
              if (m := re.fullmatch(r"img_(\d+)\.pgm", p.name))}
    masks = {m.group(1): p for p in data_dir.glob("mask_*.pgm")
             if (m := re.fullmatch(r"mask_(\d+)\.pgm", p.name))}
    if not images and not masks:
        raise ValueError(f"no img_N.pgm / mask_N.pgm pairs in {data_dir}")
    unmatched = sorted(set(images) ^ set(masks), key=int)
    if unmatched:
        raise ValueError(f"unmatched image/mask indices in {data_dir}: {unmatched}")
    return [(images[i], masks[i]) for i in sorted(images, key=int)]


# --------------------------------------------------------------------------
# stage bodies shared by the commands and the pipeline
# --------------------------------------------------------------------------

def preprocess_stages(image, cfg: PipelineConfig):
    pre = cfg.preprocess
    median = median_filter(image, pre.median_radius)
    windowed = intensity_window(median, pre.window_level, pre.window_width)
    corrected = gamma_correct(windowed, pre.gamma)
    return median, windowed, corrected


def preprocessed(image, cfg: PipelineConfig):
    return preprocess_stages(image, cfg)[-1]


def _train_model(data_dir, cfg: PipelineConfig, manifest: RunManifest, preprocess: bool = True):
    pairs = []
    for img_path, mask_path in _pairs_in(data_dir):
        manifest.add_input(img_path)
        manifest.add_input(mask_path)
        img = load_pgm(img_path)
        pairs.append((preprocessed(img, cfg) if preprocess else img, load_mask_pgm(mask_path)))
    tcfg = cfg.resolved().model.train
    width = pairs[0][0].shape[1]
    net = init_network(tcfg.neighborhood_k ** 2, cfg.model.layer_sizes, tcfg.clip_gamma, width,
                       rng=np.random.default_rng([tcfg.seed, 0]))
    result = train(net, pairs, replace(tcfg, seed=derive_seed(tcfg.seed, "shuffle")))
    return result, tcfg


def _save_model(result, tcfg, out: Path, manifest: RunManifest, model_out=None, figures=True):
    model_path = manifest.add_output(Path(model_out) if model_out else out / "model.json")
    result.net.save(model_path, tcfg.clip_gamma, tcfg.neighborhood_k, tcfg.seed)
    loss_path = manifest.add_output(out / "loss.csv")
    write_loss_csv(result.losses, loss_path)
    if figures:
        plots.loss_curve(result.losses, manifest.add_output(out / "loss.png"))
    manifest["loss-first-epoch"] = result.losses[0]
    manifest["loss-final-epoch"] = result.losses[-1]
    return model_path


def _load_model(model_path, cfg: PipelineConfig):
    net, doc = load_checkpoint(model_path)
    k = cfg.model.train.neighborhood_k
    if doc.get("neighborhood-k", k) != k or net.input_dim != k * k:
        raise ValueError(
            f"checkpoint input dim {net.input_dim} (k={doc.get('neighborhood-k')}) "
            f"does not match config neighborhood-k={k}"
        )
    return net


def _refine(mask, probs, image, cfg: PipelineConfig, out: Path, manifest: RunManifest,
            name="refined_mask.pgm", figures=True):
    rcfg = cfg.resolved()
    before = total_energy(mask, probs, image, rcfg.energy)
    rows: list = []
    refined = refine_mask(mask, probs, image, rcfg.energy, rcfg.ga, trace=rows)
    after = total_energy(refined, probs, image, rcfg.energy)
    if after > before:
        raise RuntimeError(f"refinement increased energy: {before} -> {after}")
    manifest["energy-before"] = before
    manifest["energy-after"] = after
    manifest["energy-sigma"] = rcfg.energy.sigma_for(image)
    mask_path = manifest.add_output(out / name)
    save_mask_pgm(refined, mask_path)
    trace_path = manifest.add_output(out / "energy_trace.csv")
    write_trace_csv(rows, trace_path)
    if figures and rows:
        plots.energy_trace(rows, manifest.add_output(out / "energy_trace.png"))
    return refined


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _execute(command: str, out_dir, cfg: PipelineConfig, config_path, body) -> RunManifest:
    out = ensure_dir(out_dir)
    manifest = RunManifest(command, out, cfg, config_path)
    try:
        body(manifest, out)
    except Exception as exc:
        manifest.fail(exc)
        manifest.write()
        raise StageError(command, manifest.doc.get("failed-stage"), exc) from exc
    manifest.write()
    return manifest


def cmd_phantom(spec_file, out_dir, count: int, cfg: PipelineConfig, config_path=None,
                radius_range=None) -> RunManifest:
    if count < 0:
        raise ValueError("count must be non-negative")

    def body(manifest, out):
        with manifest.stage("phantom"):
            spec = PhantomSpec.load(spec_file)
            manifest.add_input(spec_file)
            manifest["phantom-seeds"] = []
            for i in range(count):
                seed = derive_seed(cfg.seed, f"phantom/{i}")
                this = spec
                if radius_range is not None:
                    layout_rng = np.random.default_rng(derive_seed(cfg.seed, f"phantom-layout/{i}"))
                    intensity = spec.nodules[0].intensity if spec.nodules else 0.75
                    this = random_phantom_spec(
                        layout_rng, spec.width, spec.height, tuple(radius_range), intensity,
                        spec.background_intensity, spec.gaussian_noise_sigma,
                        spec.salt_pepper_fraction,
                    )
                image, mask = generate_phantom(this, seed)
                save_pgm(image, manifest.add_output(out / f"img_{i}.pgm"))
                save_mask_pgm(mask, manifest.add_output(out / f"mask_{i}.pgm"))
                manifest["phantom-seeds"].append(seed)

    return _execute("phantom", out_dir, cfg, config_path, body)


def cmd_preprocess(image_path, out_dir, cfg: PipelineConfig, config_path=None) -> RunManifest:
    def body(manifest, out):
        with manifest.stage("preprocess"):
            manifest.add_input(image_path)
            stages = preprocess_stages(load_pgm(image_path), cfg)
            for name, img in zip(("median", "window", "gamma"), stages):
                save_pgm(img, manifest.add_output(out / f"{name}.pgm"), bit_depth=16)

    return _execute("preprocess", out_dir, cfg, config_path, body)


def cmd_train(data_dir, out_dir, cfg: PipelineConfig, config_path=None, model_out=None,
              preprocess=True, figures=True) -> RunManifest:
    def body(manifest, out):
        with manifest.stage("train"):
            result, tcfg = _train_model(data_dir, cfg, manifest, preprocess)
            _save_model(result, tcfg, out, manifest, model_out, figures)

    return _execute("train", out_dir, cfg, config_path, body)


def cmd_segment(image_path, model_path, out_dir, cfg: PipelineConfig, config_path=None,
                preprocess=True) -> RunManifest:
    def body(manifest, out):
        with manifest.stage("segment"):
            manifest.add_input(image_path)
            manifest.add_input(model_path)
            image = load_pgm(image_path)
            if preprocess:
                image = preprocessed(image, cfg)
            net = _load_model(model_path, cfg)
            probs = predict_prob_map(net, image, cfg.model.train.neighborhood_k)
            mask = binarize(probs, cfg.binarize_threshold)
            save_pgm(probs, manifest.add_output(out / "probmap.pgm"), bit_depth=16)
            save_mask_pgm(mask, manifest.add_output(out / "mask.pgm"))
            save_ppm(overlay_mask(image, mask), manifest.add_output(out / "overlay.ppm"))

    return _execute("segment", out_dir, cfg, config_path, body)


def cmd_refine(mask_path, probmap_path, image_path, out_dir, cfg: PipelineConfig,
               config_path=None, figures=True) -> RunManifest:
    def body(manifest, out):
        with manifest.stage("refine"):
            for p in (mask_path, probmap_path, image_path):
                manifest.add_input(p)
            mask = load_mask_pgm(mask_path)
            probs = load_pgm(probmap_path)
            image = load_pgm(image_path)
            _refine(mask, probs, image, cfg, out, manifest, figures=figures)

    return _execute("refine", out_dir, cfg, config_path, body)


def cmd_eval(pred_path, truth_path, out_dir, cfg: PipelineConfig, config_path=None,
             report_out=None) -> RunManifest:
    def body(manifest, out):
        with manifest.stage("eval"):
            manifest.add_input(pred_path)
            manifest.add_input(truth_path)
            report = evaluate(load_mask_pgm(pred_path), load_mask_pgm(truth_path))
            report.save(manifest.add_output(Path(report_out) if report_out else out / "metrics.json"))
            manifest["metrics"] = report.to_dict()

    return _execute("eval", out_dir, cfg, config_path, body)


def cmd_pipeline(image_path, out_dir, cfg: PipelineConfig, config_path=None, truth_path=None,
                 model_path=None, train_dir=None, figures=True) -> RunManifest:
    if (model_path is None) == (train_dir is None):
        raise ValueError("pipeline needs exactly one of a model checkpoint or a training directory")

    def body(manifest, out):
        with manifest.stage("load"):
            manifest.add_input(image_path)
            image = load_pgm(image_path)
            truth = None
            if truth_path is not None:
                manifest.add_input(truth_path)
                truth = load_mask_pgm(truth_path)
                if truth.shape != image.shape:
                    raise ValueError(f"truth {truth.shape} and image {image.shape} differ in size")
            save_pgm(image, manifest.add_output(out / "01_input.pgm"), bit_depth=16)

        with manifest.stage("preprocess"):
            median, windowed, corrected = preprocess_stages(image, cfg)
            save_pgm(median, manifest.add_output(out / "02_median.pgm"), bit_depth=16)
            save_pgm(windowed, manifest.add_output(out / "03_window.pgm"), bit_depth=16)
            save_pgm(corrected, manifest.add_output(out / "04_gamma.pgm"), bit_depth=16)

        nonlocal model_path
        if train_dir is not None:
            with manifest.stage("train"):
                result, tcfg = _train_model(train_dir, cfg, manifest)
                model_path = _save_model(result, tcfg, out, manifest, figures=figures)
        else:
            manifest.add_input(model_path)

        with manifest.stage("segment"):
            net = _load_model(model_path, cfg)
            probs = predict_prob_map(net, corrected, cfg.model.train.neighborhood_k)
            initial = binarize(probs, cfg.binarize_threshold)
            save_pgm(probs, manifest.add_output(out / "05_probmap.pgm"), bit_depth=16)
            save_mask_pgm(initial, manifest.add_output(out / "06_initial_mask.pgm"))

        with manifest.stage("refine"):
            refined = _refine(initial, probs, corrected, cfg, out, manifest,
                              name="07_refined_mask.pgm", figures=figures)
            overlay = overlay_mask(corrected, refined)
            save_ppm(window_grid(overlay, cfg.ga.window_size),
                     manifest.add_output(out / "08_windows.ppm"))
            save_ppm(overlay, manifest.add_output(out / "09_overlay.ppm"))
            save_mask_pgm(refined, manifest.add_output(out / "10_binary.pgm"))

        with manifest.stage("eval"):
            if truth is None:
                manifest.note("no ground truth supplied; evaluation skipped")
                manifest["metrics"] = None
                report = initial_report = None
            else:
                report = evaluate(refined, truth)
                initial_report = evaluate(initial, truth)
                report.save(manifest.add_output(out / "metrics.json"))
                manifest["metrics"] = report.to_dict()
                manifest["metrics-initial"] = initial_report.to_dict()

        if figures:
            with manifest.stage("figures"):
                plots.stage_montage(
                    [("input", image), ("median", median), ("window", windowed),
                     ("gamma", corrected), ("probability", probs), ("initial mask", initial),
                     ("refined mask", refined), ("windows", window_grid(overlay, cfg.ga.window_size)),
                     ("overlay", overlay)] + ([("truth", truth)] if truth is not None else []),
                    manifest.add_output(out / "stages.png"),
                )
                if report is not None:
                    plots.metrics_bars(report, manifest.add_output(out / "metrics.png"),
                                       before=initial_report)

    return _execute("pipeline", out_dir, cfg, config_path, body)


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides config)")
    parser.add_argument("--out", type=Path, default=argparse.SUPPRESS if suppress else Path("out"),
                        help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noduleseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate synthetic image/mask pairs")
    p.add_argument("spec", type=Path, help="PhantomSpec JSON")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--random-radius", type=int, nargs=2, metavar=("MIN", "MAX"),
                   help="replace the spec's nodules by one randomly placed disk per image")

    p = sub.add_parser("preprocess", parents=[common], help="median filter, window, gamma")
    p.add_argument("image", type=Path)

    p = sub.add_parser("train", parents=[common], help="train the recurrent network")
    p.add_argument("data_dir", type=Path, help="directory with img_N.pgm / mask_N.pgm")
    p.add_argument("--model-out", type=Path)
    p.add_argument("--no-preprocess", action="store_true")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("segment", parents=[common], help="probability map, mask and overlay")
    p.add_argument("image", type=Path)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--no-preprocess", action="store_true")

    p = sub.add_parser("refine", parents=[common], help="genetic refinement of a mask")
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--probmap", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="compare a mask against ground truth")
    p.add_argument("pred", type=Path)
    p.add_argument("truth", type=Path)
    p.add_argument("--report-out", type=Path)

    p = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    p.add_argument("image", type=Path)
    p.add_argument("--truth", type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", type=Path)
    src.add_argument("--train-dir", type=Path)
    p.add_argument("--no-figures", action="store_true")
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        out, cp = args.out, args.config
        if args.command == "phantom":
            cmd_phantom(args.spec, out, args.count, cfg, cp, args.random_radius)
        elif args.command == "preprocess":
            cmd_preprocess(args.image, out, cfg, cp)
        elif args.command == "train":
            cmd_train(args.data_dir, out, cfg, cp, args.model_out, not args.no_preprocess,
                      not args.no_figures)
        elif args.command == "segment":
            cmd_segment(args.image, args.model, out, cfg, cp, not args.no_preprocess)
        elif args.command == "refine":
            cmd_refine(args.mask, args.probmap, args.image, out, cfg, cp, not args.no_figures)
        elif args.command == "eval":
            cmd_eval(args.pred, args.truth, out, cfg, cp, args.report_out)
        elif args.command == "pipeline":
            cmd_pipeline(args.image, out, cfg, cp, args.truth, args.model, args.train_dir,
                         not args.no_figures)
    except Exception as exc:  # noqa: BLE001
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
