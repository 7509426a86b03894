"""
Pipeline Runner

Batch command-line front end for the EEG emotion pipeline:

  synth    write synthetic subject bundles
  images   epoch bundles, compute band powers, render topographic images
  train    train the convolutional classifier on an image dataset
  eval     score a checkpoint on an image dataset
  predict  per-image class probabilities as JSON lines

Image rendering runs on a fixed-size worker pool; results are collected in
(bundle, event) order, so outputs do not depend on the worker count.
"""

import argparse
import asyncio
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ValidationError

import cnn
import eeg_io
import spectral
import topomap

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_IO = 3

RULE = "=" * 80


class UsageError(Exception):
    """Invalid command-line flags."""


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any]
    seed: Optional[int] = None
    inputs: List[str]
    outputs: List[str]
    wall_time_s: float
    workers: int = 1
    epochs_generated: int = 0
    epochs_skipped: int = 0


class PipelineArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def banner(title: str) -> None:
    # stderr, so predict can stream JSON lines on stdout
    print(f"\n{RULE}\n{title}\n{RULE}", file=sys.stderr)


def print_usage() -> None:
    """Print usage information for the script."""
    print("\nUsage:", file=sys.stderr)
    print("  python pipeline_runner.py <synth|images|train|eval|predict> [flags]", file=sys.stderr)
    print("\nExamples:", file=sys.stderr)
    print("  python pipeline_runner.py synth --subjects 2 --classes 3 --events-per-class 20 --out data/",
          file=sys.stderr)
    print("  python pipeline_runner.py images --bundle data/subject_00 --bundle data/subject_01 "
          "--out images.ten1 --labels images.lbl1", file=sys.stderr)
    print("  python pipeline_runner.py train --data images.ten1 --labels images.lbl1 "
          "--out model.ckpt --metrics metrics.json", file=sys.stderr)
    print("\nRun with <command> --help for every flag.", file=sys.stderr)


def configure_logging(verbose: bool = False) -> None:
    level = "DEBUG" if verbose else os.getenv("NIF_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )


def default_workers() -> int:
    value = os.getenv("NIF_WORKERS", "1")
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"NIF_WORKERS must be an integer, got {value!r}")


def parse_split(text: str) -> Tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in text.split("/"))
    except ValueError:
        raise UsageError(f"invalid --split {text!r}: expected three fractions like 0.7/0.15/0.15")
    if len(parts) != 3:
        raise UsageError(f"invalid --split {text!r}: expected three fractions, got {len(parts)}")
    try:
        return cnn.TrainConfig(split_fractions=parts).split_fractions
    except ValidationError as e:
        raise UsageError(f"invalid --split {text!r}: {e.errors()[0]['msg']}")


def write_manifest(manifest: RunManifest, path) -> None:
    """Write the manifest atomically: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest.model_dump(), f, indent=2)
    os.replace(tmp, path)
    logging.info(f"Wrote run manifest {path}")


def write_json(data: Dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)


def _flags(args) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k != "handler"}


# synth

def cmd_synth(args) -> Path:
    """Write one synthetic bundle per subject into --out."""
    started = time.perf_counter()
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise UsageError(f"output directory {out_dir} is not empty (use --force)")
    if args.subjects < 1:
        raise UsageError("--subjects must be at least 1")

    outputs = []
    for subject in range(args.subjects):
        try:
            config = eeg_io.SynthConfig(
                num_classes=args.classes,
                events_per_class=args.events_per_class,
                sample_rate_hz=args.sample_rate,
                montage_size=args.channels,
                seed=args.seed,
                subject=subject,
                event_spacing_seconds=args.event_spacing,
            )
        except ValidationError as e:
            raise UsageError(f"invalid synth flags: {e.errors()[0]['msg']}")
        bundle_dir = out_dir / f"subject_{subject:02d}"
        eeg_io.write_bundle(eeg_io.synth_recording(config), bundle_dir)
        outputs.append(str(bundle_dir))

    write_manifest(RunManifest(
        command="synth", config=_flags(args), seed=args.seed, inputs=[], outputs=outputs,
        wall_time_s=time.perf_counter() - started,
    ), args.manifest or out_dir / "manifest.json")
    print(f"Wrote {len(outputs)} bundles to {out_dir}", file=sys.stderr)
    return out_dir


# images

def render_epoch(montage: topomap.Montage2D, epoch: eeg_io.Epoch, size: int) -> topomap.TopoImage:
    return topomap.render_image(montage, spectral.epoch_band_powers(epoch), size)


async def render_epochs(montage, epochs, size: int, workers: int) -> List[topomap.TopoImage]:
    """Render epochs on a fixed-size pool; results come back in input order."""
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        tasks = [loop.run_in_executor(pool, render_epoch, montage, epoch, size) for epoch in epochs]
        return await asyncio.gather(*tasks)


def cmd_images(args) -> Path:
    """Turn every bundle's events into images and write one TEN1/LBL1 dataset."""
    started = time.perf_counter()
    workers = args.workers if args.workers is not None else default_workers()
    if workers < 1:
        raise UsageError("--workers must be at least 1")
    if args.size < 4:
        raise UsageError("--size must be at least 4")

    images, groups, names = [], [], []
    generated = skipped = 0
    for group, bundle in enumerate(args.bundle):
        recording = eeg_io.read_bundle(bundle)
        minimum_rate = 2 * spectral.DEFAULT_BANDS.upper_edge
        if recording.sample_rate_hz < minimum_rate:
            raise spectral.SpectralError(
                f"{bundle}: sample rate {recording.sample_rate_hz} Hz is below {minimum_rate} Hz"
            )
        montage = topomap.project_montage(recording.electrodes)
        montage.grid(args.size)
        epochs = eeg_io.extract_epochs(recording, args.epoch_seconds)
        skipped += len(recording.events) - len(epochs)
        generated += len(epochs)

        logging.info(f"Rendering {len(epochs)} epochs from {bundle} on {workers} workers")
        rendered = asyncio.run(render_epochs(montage, epochs, args.size, workers))
        images.extend(rendered)
        groups.extend([group] * len(rendered))
        names.extend(f"{Path(bundle).name}_{epoch.event_index}" for epoch in epochs)

    if not images:
        raise topomap.TopomapError("no epochs fit inside the recordings; nothing to export")
    topomap.export_tensor(images, args.out, args.labels)
    outputs = [str(args.out), str(args.labels)]
    if args.groups:
        topomap.write_lbl1(args.groups, groups)
        outputs.append(str(args.groups))
    if args.png_dir:
        png_dir = Path(args.png_dir)
        png_dir.mkdir(parents=True, exist_ok=True)
        for image, name in zip(images, names):
            topomap.export_png(image, png_dir / f"{name}.png")
        outputs.append(str(png_dir))

    write_manifest(RunManifest(
        command="images", config=_flags(args), inputs=[str(b) for b in args.bundle], outputs=outputs,
        wall_time_s=time.perf_counter() - started, workers=workers,
        epochs_generated=generated, epochs_skipped=skipped,
    ), args.manifest or f"{args.out}.manifest.json")
    print(f"Rendered {generated} images ({skipped} edge events skipped) into {args.out}", file=sys.stderr)
    return Path(args.out)


# train / eval / predict

def cmd_train(args) -> Path:
    """Split, train, test and save a checkpoint plus metrics JSON."""
    started = time.perf_counter()
    fractions = parse_split(args.split)
    try:
        cfg = cnn.TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                              seed=args.seed, split_fractions=fractions)
    except ValidationError as e:
        raise UsageError(f"invalid training flags: {e.errors()[0]['msg']}")

    data, labels = topomap.import_tensor(args.data, args.labels)
    if len(labels) == 0:
        raise cnn.ModelError("cannot train on an empty dataset")
    if args.split_mode == "subject":
        if not args.groups:
            raise UsageError("--split-mode subject needs --groups")
        train_set, val_set, test_set = cnn.split_by_group(
            data, labels, topomap.read_lbl1(args.groups), fractions, args.seed)
    else:
        train_set, val_set, test_set = cnn.split_dataset(data, labels, fractions, args.seed)
    logging.info(f"Split sizes: train {len(train_set.labels)}, val {len(val_set.labels)}, "
                 f"test {len(test_set.labels)}")

    config = cnn.ModelConfig(input_shape=data.shape[1:], num_classes=max(2, int(labels.max()) + 1))
    model = cnn.init_model(config, args.seed)
    model, history = cnn.train(model, train_set, val_set, cfg)

    test = cnn.evaluate(model, test_set.images, test_set.labels) if len(test_set.labels) else None
    metrics = {
        "history": history,
        "test": test.to_dict() if test else None,
        "num_classes": config.num_classes,
        "split_sizes": {"train": len(train_set.labels), "val": len(val_set.labels),
                        "test": len(test_set.labels)},
    }
    cnn.save_checkpoint(model, args.out)
    write_json(metrics, args.metrics)

    write_manifest(RunManifest(
        command="train", config=_flags(args), seed=args.seed,
        inputs=[str(args.data), str(args.labels)], outputs=[str(args.out), str(args.metrics)],
        wall_time_s=time.perf_counter() - started,
    ), args.manifest or f"{args.out}.manifest.json")
    if test:
        print(f"Test accuracy: {test.accuracy:.4f}", file=sys.stderr)
    return Path(args.out)


def cmd_eval(args) -> Dict:
    """Evaluate a checkpoint; print and write accuracy, loss and confusion."""
    started = time.perf_counter()
    model = cnn.load_checkpoint(args.model)
    data, labels = topomap.import_tensor(args.data, args.labels)
    if len(labels) == 0:
        raise cnn.ModelError("cannot evaluate on an empty dataset")
    if labels.max() >= model.config.num_classes:
        raise cnn.ShapeMismatchError(
            f"labels reach class {labels.max()} but the checkpoint has {model.config.num_classes} classes"
        )
    results = cnn.evaluate(model, data, labels).to_dict()

    out = args.out or f"{args.model}.eval.json"
    write_json(results, out)
    print(json.dumps(results, indent=2))
    write_manifest(RunManifest(
        command="eval", config=_flags(args), inputs=[str(args.model), str(args.data), str(args.labels)],
        outputs=[str(out)], wall_time_s=time.perf_counter() - started,
    ), args.manifest or f"{out}.manifest.json")
    return results


def cmd_predict(args) -> int:
    """Write one JSON line {index, probs, argmax} per image."""
    started = time.perf_counter()
    model = cnn.load_checkpoint(args.model)
    data = topomap.read_ten1(args.data)
    probs = cnn.predict_proba(model, data)

    lines = [json.dumps({"index": i, "probs": row.tolist(), "argmax": int(row.argmax())})
             for i, row in enumerate(probs)]
    if args.out and args.out != "-":
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("".join(line + "\n" for line in lines))
        primary = args.out
    else:
        sys.stdout.write("".join(line + "\n" for line in lines))
        primary = f"{args.data}.predict"

    write_manifest(RunManifest(
        command="predict", config=_flags(args), inputs=[str(args.model), str(args.data)],
        outputs=[str(args.out or "-")], wall_time_s=time.perf_counter() - started,
    ), args.manifest or f"{primary}.manifest.json")
    return len(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = PipelineArgumentParser(prog="pipeline_runner.py", description=__doc__,
                                    formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=PipelineArgumentParser)

    synth = commands.add_parser("synth", help="write synthetic subject bundles")
    synth.add_argument("--subjects", type=int, default=2)
    synth.add_argument("--classes", type=int, default=15)
    synth.add_argument("--events-per-class", type=int, default=10)
    synth.add_argument("--sample-rate", type=float, default=128.0)
    synth.add_argument("--channels", type=int, default=32)
    synth.add_argument("--event-spacing", type=float, default=20.0,
                       help="seconds between events (and per-event signal length)")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)
    synth.add_argument("--force", action="store_true", help="write into a non-empty directory")
    synth.add_argument("--manifest")
    synth.set_defaults(handler=cmd_synth)

    images = commands.add_parser("images", help="render topographic image datasets")
    images.add_argument("--bundle", action="append", required=True, help="bundle directory (repeatable)")
    images.add_argument("--epoch-seconds", type=float, default=20.0)
    images.add_argument("--size", type=int, default=topomap.DEFAULT_IMAGE_SIZE)
    images.add_argument("--workers", type=int, help="worker count (default: NIF_WORKERS or 1)")
    images.add_argument("--out", required=True, help="TEN1 image tensor")
    images.add_argument("--labels", required=True, help="LBL1 label file")
    images.add_argument("--groups", help="LBL1 file of per-image subject (bundle) indices")
    images.add_argument("--png-dir")
    images.add_argument("--manifest")
    images.set_defaults(handler=cmd_images)

    train = commands.add_parser("train", help="train the classifier")
    train.add_argument("--data", required=True)
    train.add_argument("--labels", required=True)
    train.add_argument("--split", default="0.7/0.15/0.15")
    train.add_argument("--split-mode", choices=["random", "subject"], default="random")
    train.add_argument("--groups", help="LBL1 subject ids for --split-mode subject")
    train.add_argument("--epochs", type=int, default=20)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--batch", type=int, default=32)
    train.add_argument("--out", required=True, help="checkpoint path")
    train.add_argument("--metrics", required=True, help="metrics JSON path")
    train.add_argument("--manifest")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--labels", required=True)
    evaluate.add_argument("--out", help="metrics JSON path (default: <model>.eval.json)")
    evaluate.add_argument("--manifest")
    evaluate.set_defaults(handler=cmd_eval)

    predict = commands.add_parser("predict", help="per-image class probabilities")
    predict.add_argument("--model", required=True)
    predict.add_argument("--data", required=True)
    predict.add_argument("--out", help="JSON lines path (default: stdout)")
    predict.add_argument("--manifest")
    predict.set_defaults(handler=cmd_predict)
    return parser


def main(argv=None) -> int:
    """Run one command and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.verbose)
        banner(f"RUNNING {args.command.upper()}")
        args.handler(args)
        banner(f"{args.command.upper()} COMPLETED")
        return EXIT_OK
    except UsageError as e:
        banner("USAGE ERROR")
        print(f"\nError: {str(e)}", file=sys.stderr)
        print_usage()
        return EXIT_USAGE
    except OSError as e:
        banner("I/O ERROR")
        logging.error(f"I/O failure: {str(e)}")
        print(f"\nError: {str(e)}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError, RuntimeError) as e:
        # RuntimeError covers scipy's QhullError
        banner("DATA ERROR")
        logging.error(f"Validation failure: {str(e)}")
        print(f"\nError: {str(e)}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    try:
        sys.exit(main(sys.argv[1:]))
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.")
        sys.exit(1)
