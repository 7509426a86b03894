"""
Stage Tester

A script for running individual pipeline stages on a small synthetic
recording. This is primarily for development and testing purposes.
"""

import logging
import sys
from typing import Callable, Dict, Optional

import numpy as np

import cnn
import eeg_io
import spectral
import topomap

STAGES = {
    "synth": "Synthetic recording generator (eeg_io.synth_recording)",
    "epochs": "Event-centred epoch extraction (eeg_io.extract_epochs)",
    "spectral": "Hann window, FFT and band powers (spectral.epoch_band_powers)",
    "topomap": "Clough-Tocher topographic image (topomap.render_image)",
    "cnn": "One training epoch of the classifier on rendered images (cnn.train)",
}

# Small enough to run every stage in seconds.
DEMO_CONFIG = eeg_io.SynthConfig(num_classes=3, events_per_class=4, montage_size=16,
                                 event_spacing_seconds=4.0, seed=7)
DEMO_EPOCH_SECONDS = 4.0
DEMO_IMAGE_SIZE = 16


def list_available_stages():
    """List all available pipeline stages."""
    print("Available stages for testing:")
    for key, description in STAGES.items():
        print(f"  - {key}: {description}")
    print("\nUsage: python stage_tester.py <stage_name>")
    print("Example: python stage_tester.py spectral")
    print("\nNote: For full runs on real bundles, use pipeline_runner.py instead.")


def _epochs():
    return eeg_io.extract_epochs(eeg_io.synth_recording(DEMO_CONFIG), DEMO_EPOCH_SECONDS)


def _images():
    recording = eeg_io.synth_recording(DEMO_CONFIG)
    montage = topomap.project_montage(recording.electrodes)
    epochs = eeg_io.extract_epochs(recording, DEMO_EPOCH_SECONDS)
    return [topomap.render_image(montage, spectral.epoch_band_powers(e), DEMO_IMAGE_SIZE) for e in epochs]


def run_synth() -> Dict:
    recording = eeg_io.synth_recording(DEMO_CONFIG)
    return {"channels": recording.num_channels, "samples": recording.num_samples,
            "events": len(recording.events)}


def run_epochs() -> Dict:
    epochs = _epochs()
    return {"epochs": len(epochs), "epoch_shape": list(epochs[0].data.shape),
            "labels": [e.label for e in epochs]}


def run_spectral() -> Dict:
    frame = spectral.epoch_band_powers(_epochs()[0])
    strongest = frame.powers.argmax(axis=0)
    return {"label": frame.label, "electrodes": frame.num_electrodes,
            "strongest_electrode": dict(zip(("theta", "alpha", "gamma"), strongest.tolist()))}


def run_topomap() -> Dict:
    image = _images()[0]
    return {"label": image.label, "shape": list(image.pixels.shape),
            "min": float(image.pixels.min()), "max": float(image.pixels.max())}


def run_cnn() -> Dict:
    images = _images()
    data = np.stack([img.pixels for img in images])
    labels = np.array([img.label for img in images])
    config = cnn.ModelConfig(input_shape=data.shape[1:], conv_filters=[4], dense_hidden=16,
                             num_classes=DEMO_CONFIG.num_classes)
    model, history = cnn.train(cnn.init_model(config, seed=0), cnn.Dataset(data, labels), None,
                               cnn.TrainConfig(epochs=1, batch_size=4))
    return history[0]


def get_stage(stage_name: str) -> Optional[Callable[[], Dict]]:
    """Return the runner for the specified stage."""
    runners = {
        "synth": run_synth,
        "epochs": run_epochs,
        "spectral": run_spectral,
        "topomap": run_topomap,
        "cnn": run_cnn,
    }
    runner = runners.get(stage_name)
    if runner is None:
        print(f"Error: Unknown stage '{stage_name}'")
        list_available_stages()
    return runner


def run_stage(stage_name: str) -> Optional[Dict]:
    """Run one stage and print its result summary."""
    runner = get_stage(stage_name)
    if runner is None:
        return None
    print(f"Running stage: {stage_name}")
    print("-" * 50)
    result = runner()
    print("\nResult:")
    for key, value in result.items():
        print(f"  {key}: {value}")
    return result


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')

    if len(sys.argv) < 2:
        list_available_stages()
        sys.exit(0)

    if run_stage(sys.argv[1].lower()) is None:
        sys.exit(1)
