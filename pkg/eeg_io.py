"""
EEG I/O

Reading, writing and validating EEG recording bundles, event-centred epoch
extraction, and a synthetic recording generator with known band signatures.

A bundle is a directory holding header.json (montage, events, label table)
and samples.f32 (little-endian float32, channel-major).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

HEADER_FILE = "header.json"
SAMPLES_FILE = "samples.f32"

# Band tone ranges used by the generator, kept inside the analysis bands.
SYNTH_TONE_RANGES = {
    "theta": (4.5, 7.5),
    "alpha": (8.5, 11.5),
    "gamma": (14.0, 38.0),
}
SYNTH_BUMP_WIDTH = 0.35
SYNTH_MIN_CENTRE_SEPARATION = 0.8


class BundleError(ValueError):
    """Raised when a bundle or recording violates the format or its invariants."""


@dataclass(frozen=True)
class Electrode:
    name: str
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class EventMarker:
    sample_index: int
    label: int
    label_name: str = ""


@dataclass(frozen=True, eq=False)
class Recording:
    """A multichannel EEG recording with its montage and labelled events.

    Samples are stored channel-major in microvolts. They are quantised to
    float32 on construction (the on-disk precision) and widened to float64.
    """

    sample_rate_hz: float
    electrodes: Tuple[Electrode, ...]
    samples: np.ndarray
    events: Tuple[EventMarker, ...]
    label_table: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "electrodes", tuple(self.electrodes))
        object.__setattr__(self, "events", tuple(self.events))
        samples = np.asarray(self.samples, dtype=np.float32).astype(np.float64)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def validate(self) -> None:
        """Check every recording invariant, raising BundleError on the first failure."""
        if not self.sample_rate_hz > 0 or not math.isfinite(self.sample_rate_hz):
            raise BundleError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.samples.ndim != 2:
            raise BundleError(f"samples must be a channel x time matrix, got {self.samples.ndim} dims")
        if self.num_channels != len(self.electrodes):
            raise BundleError(
                f"channel count mismatch: {self.num_channels} rows for {len(self.electrodes)} electrodes"
            )
        if not np.all(np.isfinite(self.samples)):
            raise BundleError("non-finite sample")
        validate_montage(self.electrodes)
        for event in self.events:
            if not 0 <= event.sample_index < self.num_samples:
                raise BundleError(
                    f"event out of range: sample_index {event.sample_index} "
                    f"not in [0, {self.num_samples})"
                )
        known = set(self.label_table.values())
        for event in self.events:
            if event.label < 0:
                raise BundleError(f"negative event label {event.label} at sample {event.sample_index}")
            if known and event.label not in known:
                raise BundleError(
                    f"event label {event.label} at sample {event.sample_index} is not in the label table"
                )

    def label_names(self) -> Dict[int, str]:
        return {label: name for name, label in self.label_table.items()}


@dataclass(frozen=True, eq=False)
class Epoch:
    data: np.ndarray
    label: int
    source_event: EventMarker
    sample_rate_hz: float
    event_index: int = 0


def validate_montage(electrodes) -> None:
    """Names must be non-empty and unique; projected (x, y) positions pairwise distinct."""
    seen_names = set()
    seen_xy = set()
    for electrode in electrodes:
        if not electrode.name:
            raise BundleError("electrode name must be non-empty")
        if electrode.name in seen_names:
            raise BundleError(f"duplicate electrode name: {electrode.name}")
        seen_names.add(electrode.name)
        if not all(math.isfinite(float(v)) for v in (electrode.x, electrode.y, electrode.z)):
            raise BundleError(f"non-finite coordinate for electrode {electrode.name}")
        xy = (float(electrode.x), float(electrode.y))
        if xy in seen_xy:
            raise BundleError(f"duplicate projected position for electrode {electrode.name}: {xy}")
        seen_xy.add(xy)


# header.json schema

class ChannelEntry(BaseModel):
    name: str
    x: float
    y: float
    z: float


class EventEntry(BaseModel):
    sample_index: int
    label: int


class BundleHeader(BaseModel):
    sample_rate_hz: float = Field(gt=0)
    channels: List[ChannelEntry]
    num_samples: int = Field(ge=0)
    label_table: Dict[str, int] = Field(default_factory=dict)
    events: List[EventEntry] = Field(default_factory=list)


def read_bundle(path) -> Recording:
    """
    Read a recording bundle from a directory.

    Args:
        path: Bundle directory containing header.json and samples.f32

    Returns:
        The validated Recording
    """
    bundle_dir = Path(path)
    header_path = bundle_dir / HEADER_FILE
    samples_path = bundle_dir / SAMPLES_FILE
    for required in (header_path, samples_path):
        if not required.is_file():
            raise BundleError(f"missing file: {required}")

    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header = BundleHeader.model_validate(json.load(f))
    except (json.JSONDecodeError, ValueError) as e:
        raise BundleError(f"malformed header {header_path}: {str(e)}") from e

    num_channels = len(header.channels)
    expected_bytes = num_channels * header.num_samples * 4
    actual_bytes = samples_path.stat().st_size
    if actual_bytes != expected_bytes:
        raise BundleError(
            f"sample count mismatch: {samples_path} has {actual_bytes} bytes, "
            f"header implies {expected_bytes}"
        )

    raw = np.fromfile(samples_path, dtype="<f4")
    samples = raw.reshape(num_channels, header.num_samples)
    names = {label: name for name, label in header.label_table.items()}

    recording = Recording(
        sample_rate_hz=header.sample_rate_hz,
        electrodes=[Electrode(c.name, c.x, c.y, c.z) for c in header.channels],
        samples=samples,
        events=[EventMarker(e.sample_index, e.label, names.get(e.label, "")) for e in header.events],
        label_table=dict(header.label_table),
    )
    recording.validate()
    logging.info(
        f"Read bundle {bundle_dir}: {recording.num_channels} channels, "
        f"{recording.num_samples} samples, {len(recording.events)} events"
    )
    return recording


def write_bundle(rec: Recording, path) -> None:
    """
    Write a recording as a bundle directory. The recording is validated first,
    so nothing is written for an invalid recording.

    Args:
        rec: Recording to write
        path: Target directory (created if missing)
    """
    rec.validate()
    bundle_dir = Path(path)
    header = BundleHeader(
        sample_rate_hz=rec.sample_rate_hz,
        channels=[ChannelEntry(name=e.name, x=e.x, y=e.y, z=e.z) for e in rec.electrodes],
        num_samples=rec.num_samples,
        label_table=dict(rec.label_table),
        events=[EventEntry(sample_index=e.sample_index, label=e.label) for e in rec.events],
    )
    try:
        bundle_dir.mkdir(parents=True, exist_ok=True)
        with open(bundle_dir / HEADER_FILE, "w", encoding="utf-8") as f:
            json.dump(header.model_dump(), f, indent=2, ensure_ascii=False)
        rec.samples.astype("<f4").tofile(bundle_dir / SAMPLES_FILE)
    except OSError as e:
        logging.error(f"Error writing bundle {bundle_dir}: {str(e)}")
        raise
    logging.info(f"Wrote bundle {bundle_dir}: {rec.num_channels} channels, {len(rec.events)} events")


def epoch_length(epoch_seconds: float, sample_rate_hz: float) -> int:
    return int(round(epoch_seconds * sample_rate_hz))


def extract_epochs(rec: Recording, epoch_seconds: float) -> List[Epoch]:
    """
    Cut one raw epoch of length L = round(epoch_seconds * fs) around each event.

    The window is [c - L//2, c - L//2 + L). Events whose window does not fit
    inside the recording are skipped and the count is logged.

    Args:
        rec: Source recording
        epoch_seconds: Epoch width in seconds

    Returns:
        Epochs in event order
    """
    if not epoch_seconds > 0:
        raise BundleError(f"epoch_seconds must be positive, got {epoch_seconds}")
    length = epoch_length(epoch_seconds, rec.sample_rate_hz)
    if length < 1:
        raise BundleError(f"epoch of {epoch_seconds}s at {rec.sample_rate_hz} Hz has no samples")

    epochs = []
    for index, event in enumerate(rec.events):
        start = event.sample_index - length // 2
        stop = start + length
        if start < 0 or stop > rec.num_samples:
            continue
        data = rec.samples[:, start:stop]
        epochs.append(Epoch(data=data, label=event.label, source_event=event,
                            sample_rate_hz=rec.sample_rate_hz, event_index=index))

    skipped = len(rec.events) - len(epochs)
    if skipped:
        logging.warning(f"Skipped {skipped} of {len(rec.events)} events too close to the recording edges")
    return epochs


# Synthetic recordings

class SynthConfig(BaseModel):
    num_classes: int = Field(default=15, ge=2)
    events_per_class: int = Field(default=10, ge=1)
    sample_rate_hz: float = Field(default=128.0, gt=0)
    montage_size: int = Field(default=32, ge=8)
    seed: int = 0
    subject: int = Field(default=0, ge=0)
    event_spacing_seconds: float = Field(default=20.0, gt=0)
    tone_amplitude_uv: float = Field(default=10.0, gt=0)
    noise_std_uv: float = Field(default=1.0, ge=0)

    @field_validator("sample_rate_hz")
    @classmethod
    def _nyquist_covers_tones(cls, value: float) -> float:
        top = max(hi for _, hi in SYNTH_TONE_RANGES.values())
        if value <= 2 * top:
            raise ValueError(f"sample rate {value} Hz cannot carry tones up to {top} Hz")
        return value

    @model_validator(mode="after")
    def _spacing_has_samples(self):
        if epoch_length(self.event_spacing_seconds, self.sample_rate_hz) < 2:
            raise ValueError("event spacing is shorter than two samples")
        return self


@dataclass(frozen=True)
class BandTone:
    band: str
    frequency_hz: float
    weights: np.ndarray


def hemisphere_montage(n: int) -> List[Electrode]:
    """Place n electrodes on the upper unit hemisphere along a golden-angle spiral.

    Every electrode has a distinct radius in the (x, y) plane, so projected
    positions never collide.
    """
    golden_angle = math.pi * (3.0 - math.sqrt(5.0))
    electrodes = []
    for i in range(n):
        z = 1.0 - (i + 0.5) / n
        r = math.sqrt(max(0.0, 1.0 - z * z))
        theta = i * golden_angle
        electrodes.append(Electrode(f"E{i + 1:02d}", r * math.cos(theta), r * math.sin(theta), z))
    return electrodes


def _pick_band_centres(points: np.ndarray, rng: np.random.Generator, attempts: int = 64) -> List[int]:
    for _ in range(attempts):
        order = rng.permutation(len(points))
        centres = [int(order[0])]
        for candidate in order[1:]:
            distances = np.linalg.norm(points[centres] - points[candidate], axis=1)
            if np.all(distances >= SYNTH_MIN_CENTRE_SEPARATION):
                centres.append(int(candidate))
                if len(centres) == len(SYNTH_TONE_RANGES):
                    return centres
    raise BundleError("montage too small to separate band centres")


def class_signatures(config: SynthConfig) -> List[List[BandTone]]:
    """Per-class band tones: one tone per band with a Gaussian spatial weight map.

    Signatures depend on the seed and montage only, so every subject of one
    synthetic study shares them.
    """
    electrodes = hemisphere_montage(config.montage_size)
    points = np.array([[e.x, e.y, e.z] for e in electrodes])
    rng = np.random.default_rng([config.seed, 0x51])

    signatures = []
    for _ in range(config.num_classes):
        centres = _pick_band_centres(points, rng)
        tones = []
        for band, centre in zip(SYNTH_TONE_RANGES, centres):
            lo, hi = SYNTH_TONE_RANGES[band]
            distance_sq = np.sum((points - points[centre]) ** 2, axis=1)
            weights = np.exp(-distance_sq / (2 * SYNTH_BUMP_WIDTH ** 2))
            tones.append(BandTone(band, float(rng.uniform(lo, hi)), weights))
        signatures.append(tones)
    return signatures


def synth_recording(config: SynthConfig) -> Recording:
    """
    Generate a deterministic synthetic recording for one subject.

    Events are evenly spaced, one per event_spacing_seconds, with labels
    balanced over classes in a seeded random order. Around each event the
    class's band tones are mixed into every channel by its weight maps, on
    top of white Gaussian noise.

    Args:
        config: Generator configuration

    Returns:
        The synthetic Recording
    """
    electrodes = hemisphere_montage(config.montage_size)
    signatures = class_signatures(config)
    rng = np.random.default_rng([config.seed, config.subject, 0xEE6])

    spacing = epoch_length(config.event_spacing_seconds, config.sample_rate_hz)
    labels = rng.permutation(np.repeat(np.arange(config.num_classes), config.events_per_class))
    num_samples = spacing * len(labels)
    samples = rng.normal(0.0, config.noise_std_uv, size=(len(electrodes), num_samples))
    t = np.arange(spacing) / config.sample_rate_hz

    events = []
    label_table = {f"class_{k:02d}": k for k in range(config.num_classes)}
    for i, label in enumerate(labels):
        segment = slice(i * spacing, (i + 1) * spacing)
        for tone in signatures[label]:
            phase = rng.uniform(0.0, 2 * math.pi)
            gain = config.tone_amplitude_uv * rng.uniform(0.9, 1.1)
            wave = gain * np.sin(2 * math.pi * tone.frequency_hz * t + phase)
            samples[:, segment] += np.outer(tone.weights, wave)
        events.append(EventMarker(i * spacing + spacing // 2, int(label), f"class_{label:02d}"))

    recording = Recording(
        sample_rate_hz=config.sample_rate_hz,
        electrodes=electrodes,
        samples=samples,
        events=events,
        label_table=label_table,
    )
    recording.validate()
    return recording
