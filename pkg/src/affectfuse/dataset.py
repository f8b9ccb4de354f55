"""Trial records, the on-disk manifest/blob format, and synthetic datasets.

A dataset on disk is a JSON manifest plus raw little-endian float32 blobs in
channel-major order (shape ``C x T``, C varying slowest).  Manifest paths are
resolved relative to the manifest file.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import LoadError, StructuralError, ValidationError

SAMPLE_RATE = 128
WINDOW_LEN = 128

# Subjects dropped from the AMIGOS short-video recordings (invalid data).
AMIGOS_EXCLUDED_SUBJECTS = frozenset({9, 12, 21, 22, 23, 24, 33})

DEAP_EEG_CHANNELS = (
    "Fp1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3",
    "P7", "PO3", "O1", "Oz", "Pz", "Fp2", "AF4", "Fz", "F4", "F8", "FC6",
    "FC2", "Cz", "C4", "T8", "CP6", "CP2", "P4", "P8", "PO4", "O2",
)
DEAP_PERIPHERAL_CHANNELS = (
    "hEOG", "vEOG", "zEMG", "tEMG", "GSR", "Resp", "Pleth", "Temp",
)
AMIGOS_EEG_CHANNELS = (
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6",
    "F4", "F8", "AF4",
)
AMIGOS_PERIPHERAL_CHANNELS = ("ECG_right", "ECG_left", "GSR")

PROFILES = ("deap", "amigos", "synthetic")


class QuadrantLabel(IntEnum):
    """Arousal-valence quadrants; low means rating <= 5 on that axis.

    Codes are fixed: LALV=0, HALV=1, LAHV=2, HAHV=3.
    """

    LALV = 0
    HALV = 1
    LAHV = 2
    HAHV = 3


def quadrant_label(arousal: float, valence: float) -> QuadrantLabel:
    """Threshold both ratings at 5 (<= 5 is low) and return the quadrant."""
    for name, value in (("arousal", arousal), ("valence", valence)):
        if not (1.0 <= value <= 9.0) or not math.isfinite(value):
            raise ValidationError(f"{name} rating {value!r} outside [1, 9]")
    return QuadrantLabel((arousal > 5.0) + 2 * (valence > 5.0))


@dataclass(eq=False)
class TrialRecord:
    """One stimulus presentation: C x T signal, leading baseline, two ratings."""

    subject_id: int
    trial_id: int
    channels: tuple[str, ...]
    signal: np.ndarray            # C x T, float32
    baseline_len: int             # samples before stimulus onset
    arousal: float
    valence: float
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.signal.ndim != 2:
            raise StructuralError(
                f"trial ({self.subject_id},{self.trial_id}): signal must be 2-D"
            )
        c, t = self.signal.shape
        if c != len(self.channels):
            raise StructuralError(
                f"trial ({self.subject_id},{self.trial_id}): {c} signal rows "
                f"but {len(self.channels)} channel names"
            )
        if not self.baseline_len < t:
            raise ValidationError(
                f"trial ({self.subject_id},{self.trial_id}): baseline_len "
                f"{self.baseline_len} must be < T={t}"
            )
        if self.baseline_len % WINDOW_LEN != 0:
            raise ValidationError(
                f"trial ({self.subject_id},{self.trial_id}): baseline_len "
                f"{self.baseline_len} not divisible by {WINDOW_LEN}"
            )
        self.label = quadrant_label(self.arousal, self.valence)

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]

    @property
    def baseline(self) -> np.ndarray:
        return self.signal[:, : self.baseline_len]

    @property
    def stimulus(self) -> np.ndarray:
        return self.signal[:, self.baseline_len:]


@dataclass(frozen=True)
class TrialBlobRef:
    subject_id: int
    trial_id: int
    path: str
    offset: int
    shape: tuple[int, int]
    arousal: float
    valence: float


@dataclass(frozen=True)
class DatasetManifest:
    """Parsed manifest: roster, label table and per-trial blob references."""

    name: str
    profile: str
    sample_rate: int
    baseline_len: int
    eeg_channels: tuple[str, ...]
    peripheral_channels: tuple[str, ...]
    trials: tuple[TrialBlobRef, ...]
    root: Path

    @property
    def channels(self) -> tuple[str, ...]:
        return self.eeg_channels + self.peripheral_channels


_LABEL_TABLE = {label.name: int(label) for label in QuadrantLabel}


def load_manifest(manifest_path: str | os.PathLike) -> DatasetManifest:
    path = Path(manifest_path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StructuralError(f"manifest {path} is not valid JSON: {exc}") from exc

    try:
        profile = doc["profile"]
        channels = doc["channels"]
        trials_doc = doc["trials"]
        name = doc["name"]
        sample_rate = int(doc["sample_rate"])
        baseline_len = int(doc["baseline_len"])
    except KeyError as exc:
        raise StructuralError(f"manifest {path} missing key {exc}") from exc
    if profile not in PROFILES:
        raise ValidationError(f"unknown dataset profile {profile!r}")
    if doc.get("labels", _LABEL_TABLE) != _LABEL_TABLE:
        raise StructuralError(
            f"manifest {path} declares a label table different from "
            f"{_LABEL_TABLE}"
        )

    refs = []
    for entry in trials_doc:
        refs.append(
            TrialBlobRef(
                subject_id=int(entry["subject"]),
                trial_id=int(entry["trial"]),
                path=str(entry["path"]),
                offset=int(entry.get("offset", 0)),
                shape=(int(entry["shape"][0]), int(entry["shape"][1])),
                arousal=float(entry["arousal"]),
                valence=float(entry["valence"]),
            )
        )
    return DatasetManifest(
        name=name,
        profile=profile,
        sample_rate=sample_rate,
        baseline_len=baseline_len,
        eeg_channels=tuple(channels.get("eeg", ())),
        peripheral_channels=tuple(channels.get("peripheral", ())),
        trials=tuple(refs),
        root=path.parent,
    )


def _read_blob(root: Path, ref: TrialBlobRef) -> np.ndarray:
    blob_path = root / ref.path
    who = f"trial ({ref.subject_id},{ref.trial_id})"
    if not blob_path.is_file():
        raise LoadError(f"{who}: blob {blob_path} is missing")
    c, t = ref.shape
    count = c * t
    end = ref.offset + 4 * count
    if blob_path.stat().st_size < end:
        raise StructuralError(
            f"{who}: blob {blob_path} holds fewer bytes than the declared "
            f"shape {c}x{t} at offset {ref.offset}"
        )
    data = np.fromfile(blob_path, dtype="<f4", count=count, offset=ref.offset)
    return data.reshape(c, t)


def load_dataset(manifest_path: str | os.PathLike) -> list[TrialRecord]:
    """Load every trial referenced by the manifest, in manifest order.

    For the ``amigos`` profile the known-bad subjects are dropped.
    """
    manifest = load_manifest(manifest_path)
    channels = manifest.channels
    records = []
    for ref in manifest.trials:
        if manifest.profile == "amigos" and ref.subject_id in AMIGOS_EXCLUDED_SUBJECTS:
            continue
        if ref.shape[0] != len(channels):
            raise StructuralError(
                f"trial ({ref.subject_id},{ref.trial_id}): declared "
                f"{ref.shape[0]} rows but the roster lists {len(channels)} "
                "channels"
            )
        signal = _read_blob(manifest.root, ref)
        records.append(
            TrialRecord(
                subject_id=ref.subject_id,
                trial_id=ref.trial_id,
                channels=channels,
                signal=signal,
                baseline_len=manifest.baseline_len,
                arousal=ref.arousal,
                valence=ref.valence,
                sample_rate=manifest.sample_rate,
            )
        )
    return records


def save_dataset(
    trials: Sequence[TrialRecord],
    out_dir: str | os.PathLike,
    *,
    name: str,
    profile: str,
    eeg_channels: Sequence[str],
    peripheral_channels: Sequence[str],
) -> Path:
    """Write trials as manifest + per-subject blobs; returns the manifest path."""
    if profile not in PROFILES:
        raise ValidationError(f"unknown dataset profile {profile!r}")
    out = Path(out_dir)
    (out / "blobs").mkdir(parents=True, exist_ok=True)

    offsets: dict[int, int] = {}
    handles: dict[int, object] = {}
    entries = []
    try:
        for trial in trials:
            sid = trial.subject_id
            rel = f"blobs/subject_{sid:03d}.dat"
            if sid not in handles:
                handles[sid] = open(out / rel, "wb")
                offsets[sid] = 0
            blob = np.ascontiguousarray(trial.signal, dtype="<f4")
            handles[sid].write(blob.tobytes())
            entries.append(
                {
                    "subject": sid,
                    "trial": trial.trial_id,
                    "path": rel,
                    "offset": offsets[sid],
                    "shape": list(trial.signal.shape),
                    "arousal": trial.arousal,
                    "valence": trial.valence,
                }
            )
            offsets[sid] += blob.nbytes
    finally:
        for handle in handles.values():
            handle.close()

    baseline_len = trials[0].baseline_len if trials else 0
    sample_rate = trials[0].sample_rate if trials else SAMPLE_RATE
    doc = {
        "name": name,
        "profile": profile,
        "sample_rate": sample_rate,
        "baseline_len": baseline_len,
        "channels": {
            "eeg": list(eeg_channels),
            "peripheral": list(peripheral_channels),
        },
        "labels": _LABEL_TABLE,
        "trials": entries,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return manifest_path


# Arousal-valence centroids the synthetic ratings are planted around,
# one per quadrant code.
SYNTH_RATING_CENTERS = (
    (2.95, 3.51),   # LALV
    (6.64, 3.07),   # HALV
    (3.44, 6.42),   # LAHV
    (6.58, 7.11),   # HAHV
)

# One pure tone per class, chosen inside the four analysis bands so that
# band decomposition downstream can separate the planted classes.
SYNTH_CLASS_TONES_HZ = (6.0, 10.0, 22.0, 38.0)

_RATING_JITTER = 0.4    # keeps jittered ratings on the planted side of 5


@dataclass(frozen=True)
class SynthSpec:
    """Sizing and difficulty knobs for a synthetic dataset.

    ``class_separation`` is the planted tone amplitude, ``noise_level`` the
    white-noise sigma; both in the same arbitrary units.
    """

    n_subjects: int
    n_trials: int                       # trials per subject
    eeg_channels: tuple[str, ...]
    peripheral_channels: tuple[str, ...]
    class_separation: float
    noise_level: float
    n_windows: int = 60                 # 1 s stimulus windows per trial
    baseline_segments: int = 3          # 1 s baseline segments per trial

    def __post_init__(self) -> None:
        if self.class_separation < 0:
            raise ValidationError("class_separation must be >= 0")
        if self.noise_level < 0:
            raise ValidationError("noise_level must be >= 0")
        if not self.eeg_channels and not self.peripheral_channels:
            raise ValidationError("synthetic dataset needs at least one channel")
        if self.n_subjects < 1 or self.n_trials < 1 or self.n_windows < 1:
            raise ValidationError("n_subjects, n_trials, n_windows must be >= 1")

    @property
    def channels(self) -> tuple[str, ...]:
        return self.eeg_channels + self.peripheral_channels


def synth_dataset(spec: SynthSpec, seed: int) -> list[TrialRecord]:
    """Generate deterministic trials with a planted quadrant per trial.

    Trial ``i`` (in generation order) gets class ``i % 4``, realized as a
    single in-band tone of amplitude ``class_separation`` on every channel
    during the stimulus period, plus white noise everywhere.  Ratings sit at
    the class centroid with +-0.4 uniform jitter.
    """
    rng = np.random.default_rng(seed)
    channels = spec.channels
    n_channels = len(channels)
    baseline_len = spec.baseline_segments * WINDOW_LEN
    total_len = baseline_len + spec.n_windows * WINDOW_LEN
    t_grid = np.arange(total_len - baseline_len) / float(SAMPLE_RATE)

    trials = []
    index = 0
    for subject in range(1, spec.n_subjects + 1):
        for trial in range(1, spec.n_trials + 1):
            code = index % 4
            index += 1
            signal = spec.noise_level * rng.standard_normal((n_channels, total_len))
            phases = rng.uniform(0.0, 2.0 * np.pi, size=n_channels)
            tone_hz = SYNTH_CLASS_TONES_HZ[code]
            tone = spec.class_separation * np.sin(
                2.0 * np.pi * tone_hz * t_grid[None, :] + phases[:, None]
            )
            signal[:, baseline_len:] += tone
            center = SYNTH_RATING_CENTERS[code]
            jitter = rng.uniform(-_RATING_JITTER, _RATING_JITTER, size=2)
            trials.append(
                TrialRecord(
                    subject_id=subject,
                    trial_id=trial,
                    channels=channels,
                    signal=signal.astype(np.float32),
                    baseline_len=baseline_len,
                    arousal=float(center[0] + jitter[0]),
                    valence=float(center[1] + jitter[1]),
                )
            )
    return trials


def dataset_stats(
    trials: Iterable[TrialRecord], window_len: int = WINDOW_LEN
) -> dict[QuadrantLabel, int]:
    """Count post-baseline windows per quadrant label."""
    if window_len < 1:
        raise ValidationError("window_len must be >= 1")
    counts = {label: 0 for label in QuadrantLabel}
    for trial in trials:
        post = trial.n_samples - trial.baseline_len
        if post % window_len != 0:
            raise ValidationError(
                f"trial ({trial.subject_id},{trial.trial_id}): post-baseline "
                f"length {post} not divisible by window {window_len}"
            )
        counts[trial.label] += post // window_len
    return counts
