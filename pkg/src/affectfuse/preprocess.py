"""Baseline removal, 1 s segmentation, z-scoring, 9x9 mapping, band filtering.

All arithmetic here runs in float64 regardless of the stored float32 blobs;
clips are cast back to float32 only when written to disk.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.signal import firwin

from .dataset import SAMPLE_RATE, WINDOW_LEN, TrialRecord, quadrant_label
from .errors import MappingError, StructuralError, ValidationError

GRID_SIZE = 9
FILTER_TAPS = 129
_STD_FLOOR = 1e-8

BAND_NAMES = ("theta", "alpha", "beta", "gamma")
ZSCORE_SCOPES = ("window", "trial", "none")


@dataclass(frozen=True)
class BandSpec:
    """A pass band in Hz; must sit strictly inside (0, Nyquist)."""

    name: str
    low: float
    high: float

    def __post_init__(self) -> None:
        nyquist = SAMPLE_RATE / 2.0
        if not (0.0 < self.low < self.high < nyquist):
            raise ValidationError(
                f"band {self.name!r}: need 0 < low < high < {nyquist}, got "
                f"({self.low}, {self.high})"
            )


BANDS = {
    "theta": BandSpec("theta", 4.0, 7.0),
    "alpha": BandSpec("alpha", 8.0, 13.0),
    "beta": BandSpec("beta", 14.0, 30.0),
    "gamma": BandSpec("gamma", 31.0, 45.0),
}


@dataclass(frozen=True)
class ElectrodeLayout:
    """Injective electrode-name -> (row, col) placement on the 9x9 grid."""

    positions: dict[str, tuple[int, int]]
    version: str = "unversioned"

    def __post_init__(self) -> None:
        seen: dict[tuple[int, int], str] = {}
        for name, (row, col) in self.positions.items():
            if not (0 <= row < GRID_SIZE and 0 <= col < GRID_SIZE):
                raise ValidationError(
                    f"layout {self.version}: {name} at ({row},{col}) is off-grid"
                )
            if (row, col) in seen:
                raise ValidationError(
                    f"layout {self.version}: {name} collides with "
                    f"{seen[(row, col)]} at ({row},{col})"
                )
            seen[(row, col)] = name

    @classmethod
    def from_text(cls, path: str | os.PathLike, version: str = "") -> "ElectrodeLayout":
        positions = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, row, col = line.split()
            positions[name] = (int(row), int(col))
        return cls(positions, version or Path(path).stem)


@lru_cache(maxsize=1)
def default_layout() -> ElectrodeLayout:
    asset = Path(__file__).parent / "assets" / "layout_9x9_v1.txt"
    return ElectrodeLayout.from_text(asset, version="layout_9x9_v1")


class ClipKey(NamedTuple):
    """Provenance of one 1 s window."""

    subject_id: int
    trial_id: int
    window: int


@dataclass(eq=False)
class TopoClip:
    """One 9x9x128 spatial-temporal EEG window."""

    data: np.ndarray
    key: ClipKey
    band: str = "original"


@dataclass(eq=False)
class ChannelClip:
    """One 128-sample window of a single peripheral channel."""

    data: np.ndarray
    channel: str
    key: ClipKey


def baseline_mean(baseline: np.ndarray, seg_len: int = WINDOW_LEN) -> np.ndarray:
    """Average the baseline across its fixed-length segments, per channel.

    ``baseline`` is C x (N * seg_len); the result is the C x seg_len mean of
    the N segments, accumulated in float64.
    """
    baseline = np.asarray(baseline)
    if baseline.ndim != 2:
        raise StructuralError("baseline must be a C x T matrix")
    c, width = baseline.shape
    if width == 0 or width % seg_len != 0:
        raise ValidationError(
            f"baseline width {width} not a positive multiple of {seg_len}"
        )
    segments = baseline.astype(np.float64).reshape(c, width // seg_len, seg_len)
    return segments.mean(axis=1)


def remove_baseline_and_segment(trial: TrialRecord, m: np.ndarray) -> np.ndarray:
    """Subtract the tiled baseline mean and cut into 1 s windows.

    Returns a (n_windows, C, 128) float64 array; window w holds
    ``signal[:, T_b + w*128 : T_b + (w+1)*128] - m``.
    """
    m = np.asarray(m, dtype=np.float64)
    c = trial.signal.shape[0]
    if m.shape != (c, WINDOW_LEN):
        raise StructuralError(
            f"baseline mean shape {m.shape} does not match trial with {c} "
            f"channels and window {WINDOW_LEN}"
        )
    post = trial.n_samples - trial.baseline_len
    if post % WINDOW_LEN != 0:
        raise ValidationError(
            f"post-baseline length {post} not divisible by {WINDOW_LEN}"
        )
    stimulus = trial.stimulus.astype(np.float64)
    windows = stimulus.reshape(c, post // WINDOW_LEN, WINDOW_LEN)
    return windows.transpose(1, 0, 2) - m[None, :, :]


def zscore(window: np.ndarray) -> np.ndarray:
    """Per-row z-score over the last axis, sample std (divisor n-1).

    Rows with std below 1e-8 become all zeros.
    """
    x = np.asarray(window, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, ddof=1, keepdims=True)
    safe = np.where(std < _STD_FLOOR, 1.0, std)
    out = (x - mean) / safe
    return np.where(std < _STD_FLOOR, 0.0, out)


def topo_map(
    window: np.ndarray, channel_names: Sequence[str], layout: ElectrodeLayout
) -> np.ndarray:
    """Place channel rows on the 9x9 grid; unused cells stay exactly zero."""
    window = np.asarray(window)
    if window.shape[0] != len(channel_names):
        raise StructuralError(
            f"{window.shape[0]} rows but {len(channel_names)} channel names"
        )
    grid = np.zeros((GRID_SIZE, GRID_SIZE, window.shape[-1]), dtype=window.dtype)
    for i, name in enumerate(channel_names):
        if name not in layout.positions:
            raise MappingError(f"channel {name!r} not in layout {layout.version}")
        row, col = layout.positions[name]
        grid[row, col, :] = window[i]
    return grid


def _topo_stack(
    windows: np.ndarray, channel_names: Sequence[str], layout: ElectrodeLayout
) -> np.ndarray:
    """Vectorized topo_map over a (n, C, T) stack -> (n, 9, 9, T)."""
    n, c, t = windows.shape
    grid = np.zeros((n, GRID_SIZE, GRID_SIZE, t), dtype=windows.dtype)
    for i, name in enumerate(channel_names):
        if name not in layout.positions:
            raise MappingError(f"channel {name!r} not in layout {layout.version}")
        row, col = layout.positions[name]
        grid[:, row, col, :] = windows[:, i, :]
    return grid


@lru_cache(maxsize=16)
def _bandpass_taps(low: float, high: float, taps: int) -> np.ndarray:
    # Windowed-sinc (Hamming) linear-phase FIR; firwin normalizes unity gain
    # at the passband center.
    return firwin(taps, [low, high], pass_zero=False, fs=SAMPLE_RATE, window="hamming")


def band_decompose(
    signal: np.ndarray, band: BandSpec, taps: int = FILTER_TAPS
) -> np.ndarray:
    """Zero-phase band-pass of a 1-D signal, same length as the input.

    The symmetric FIR is applied centred, with reflection padding at the
    edges, so there is no phase distortion.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise StructuralError("band_decompose expects a 1-D signal")
    if x.shape[0] < taps:
        raise ValidationError(
            f"signal length {x.shape[0]} shorter than the {taps}-tap filter"
        )
    h = _bandpass_taps(band.low, band.high, taps)
    half = (taps - 1) // 2
    padded = np.pad(x, half, mode="reflect")
    return np.convolve(padded, h, mode="valid")


def _band_rows(rows: np.ndarray, band: BandSpec) -> np.ndarray:
    return np.stack([band_decompose(row, band) for row in rows])


def stimulus_windows(
    trial: TrialRecord,
    channel_indices: Sequence[int],
    band: str | None = None,
    zscore_scope: str = "window",
) -> np.ndarray:
    """Full per-trial pipeline up to (n_windows, C_sel, 128) float64 windows.

    Baseline-mean removal happens first; the optional band filter runs on the
    continuous residual so window boundaries see no edge artifacts; z-scoring
    (per the configured scope) comes last.
    """
    if zscore_scope not in ZSCORE_SCOPES:
        raise ValidationError(f"unknown zscore scope {zscore_scope!r}")
    if band is not None and band not in BANDS:
        raise ValidationError(f"unknown band {band!r}")
    m = baseline_mean(trial.baseline)
    post = trial.n_samples - trial.baseline_len
    if post % WINDOW_LEN != 0:
        raise ValidationError(
            f"post-baseline length {post} not divisible by {WINDOW_LEN}"
        )
    n_win = post // WINDOW_LEN
    idx = list(channel_indices)
    residual = trial.stimulus.astype(np.float64)[idx] - np.tile(m[idx], (1, n_win))
    if band is not None:
        residual = _band_rows(residual, BANDS[band])
    if zscore_scope == "trial":
        residual = zscore(residual)
    windows = residual.reshape(len(idx), n_win, WINDOW_LEN).transpose(1, 0, 2)
    if zscore_scope == "window":
        windows = zscore(windows)
    return windows


def preprocess_trial(
    trial: TrialRecord,
    eeg_channels: Sequence[str],
    peripheral_channels: Sequence[str],
    layout: ElectrodeLayout | None = None,
    band: str | None = None,
    zscore_scope: str = "window",
) -> tuple[list[TopoClip], list[ChannelClip]]:
    """Turn one trial into TopoClips (EEG) and ChannelClips (peripherals)."""
    layout = layout or default_layout()
    name_to_row = {name: i for i, name in enumerate(trial.channels)}
    topo_clips: list[TopoClip] = []
    channel_clips: list[ChannelClip] = []

    if eeg_channels:
        idx = [name_to_row[name] for name in eeg_channels]
        windows = stimulus_windows(trial, idx, band=band, zscore_scope=zscore_scope)
        grids = _topo_stack(windows, eeg_channels, layout)
        tag = band if band is not None else "original"
        for w in range(grids.shape[0]):
            key = ClipKey(trial.subject_id, trial.trial_id, w)
            topo_clips.append(TopoClip(grids[w], key, band=tag))

    for name in peripheral_channels:
        windows = stimulus_windows(
            trial, [name_to_row[name]], band=None, zscore_scope=zscore_scope
        )
        for w in range(windows.shape[0]):
            key = ClipKey(trial.subject_id, trial.trial_id, w)
            channel_clips.append(ChannelClip(windows[w, 0], name, key))

    return topo_clips, channel_clips


def write_clips(
    out_dir: str | os.PathLike,
    trials: Iterable[TrialRecord],
    eeg_channels: Sequence[str],
    peripheral_channels: Sequence[str],
    band: str | None = None,
    layout: ElectrodeLayout | None = None,
    zscore_scope: str = "window",
) -> Path:
    """Preprocess trials and write clip blobs + a clips.json manifest.

    Blobs are raw little-endian float32: one ``topo_<tag>.dat`` holding all
    TopoClips (n x 9 x 9 x 128) and one ``channel_<name>.dat`` per peripheral
    channel (n x 128), in window order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = band if band is not None else "original"

    topo_rows = []
    channel_rows: dict[str, list[np.ndarray]] = {name: [] for name in peripheral_channels}
    window_meta = []
    for trial in trials:
        topo_clips, channel_clips = preprocess_trial(
            trial, eeg_channels, peripheral_channels, layout, band, zscore_scope
        )
        for clip in topo_clips:
            topo_rows.append(clip.data.astype("<f4"))
        for clip in channel_clips:
            channel_rows[clip.channel].append(clip.data.astype("<f4"))
        n_win = (trial.n_samples - trial.baseline_len) // WINDOW_LEN
        for w in range(n_win):
            window_meta.append(
                {
                    "subject": trial.subject_id,
                    "trial": trial.trial_id,
                    "window": w,
                    "label": int(quadrant_label(trial.arousal, trial.valence)),
                    "arousal": trial.arousal,
                    "valence": trial.valence,
                }
            )

    doc: dict = {"band": tag, "zscore_scope": zscore_scope, "windows": window_meta}
    if topo_rows:
        path = f"topo_{tag}.dat"
        np.stack(topo_rows).tofile(out / path)
        doc["topo"] = {
            "path": path,
            "count": len(topo_rows),
            "shape": [GRID_SIZE, GRID_SIZE, WINDOW_LEN],
        }
    doc["channels"] = {}
    for name, rows in channel_rows.items():
        path = f"channel_{name}.dat"
        np.stack(rows).tofile(out / path)
        doc["channels"][name] = {"path": path, "count": len(rows), "shape": [WINDOW_LEN]}

    manifest = out / "clips.json"
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def read_clips(clips_path: str | os.PathLike) -> dict:
    """Load a clips.json manifest and its blobs back into arrays."""
    path = Path(clips_path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    out = {"band": doc["band"], "windows": doc["windows"], "channels": {}}
    if "topo" in doc:
        meta = doc["topo"]
        count, shape = meta["count"], tuple(meta["shape"])
        data = np.fromfile(path.parent / meta["path"], dtype="<f4")
        out["topo"] = data.reshape((count,) + shape)
    for name, meta in doc["channels"].items():
        data = np.fromfile(path.parent / meta["path"], dtype="<f4")
        out["channels"][name] = data.reshape((meta["count"],) + tuple(meta["shape"]))
    return out
