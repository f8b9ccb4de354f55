"""Cross-validated training per modality and decision fusion across them.

A "modality" is either the broadband EEG grid ("eeg"), one of the four band
variants ("theta"/"alpha"/"beta"/"gamma"), or a single peripheral channel by
name.  EEG variants train the 3D grid network, peripheral channels the 1D
waveform network.  Eval-fold scores are retained per window so fusion can run
on out-of-fold predictions only; fusion centroids come from the training
folds' ratings (never the eval fold).
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nnet
from .dataset import QuadrantLabel, TrialRecord
from .errors import StructuralError, ValidationError
from .fusion import LabelCentroids, class_centroids, fuse_pipeline
from .nnet import ClassScores
from .preprocess import BAND_NAMES, ElectrodeLayout, default_layout, stimulus_windows

SPLIT_MODES = ("segment", "trial")
N_QUADRANTS = 4


@dataclass(frozen=True)
class FoldPlan:
    """A k-way partition of window indices."""

    k: int
    mode: str
    seed: int
    folds: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        total = np.concatenate(self.folds) if self.folds else np.array([], dtype=int)
        n = total.shape[0]
        if not np.array_equal(np.sort(total), np.arange(n)):
            raise StructuralError("folds must partition the window index set")

    @property
    def n_windows(self) -> int:
        return int(sum(f.shape[0] for f in self.folds))

    def train_indices(self, fold: int) -> np.ndarray:
        rest = [f for i, f in enumerate(self.folds) if i != fold]
        return np.sort(np.concatenate(rest))


def _deal(groups: list[np.ndarray], k: int) -> list[list[int]]:
    # Round-robin with a pointer that carries across groups, so overall fold
    # sizes differ by at most one while each group stays spread out.
    folds: list[list[int]] = [[] for _ in range(k)]
    pointer = 0
    for group in groups:
        for idx in group:
            folds[pointer % k].append(int(idx))
            pointer += 1
    return folds


def kfold_split(
    n_windows: int,
    trial_of_window: Sequence[int],
    k: int = 10,
    mode: str = "segment",
    seed: int = 0,
    labels: Sequence[int] | None = None,
) -> FoldPlan:
    """Deterministic k-fold plan, stratified by label when labels are given.

    ``segment`` mode splits windows; ``trial`` mode keeps all windows of a
    trial in one fold (fold sizes then balance at trial granularity).
    """
    if mode not in SPLIT_MODES:
        raise ValidationError(f"unknown split mode {mode!r}")
    if k < 2:
        raise ValidationError("k must be >= 2")
    if k > n_windows:
        raise ValidationError(f"cannot split {n_windows} windows into {k} folds")
    trial_of_window = np.asarray(trial_of_window)
    if trial_of_window.shape[0] != n_windows:
        raise StructuralError("trial_of_window length must equal n_windows")
    rng = np.random.default_rng(seed)

    if mode == "segment":
        if labels is None:
            groups = [rng.permutation(n_windows)]
        else:
            labels = np.asarray(labels)
            groups = [
                rng.permutation(np.flatnonzero(labels == lab))
                for lab in np.unique(labels)
            ]
        folds = _deal(groups, k)
    else:
        trials, first = np.unique(trial_of_window, return_index=True)
        if k > trials.shape[0]:
            raise ValidationError(
                f"cannot split {trials.shape[0]} trials into {k} folds"
            )
        if labels is None:
            trial_groups = [rng.permutation(trials.shape[0])]
        else:
            labels = np.asarray(labels)
            trial_labels = labels[first]
            trial_groups = [
                rng.permutation(np.flatnonzero(trial_labels == lab))
                for lab in np.unique(trial_labels)
            ]
        trial_folds = _deal(trial_groups, k)
        folds = [
            np.flatnonzero(np.isin(trial_of_window, trials[members])).tolist()
            for members in trial_folds
        ]
    return FoldPlan(
        k=k,
        mode=mode,
        seed=seed,
        folds=tuple(np.asarray(sorted(f), dtype=np.int64) for f in folds),
    )


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValidationError("predictions and labels must have equal length")
    if predictions.shape[0] == 0:
        raise ValidationError("cannot score an empty prediction set")
    return float(np.mean(predictions == labels))


def confusion_matrix(
    predictions: Sequence[int], labels: Sequence[int], n_labels: int = N_QUADRANTS
) -> np.ndarray:
    """Counts with rows = true label, columns = predicted label."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValidationError("predictions and labels must have equal length")
    for name, arr in (("predictions", predictions), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_labels):
            raise ValidationError(f"{name} outside [0, {n_labels})")
    counts = np.zeros((n_labels, n_labels), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return counts


@dataclass(frozen=True)
class ExperimentConfig:
    epochs: int = 10
    batch_size: int = 240
    lr: float = 1e-3
    keep_prob: float = 0.5
    folds: int = 10
    split_mode: str = "segment"
    seed: int = 0
    precision: str = "f32"          # "f64" for bit-reproducible runs
    jobs: int = 1
    zscore_scope: str = "window"

    def __post_init__(self) -> None:
        if self.precision not in ("f32", "f64"):
            raise ValidationError(f"unknown precision {self.precision!r}")
        if self.split_mode not in SPLIT_MODES:
            raise ValidationError(f"unknown split mode {self.split_mode!r}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.precision == "f32" else np.float64)


@dataclass
class ModalityRun:
    """Per-modality cross-validation outcome plus retained eval scores."""

    modality: str
    arch: str
    fold_plan: FoldPlan
    fold_accuracies: tuple[float, ...]
    mean_accuracy: float
    scores: np.ndarray                  # (n_windows, n_labels) float64
    labels: np.ndarray                  # (n_windows,) int
    provenance: tuple[tuple[int, int, int], ...]
    ratings: np.ndarray                 # (n_windows, 2): arousal, valence
    histories: list[list[nnet.EpochStats]] = field(default_factory=list)


@dataclass
class FusionRun:
    name: str
    channels: tuple[str, ...]
    fold_accuracies: tuple[float, ...]
    mean_accuracy: float
    improvements: dict[str, float]
    window_rows: list[dict]


def _assemble_windows(
    trials: Sequence[TrialRecord],
    eeg_channels: Sequence[str],
    peripheral_channels: Sequence[str],
    modality: str,
    layout: ElectrodeLayout,
    zscore_scope: str,
) -> tuple[np.ndarray, np.ndarray, list, np.ndarray, np.ndarray]:
    """Stack model inputs for one modality over all trials (manifest order)."""
    from .preprocess import _topo_stack    # internal stacked variant

    is_eeg = modality == "eeg" or modality in BAND_NAMES
    if not is_eeg and modality not in peripheral_channels:
        raise ValidationError(
            f"unknown modality {modality!r}: expected 'eeg', one of "
            f"{BAND_NAMES} or a peripheral channel name"
        )
    band = modality if modality in BAND_NAMES else None

    xs, ys, prov, trial_ids, ratings = [], [], [], [], []
    for trial in trials:
        name_to_row = {name: i for i, name in enumerate(trial.channels)}
        if is_eeg:
            idx = [name_to_row[name] for name in eeg_channels]
            windows = stimulus_windows(trial, idx, band=band, zscore_scope=zscore_scope)
            stacked = _topo_stack(windows, eeg_channels, layout)[..., None]
        else:
            windows = stimulus_windows(
                trial, [name_to_row[modality]], band=None, zscore_scope=zscore_scope
            )
            stacked = windows[:, 0, :, None]
        xs.append(stacked)
        n_win = stacked.shape[0]
        code = int(trial.label)
        ys.extend([code] * n_win)
        prov.extend(
            (trial.subject_id, trial.trial_id, w) for w in range(n_win)
        )
        trial_ids.extend([(trial.subject_id, trial.trial_id)] * n_win)
        ratings.extend([(trial.arousal, trial.valence)] * n_win)

    x = np.concatenate(xs, axis=0)
    y = np.asarray(ys, dtype=np.int64)
    # dense trial index for the fold planner
    uniq = {tid: i for i, tid in enumerate(dict.fromkeys(trial_ids))}
    trial_idx = np.asarray([uniq[tid] for tid in trial_ids], dtype=np.int64)
    return x, y, prov, trial_idx, np.asarray(ratings, dtype=np.float64)


def _modality_entropy(modality: str) -> int:
    return zlib.crc32(modality.encode("utf-8"))


def _build_model(arch: str, n_labels: int, keep_prob: float, dtype: np.dtype) -> nnet.Model:
    if arch == "CNN3D":
        model = nnet.build_model_3d(n_labels, keep_prob=keep_prob)
    else:
        model = nnet.build_model_1d(n_labels, keep_prob=keep_prob)
    model.dtype = dtype
    return model


def run_modality(
    trials: Sequence[TrialRecord],
    eeg_channels: Sequence[str],
    peripheral_channels: Sequence[str],
    modality: str,
    config: ExperimentConfig,
    layout: ElectrodeLayout | None = None,
) -> ModalityRun:
    """Train the matching architecture per fold; retain eval-fold scores."""
    layout = layout or default_layout()
    x, y, prov, trial_idx, ratings = _assemble_windows(
        trials, eeg_channels, peripheral_channels, modality, layout, config.zscore_scope
    )
    x = x.astype(config.dtype)
    plan = kfold_split(
        n_windows=len(y),
        trial_of_window=trial_idx,
        k=config.folds,
        mode=config.split_mode,
        seed=config.seed,
        labels=y,
    )
    arch = "CNN3D" if (modality == "eeg" or modality in BAND_NAMES) else "CNN1D"
    n_labels = N_QUADRANTS
    scores = np.zeros((len(y), n_labels), dtype=np.float64)
    fold_accs: list[float] = [0.0] * plan.k
    histories: list = [None] * plan.k

    def run_fold(fold: int) -> None:
        eval_idx = plan.folds[fold]
        train_idx = plan.train_indices(fold)
        model = _build_model(arch, n_labels, config.keep_prob, config.dtype)
        train_cfg = nnet.TrainConfig(
            epochs=config.epochs,
            batch_size=config.batch_size,
            lr=config.lr,
            seed=(config.seed, _modality_entropy(modality), fold),
        )
        _, history = nnet.train(
            model, x[train_idx], y[train_idx], x[eval_idx], y[eval_idx], train_cfg
        )
        probs = np.concatenate(
            [
                nnet.forward(model, x[eval_idx[s : s + config.batch_size]], "eval")
                for s in range(0, len(eval_idx), config.batch_size)
            ]
        )
        scores[eval_idx] = probs.astype(np.float64)
        fold_accs[fold] = accuracy(probs.argmax(axis=-1), y[eval_idx])
        histories[fold] = history

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            list(pool.map(run_fold, range(plan.k)))
    else:
        for fold in range(plan.k):
            run_fold(fold)

    return ModalityRun(
        modality=modality,
        arch=arch,
        fold_plan=plan,
        fold_accuracies=tuple(fold_accs),
        mean_accuracy=float(np.mean(fold_accs)),
        scores=scores,
        labels=y,
        provenance=tuple(prov),
        ratings=ratings,
        histories=histories,
    )


def _check_alignment(runs: Sequence[ModalityRun]) -> None:
    base = runs[0]
    for run in runs[1:]:
        if run.provenance != base.provenance:
            raise StructuralError(
                f"modality {run.modality!r} windows are not aligned with "
                f"{base.modality!r}"
            )
        if run.fold_plan.k != base.fold_plan.k or any(
            not np.array_equal(a, b)
            for a, b in zip(run.fold_plan.folds, base.fold_plan.folds)
        ):
            raise StructuralError(
                f"modality {run.modality!r} uses a different fold plan than "
                f"{base.modality!r}"
            )


def run_fusion(
    runs: Sequence[ModalityRun],
    centroids: LabelCentroids | None = None,
    name: str = "fusion",
) -> FusionRun:
    """Fuse aligned modality runs window by window on out-of-fold scores.

    With ``centroids=None`` each fold uses centroids computed from the
    ratings of its training windows only.
    """
    if not runs:
        raise ValidationError("fusion needs at least one modality run")
    _check_alignment(runs)
    base = runs[0]
    plan = base.fold_plan
    n = len(base.labels)
    fused_labels = np.zeros(n, dtype=np.int64)
    rows: list[dict] = [None] * n    # type: ignore[list-item]

    for fold in range(plan.k):
        if centroids is None:
            train_idx = plan.train_indices(fold)
            cents = class_centroids(
                zip(
                    base.ratings[train_idx, 0],
                    base.ratings[train_idx, 1],
                    base.labels[train_idx],
                ),
                n_labels=N_QUADRANTS,
            )
        else:
            cents = centroids
        for w in map(int, plan.folds[fold]):
            per_channel = [
                ClassScores(probs=run.scores[w], channel=run.modality) for run in runs
            ]
            result = fuse_pipeline(per_channel, cents)
            fused_labels[w] = result.label
            row = {
                "subject": base.provenance[w][0],
                "trial": base.provenance[w][1],
                "window": base.provenance[w][2],
                "fold": fold,
                "true_label": int(base.labels[w]),
                "fused_label": result.label,
            }
            for j, value in enumerate(result.scores):
                row[f"F_{j}"] = float(value)
            for run, decision in zip(runs, result.decisions):
                tag = run.modality
                row[f"S[{tag}]"] = float(decision.reliability)
                for j in range(N_QUADRANTS):
                    row[f"PR[{tag}]_{j}"] = float(run.scores[w][j])
                    row[f"GauPR[{tag}]_{j}"] = float(decision.gau_pr[j])
            rows[w] = row

    fold_accs = tuple(
        accuracy(fused_labels[f], base.labels[f]) for f in plan.folds
    )
    mean_acc = float(np.mean(fold_accs))
    improvements = {
        run.modality: mean_acc - run.mean_accuracy for run in runs
    }
    return FusionRun(
        name=name,
        channels=tuple(run.modality for run in runs),
        fold_accuracies=fold_accs,
        mean_accuracy=mean_acc,
        improvements=improvements,
        window_rows=rows,
    )


@dataclass
class ExperimentReport:
    config: dict
    modalities: list[ModalityRun]
    fusions: list[FusionRun]
    confusions: dict[str, np.ndarray]


def fusion_groups(modalities: Sequence[str], peripheral: Sequence[str]) -> dict[str, list[str]]:
    """Channel sets reported when present: band EEG, peripherals, and combos."""
    bands = [m for m in modalities if m in BAND_NAMES]
    periph = [m for m in modalities if m in peripheral]
    groups: dict[str, list[str]] = {}
    if len(bands) >= 2:
        groups["fusion_eeg"] = bands
    if len(periph) >= 2:
        groups["fusion_peripheral"] = periph
    if bands and periph:
        groups["fusion_eeg_peripheral"] = bands + periph
    if "eeg" in modalities and periph:
        groups["fusion_eegstar_peripheral"] = ["eeg"] + periph
    return groups


def run_experiment(
    trials: Sequence[TrialRecord],
    eeg_channels: Sequence[str],
    peripheral_channels: Sequence[str],
    modalities: Sequence[str],
    config: ExperimentConfig,
    centroids: LabelCentroids | None = None,
    layout: ElectrodeLayout | None = None,
) -> ExperimentReport:
    """Run every modality, then every applicable fusion group."""
    if not modalities:
        raise ValidationError("no modalities requested")
    runs = []
    for modality in modalities:
        runs.append(
            run_modality(
                trials, eeg_channels, peripheral_channels, modality, config, layout
            )
        )
    by_name = {run.modality: run for run in runs}
    fusions = []
    for group_name, members in fusion_groups(modalities, peripheral_channels).items():
        fusions.append(
            run_fusion([by_name[m] for m in members], centroids, name=group_name)
        )
    confusions = {
        run.modality: confusion_matrix(run.scores.argmax(axis=-1), run.labels)
        for run in runs
    }
    for fusion in fusions:
        fused = np.asarray([row["fused_label"] for row in fusion.window_rows])
        truth = np.asarray([row["true_label"] for row in fusion.window_rows])
        confusions[fusion.name] = confusion_matrix(fused, truth)
    return ExperimentReport(
        config=_config_echo(config, modalities),
        modalities=runs,
        fusions=fusions,
        confusions=confusions,
    )


def _config_echo(config: ExperimentConfig, modalities: Sequence[str]) -> dict:
    echo = {
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "keep_prob": config.keep_prob,
        "folds": config.folds,
        "split_mode": config.split_mode,
        "seed": config.seed,
        "precision": config.precision,
        "jobs": config.jobs,
        "zscore_scope": config.zscore_scope,
        "modalities": list(modalities),
    }
    return echo


def _fmt(value: float) -> str:
    return repr(float(value))


def emit_report(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Write report.json, report.csv, per-modality confusions, fusion windows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    doc = {
        "config": report.config,
        "modalities": [
            {
                "name": run.modality,
                "arch": run.arch,
                "split_mode": run.fold_plan.mode,
                "fold_accuracies": list(run.fold_accuracies),
                "mean_accuracy": run.mean_accuracy,
            }
            for run in report.modalities
        ],
        "fusions": [
            {
                "name": fusion.name,
                "channels": list(fusion.channels),
                "fold_accuracies": list(fusion.fold_accuracies),
                "mean_accuracy": fusion.mean_accuracy,
                "improvements": fusion.improvements,
            }
            for fusion in report.fusions
        ],
    }
    json_path = out / "report.json"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    written.append(json_path)

    lines = ["kind,name,channels,mean_accuracy,improvement_over_single"]
    for run in report.modalities:
        improvement = ""
        for fusion in report.fusions:
            if run.modality in fusion.improvements:
                improvement = _fmt(fusion.improvements[run.modality])
                break
        lines.append(f"single,{run.modality},{run.modality},{_fmt(run.mean_accuracy)},{improvement}")
    for fusion in report.fusions:
        channels = ";".join(fusion.channels)
        lines.append(f"fusion,{fusion.name},{channels},{_fmt(fusion.mean_accuracy)},")
    csv_path = out / "report.csv"
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(csv_path)

    for name, matrix in report.confusions.items():
        path = out / f"confusion_{name}.csv"
        header = ",".join(f"pred_{label.name}" for label in QuadrantLabel)
        body = [f"true_{label.name}," + ",".join(str(int(v)) for v in matrix[i])
                for i, label in enumerate(QuadrantLabel)]
        path.write_text(",".join(["", header]).lstrip(",") + "\n"
                        + "\n".join(body) + "\n", encoding="utf-8")
        written.append(path)

    if report.fusions:
        rows = report.fusions[0].window_rows
        for fusion in report.fusions:
            if fusion.window_rows:
                rows = fusion.window_rows
        all_rows: list[str] = []
        columns: list[str] = []
        for fusion in report.fusions:
            for row in fusion.window_rows:
                if not columns:
                    columns = list(row.keys())
                    all_rows.append("fusion," + ",".join(columns))
                values = [fusion.name] + [
                    _fmt(row[c]) if isinstance(row[c], float) else str(row[c])
                    for c in columns
                ]
                all_rows.append(",".join(values))
        windows_path = out / "fusion_windows.csv"
        windows_path.write_text("\n".join(all_rows) + "\n", encoding="utf-8")
        written.append(windows_path)

    return written
