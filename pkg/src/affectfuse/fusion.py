"""Decision-level fusion of per-channel classifier scores.

Two pieces: the generic Bayes-optimal two-cue combination (inverse-variance
weights), and the centroid-distance fusion used for quadrant labels.  The
latter reweights each channel's probabilities by the standard-normal density
of the pairwise centroid distances,

    f(d_ij) = exp(-d_ij^2 / 2) / sqrt(2*pi)
    GauPR[c, j] = sum_i PR[c, i] * f(d_ij)

then scores each channel by the dispersion of its reweighted vector
(sample standard deviation S_c) and sums GauPR[c, j] * S_c over channels.
All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import QuadrantLabel
from .errors import StructuralError, ValidationError
from .nnet import ClassScores

DIAG_RELIABILITY = 1.0 / math.sqrt(2.0 * math.pi)    # f(0) ~ 0.398942

# Fixed preset: the published DEAP rating centroids, (arousal, valence).
PAPER_CENTROIDS_DEAP = {
    QuadrantLabel.LALV: (2.95, 3.51),
    QuadrantLabel.HALV: (6.64, 3.07),
    QuadrantLabel.LAHV: (3.44, 6.42),
    QuadrantLabel.HAHV: (6.58, 7.11),
}


@dataclass(frozen=True)
class GaussianCue:
    """A noisy scalar estimate with known variance."""

    estimate: float
    variance: float

    def __post_init__(self) -> None:
        if not (self.variance > 0.0 and math.isfinite(self.variance)):
            raise ValidationError(f"cue variance must be positive, got {self.variance}")


def bayes_combine(
    cue_a: GaussianCue, cue_b: GaussianCue
) -> tuple[float, tuple[float, float]]:
    """Inverse-variance weighted average of two cues -> (estimate, weights)."""
    inv_a = 1.0 / cue_a.variance
    inv_b = 1.0 / cue_b.variance
    w_a = inv_a / (inv_a + inv_b)
    w_b = 1.0 - w_a
    return w_a * cue_a.estimate + w_b * cue_b.estimate, (w_a, w_b)


@dataclass(frozen=True)
class LabelCentroids:
    """Per-label (arousal, valence) points, indexed by label code."""

    points: np.ndarray    # (n_labels, 2) float64

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise StructuralError("centroids must be an (n_labels, 2) array")
        if np.any(pts < 1.0) or np.any(pts > 9.0):
            raise ValidationError("centroids must lie inside [1, 9]^2")
        object.__setattr__(self, "points", pts)

    @property
    def n_labels(self) -> int:
        return self.points.shape[0]

    @classmethod
    def paper_defaults(cls) -> "LabelCentroids":
        pts = [PAPER_CENTROIDS_DEAP[label] for label in QuadrantLabel]
        return cls(np.asarray(pts, dtype=np.float64))


def class_centroids(
    ratings: Iterable[tuple[float, float, int]], n_labels: int = 4
) -> LabelCentroids:
    """Arithmetic mean of (arousal, valence) ratings per label code."""
    sums = np.zeros((n_labels, 2))
    counts = np.zeros(n_labels, dtype=np.int64)
    for arousal, valence, label in ratings:
        code = int(label)
        if not 0 <= code < n_labels:
            raise ValidationError(f"label code {code} outside [0, {n_labels})")
        sums[code] += (arousal, valence)
        counts[code] += 1
    if np.any(counts == 0):
        missing = [int(i) for i in np.flatnonzero(counts == 0)]
        raise ValidationError(f"no ratings for label codes {missing}")
    return LabelCentroids(sums / counts[:, None])


def reliability_matrix(centroids: LabelCentroids) -> np.ndarray:
    """f(d_ij) for all label pairs; symmetric with diagonal 1/sqrt(2*pi)."""
    pts = centroids.points
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    return DIAG_RELIABILITY * np.exp(-d2 / 2.0)


def gau_scores(pr: ClassScores, f_matrix: np.ndarray) -> np.ndarray:
    """Reliability-weighted scores GauPR[j] = sum_i pr[i] * F[i][j]."""
    probs = pr.probs
    if f_matrix.shape != (probs.shape[0], probs.shape[0]):
        raise StructuralError(
            f"reliability matrix {f_matrix.shape} does not match "
            f"{probs.shape[0]} labels"
        )
    return probs @ f_matrix


def channel_reliability(gau_pr: np.ndarray) -> float:
    """Sample standard deviation (divisor NL-1) of a channel's GauPR."""
    gau_pr = np.asarray(gau_pr, dtype=np.float64)
    if gau_pr.shape[0] < 2:
        raise ValidationError("channel reliability needs at least two labels")
    return float(np.std(gau_pr, ddof=1))


@dataclass
class ChannelDecision:
    """One channel's reweighted scores; reliability is derived on construction."""

    gau_pr: np.ndarray
    channel: str = ""
    reliability: float = field(init=False)

    def __post_init__(self) -> None:
        self.gau_pr = np.asarray(self.gau_pr, dtype=np.float64)
        if np.any(self.gau_pr < 0.0):
            raise ValidationError("GauPR entries must be non-negative")
        self.reliability = channel_reliability(self.gau_pr)


@dataclass
class FusionResult:
    scores: np.ndarray                  # fused F_j per label
    label: int                          # argmax, ties to the lowest code
    decisions: list[ChannelDecision]


def fuse(decisions: Sequence[ChannelDecision]) -> FusionResult:
    """F[j] = sum_c GauPR[c][j] * S_c, then argmax (ties -> lowest code)."""
    if not decisions:
        raise ValidationError("fuse needs at least one channel decision")
    n_labels = decisions[0].gau_pr.shape[0]
    if any(d.gau_pr.shape[0] != n_labels for d in decisions):
        raise StructuralError("channel decisions disagree on the label count")
    fused = np.zeros(n_labels, dtype=np.float64)
    for d in decisions:
        fused += d.gau_pr * d.reliability
    return FusionResult(scores=fused, label=int(fused.argmax()), decisions=list(decisions))


def fuse_pipeline(
    per_channel_scores: Sequence[ClassScores], centroids: LabelCentroids
) -> FusionResult:
    """reliability_matrix -> gau_scores -> channel_reliability -> fuse."""
    if not per_channel_scores:
        raise ValidationError("fusion needs at least one channel")
    n_labels = per_channel_scores[0].probs.shape[0]
    if any(s.probs.shape[0] != n_labels for s in per_channel_scores):
        raise StructuralError("per-channel score vectors disagree on length")
    if centroids.n_labels != n_labels:
        raise StructuralError(
            f"{centroids.n_labels} centroids for {n_labels}-label scores"
        )
    f_matrix = reliability_matrix(centroids)
    decisions = [
        ChannelDecision(gau_pr=gau_scores(s, f_matrix), channel=s.channel)
        for s in per_channel_scores
    ]
    return fuse(decisions)
