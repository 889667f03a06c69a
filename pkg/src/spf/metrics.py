"""Presentation-attack metrics: APCER, BPCER, ACER and threshold sweeps.

Polarity notes, because they are where these pipelines rot:
  - labels: 1 = bona fide, 0 = attack.
  - the positive class for confusion counting is *attack* (tp = attack
    classified attack), while the thresholded score is p_bona_fide.
  - APCER = fn/(tp+fn): the fraction of attacks accepted as bona fide.
  - BPCER = fp/(tn+fp): the fraction of genuine faces rejected.
Empty classes raise instead of returning 0; silent zeros corrupt sweeps.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UndefinedMetricError

BONA_FIDE = 1
ATTACK = 0


def accept(p_bona_fide, threshold):
    """True when the score clears the threshold. Equality rejects (fail closed)."""
    return p_bona_fide > threshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int   # attack classified attack
    tn: int   # bona fide classified bona fide
    fp: int   # bona fide classified attack
    fn: int   # attack classified bona fide

    @property
    def n(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def n_attacks(self):
        return self.tp + self.fn

    @property
    def n_bona_fide(self):
        return self.tn + self.fp


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    apcer: float
    bpcer: float
    acer: float
    threshold: float
    n_samples: int

    def to_dict(self):
        c = self.counts
        return {"threshold": self.threshold, "tp": c.tp, "tn": c.tn,
                "fp": c.fp, "fn": c.fn, "apcer": self.apcer,
                "bpcer": self.bpcer, "acer": self.acer, "n": self.n_samples}

    def to_json(self):
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class SweepCurve:
    points: list          # (threshold, apcer, bpcer, acer) tuples, ascending H
    best_threshold: float
    best_acer: float

    def to_csv(self):
        lines = ["threshold,apcer,bpcer,acer"]
        for h, a, b, c in self.points:
            lines.append(f"{h:.6f},{a:.6f},{b:.6f},{c:.6f}")
        return "\n".join(lines) + "\n"


def confusion(pairs, threshold):
    """Tally (p_bona_fide, label) pairs into confusion counts at a threshold."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("confusion needs a non-empty pair list")
    tp = tn = fp = fn = 0
    for p, label in pairs:
        accepted = accept(p, threshold)
        if label == ATTACK:
            if accepted:
                fn += 1
            else:
                tp += 1
        else:
            if accepted:
                tn += 1
            else:
                fp += 1
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def apcer(counts):
    if counts.n_attacks == 0:
        raise UndefinedMetricError("APCER undefined: no attack samples")
    return counts.fn / counts.n_attacks


def bpcer(counts):
    if counts.n_bona_fide == 0:
        raise UndefinedMetricError("BPCER undefined: no bona-fide samples")
    return counts.fp / counts.n_bona_fide


def acer(apcer_value, bpcer_value):
    return (apcer_value + bpcer_value) / 2


def report_at(pairs, threshold, strict=True):
    """Confusion counts plus rates at one threshold.

    With strict=False a rate whose class is empty comes back as None instead
    of raising, so single-class evaluation sets still report the defined rate.
    """
    counts = confusion(pairs, threshold)
    if strict:
        a, b = apcer(counts), bpcer(counts)
    else:
        a = apcer(counts) if counts.n_attacks else None
        b = bpcer(counts) if counts.n_bona_fide else None
    mean = acer(a, b) if a is not None and b is not None else None
    return MetricsReport(counts=counts, apcer=a, bpcer=b, acer=mean,
                         threshold=threshold, n_samples=counts.n)


def sweep(pairs, n_points=99):
    """Metrics at n_points evenly spaced thresholds in the open interval (0,1).

    Returns the curve plus the argmin-ACER threshold (ties go to the smallest
    threshold).
    """
    pairs = list(pairs)
    if n_points < 2:
        raise DataError(f"sweep needs n_points >= 2, got {n_points}")
    labels = {label for _, label in pairs}
    if labels != {ATTACK, BONA_FIDE}:
        raise UndefinedMetricError(
            f"sweep needs both classes present, got labels {sorted(labels)}")
    thresholds = np.linspace(0.0, 1.0, n_points + 2)[1:-1]
    points = []
    for h in thresholds:
        rep = report_at(pairs, float(h))
        points.append((float(h), rep.apcer, rep.bpcer, rep.acer))
    acers = [p[3] for p in points]
    best = int(np.argmin(acers))
    return SweepCurve(points=points, best_threshold=points[best][0],
                      best_acer=points[best][3])
