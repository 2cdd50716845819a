"""Scores to detections at a controlled false alarm rate, plus ROC data."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, ValidationError

TARGET, CLUTTER = 0, 1


def aggregate_token_outputs(logits) -> np.ndarray:
    """Per-sample target score: softmax over classes per token, mean of class-0 probability over tokens."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 3 or z.shape[-1] != 2:
        raise ValidationError(f"expected logits [B, K, 2], got {z.shape}")
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p[..., TARGET].mean(axis=1)


def _descending_order(scores: np.ndarray, sample_ids: np.ndarray | None) -> np.ndarray:
    ids = np.arange(len(scores)) if sample_ids is None else np.asarray(sample_ids)
    # lexsort: last key is primary; ties broken by ascending sample id
    return np.lexsort((ids, -scores))


def select_threshold(clutter_scores, p_fa: float, sample_ids=None) -> float:
    """eta = x-th largest clutter score with x = ceil(p_fa * N_clutter).

    Targets are declared where score > eta, so on distinct scores exactly
    x - 1 clutter samples exceed the threshold.
    """
    scores = np.asarray(clutter_scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyInputError("no clutter scores to set a threshold from")
    if not 0 < p_fa <= 1:
        raise ValidationError(f"requested false alarm rate must be in (0, 1], got {p_fa}")
    order = _descending_order(scores, sample_ids)
    # guard against products like 0.05 * 20 = 1.0000000000000002
    x = max(1, math.ceil(p_fa * scores.size - 1e-9))
    return float(scores[order[x - 1]])


@dataclass
class DetectionReport:
    sample_ids: list[int]
    labels: list[int]
    scores: list[float]
    threshold: float
    requested_far: float
    achieved_far: float
    detection_rate: float
    roc: list[tuple[float, float]]
    config_hash: str = ""
    name: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["roc"] = [list(p) for p in self.roc]
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DetectionReport":
        d = json.loads(text)
        d["roc"] = [tuple(p) for p in d["roc"]]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DetectionReport":
        return cls.from_json(Path(path).read_text())


def _split_classes(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels differ in length")
    tgt = scores[labels == TARGET]
    clt = scores[labels == CLUTTER]
    if tgt.size == 0 or clt.size == 0:
        raise ValidationError("both target and clutter samples are required")
    return scores, labels, tgt, clt


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FAR, DR) pairs for every threshold in {-inf} U unique scores, rule score > t, sorted by FAR."""
    scores, labels, tgt, clt = _split_classes(scores, labels)
    thresholds = np.unique(scores)
    t_sorted = np.sort(tgt)
    c_sorted = np.sort(clt)
    # count of values strictly above t = n - (number <= t)
    far = (clt.size - np.searchsorted(c_sorted, thresholds, side="right")) / clt.size
    dr = (tgt.size - np.searchsorted(t_sorted, thresholds, side="right")) / tgt.size
    pts = {(float(f), float(d)) for f, d in zip(far, dr)}
    pts.add((1.0, 1.0))
    return sorted(pts)


def evaluate(scores, labels, p_fa: float, sample_ids=None, config_hash: str = "", name: str = "") -> DetectionReport:
    scores, labels, tgt, clt = _split_classes(scores, labels)
    ids = np.arange(scores.size) if sample_ids is None else np.asarray(sample_ids)
    clutter_mask = labels == CLUTTER
    eta = select_threshold(clt, p_fa, ids[clutter_mask])
    return DetectionReport(
        sample_ids=[int(i) for i in ids],
        labels=[int(v) for v in labels],
        scores=[float(s) for s in scores],
        threshold=eta,
        requested_far=float(p_fa),
        achieved_far=float(np.mean(clt > eta)),
        detection_rate=float(np.mean(tgt > eta)),
        roc=roc_curve(scores, labels),
        config_hash=config_hash,
        name=name,
    )


def write_roc_csv(path: str | Path, roc: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["far", "dr"])
        for f, d in roc:
            w.writerow([repr(f), repr(d)])


def report_digest(report: DetectionReport) -> str:
    return hashlib.sha256(report.to_json().encode()).hexdigest()
