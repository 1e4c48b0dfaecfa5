"""Task-appropriate evaluation metrics and confusion structures.

The weighted key score follows the community convention for key detection:
exact 1.0, estimate a perfect fifth above the reference (same mode) 0.5,
relative major/minor 0.3, parallel major/minor 0.2, anything else 0.0.
The fifth credit is directional by definition: score("C major", "G major")
is 0.5 while score("G major", "C major") is 0.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import PITCH_NAMES


class MetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray          # [n_classes, n_classes], rows = reference
    labels: list
    examples: dict = field(default_factory=dict)  # (ref, pred) -> [track_id]

    @property
    def n_items(self) -> int:
        return int(self.counts.sum())

    def to_jsonable(self) -> dict:
        return {
            "labels": list(self.labels),
            "counts": self.counts.tolist(),
            "examples": {f"{r},{c}": ids for (r, c), ids in
                         sorted(self.examples.items())},
        }

    @classmethod
    def from_jsonable(cls, obj) -> "ConfusionMatrix":
        ex = {}
        for key, ids in obj.get("examples", {}).items():
            r, c = key.split(",")
            ex[(int(r), int(c))] = list(ids)
        return cls(counts=np.asarray(obj["counts"], dtype=np.int64),
                   labels=list(obj["labels"]), examples=ex)


def classification_metrics(refs, preds, n_classes: int) -> dict:
    """Accuracy, macro-F1, and per-class precision/recall/F1.

    Classes absent from both refs and preds contribute F1 = 0 to the macro
    and are listed under "absent_classes".
    """
    refs = np.asarray(refs, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if refs.shape != preds.shape:
        raise MetricError(f"length mismatch: {refs.shape} vs {preds.shape}")
    if refs.size == 0:
        raise MetricError("empty input")
    if n_classes < 1:
        raise MetricError("n_classes must be >= 1")

    per_class = []
    absent = []
    for c in range(n_classes):
        tp = int(np.sum((preds == c) & (refs == c)))
        fp = int(np.sum((preds == c) & (refs != c)))
        fn = int(np.sum((preds != c) & (refs == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        if tp + fp + fn == 0:
            absent.append(c)
        per_class.append({"class": c, "precision": precision, "recall": recall,
                          "f1": f1})
    return {
        "accuracy": float(np.mean(refs == preds)),
        "macro_f1": float(np.mean([pc["f1"] for pc in per_class])),
        "per_class": per_class,
        "absent_classes": absent,
    }


def multilabel_metrics(ref_sets, scores, threshold: float = 0.5) -> dict:
    """Macro ROC-AUC (rank statistic, ties get half credit) and macro F1 at
    the threshold.

    ref_sets is an [N, L] 0/1 matrix. Labels whose references are single
    class have no defined AUC; they are excluded from the AUC macro and
    flagged. The F1 macro covers every label.
    """
    refs = np.asarray(ref_sets, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if refs.shape != scores.shape:
        raise MetricError(f"shape mismatch: {refs.shape} vs {scores.shape}")
    if refs.size == 0:
        raise MetricError("empty input")

    n, n_labels = refs.shape
    aucs, skipped, f1s, per_label = [], [], [], []
    for lab in range(n_labels):
        r = refs[:, lab]
        s = scores[:, lab]
        n_pos = int(r.sum())
        n_neg = n - n_pos
        auc = None
        if n_pos and n_neg:
            ranks = _average_ranks(s)
            auc = (ranks[r == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
            aucs.append(auc)
        else:
            skipped.append(lab)
        pred = (s >= threshold).astype(np.int64)
        tp = int(np.sum(pred & r))
        fp = int(np.sum(pred & (1 - r)))
        fn = int(np.sum((1 - pred) & r))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        f1s.append(f1)
        per_label.append({"label": lab, "roc_auc": auc, "f1": f1,
                          "n_pos": n_pos})
    return {
        "macro_roc_auc": float(np.mean(aucs)) if aucs else float("nan"),
        "macro_f1": float(np.mean(f1s)),
        "per_label": per_label,
        "single_class_labels": skipped,
        "threshold": threshold,
    }


def _average_ranks(x):
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


_ENHARMONIC = {"DB": "C#", "EB": "D#", "GB": "F#", "AB": "G#", "BB": "A#",
               "CB": "B", "FB": "E", "E#": "F", "B#": "C"}
_MODES = ("major", "minor")


def parse_key(text: str) -> tuple[int, str]:
    """Parse "<tonic> <mode>" into (pitch class index, mode); enharmonics
    are normalized (Db -> C#, and so on)."""
    parts = str(text).strip().split()
    if len(parts) != 2:
        raise MetricError(f"unparseable key {text!r} (want '<tonic> <mode>')")
    tonic, mode = parts[0], parts[1].lower()
    norm = tonic.upper().replace("♭", "B").replace("♯", "#")
    norm = _ENHARMONIC.get(norm, norm)
    canonical = norm[0].upper() + norm[1:]
    if canonical not in PITCH_NAMES:
        raise MetricError(f"unparseable key {text!r} (tonic {tonic!r})")
    if mode not in _MODES:
        raise MetricError(f"unparseable key {text!r} (mode {mode!r})")
    return PITCH_NAMES.index(canonical), mode


def key_weighted_score(ref_key: str, est_key: str) -> float:
    """Weighted key-detection credit in {1.0, 0.5, 0.3, 0.2, 0.0}."""
    ref_pc, ref_mode = parse_key(ref_key)
    est_pc, est_mode = parse_key(est_key)
    if (ref_pc, ref_mode) == (est_pc, est_mode):
        return 1.0
    if est_mode == ref_mode and est_pc == (ref_pc + 7) % 12:
        return 0.5  # estimate a perfect fifth above the reference
    if ref_mode == "major" and est_mode == "minor" and est_pc == (ref_pc + 9) % 12:
        return 0.3  # relative minor of the reference
    if ref_mode == "minor" and est_mode == "major" and est_pc == (ref_pc + 3) % 12:
        return 0.3  # relative major of the reference
    if est_pc == ref_pc:
        return 0.2  # parallel major/minor
    return 0.0


def confusion(refs, preds, track_ids, labels, cap: int = 5) -> ConfusionMatrix:
    """Counts plus up to `cap` example track ids per cell (first occurrences
    in input order)."""
    refs = np.asarray(refs, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if not (len(refs) == len(preds) == len(track_ids)):
        raise MetricError("refs, preds, and track_ids must align")
    n = len(labels)
    counts = np.zeros((n, n), dtype=np.int64)
    examples: dict = {}
    for r, p, tid in zip(refs, preds, track_ids):
        counts[r, p] += 1
        cell = examples.setdefault((int(r), int(p)), [])
        if len(cell) < cap:
            cell.append(tid)
    return ConfusionMatrix(counts=counts, labels=list(labels), examples=examples)
