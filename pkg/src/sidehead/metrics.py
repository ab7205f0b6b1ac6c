"""Accuracy, OCLA, explanation sizes, per-sample explanations and reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .heads import SIDE, HeadOutput, HeadParams, ScoresSheet, forward
from .losses import ocla_metric

__all__ = [
    "accuracy", "ocla_metric", "global_size", "activated_classes", "local_sizes",
    "local_size", "explain", "weight_histogram", "EvalReport", "evaluate", "emit_report",
]


def accuracy(scores, labels) -> float:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0 or len(labels) == 0:
        raise ValueError("accuracy of an empty batch")
    if len(labels) != scores.shape[0]:
        raise ValueError("labels and scores disagree in length")
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def global_size(sheet: ScoresSheet, head_type: str = SIDE) -> int:
    return int(sheet.active(head_type).any(axis=0).sum())


def activated_classes(probs, t: float) -> np.ndarray:
    """``(N, C)`` activation mask, falling back to the argmax class on empty rows."""
    probs = np.atleast_2d(probs)
    act = probs > t
    empty = ~act.any(axis=1)
    act[empty, np.argmax(probs[empty], axis=1)] = True
    return act


def local_sizes(probs, sheet: ScoresSheet, t: float = 0.5, head_type: str = SIDE,
                pooled=None, min_activation: float = 0.0) -> np.ndarray:
    """Per-sample number of distinct prototypes backing the activated classes.

    With ``min_activation > 0`` a prototype only counts when its pooled value
    exceeds that level for the sample (requires ``pooled``).
    """
    act = activated_classes(probs, t).astype(np.int64)
    support = sheet.active(head_type).astype(np.int64)
    used = (act @ support) > 0
    if min_activation > 0:
        if pooled is None:
            raise ValueError("min_activation needs pooled values")
        used &= np.atleast_2d(pooled) > min_activation
    return used.sum(axis=1)


def local_size(out: HeadOutput, sheet: ScoresSheet, t: float = 0.5, index: int = 0,
               head_type: str = SIDE):
    """Size and prototype set for one sample of a forward output."""
    act = activated_classes(out.probs[index:index + 1], t)[0]
    support = sheet.active(head_type)
    protos = set(np.flatnonzero(support[act].any(axis=0)).tolist())
    return len(protos), protos


# ---------------------------------------------------------------------------
# explanations
# ---------------------------------------------------------------------------

@dataclass
class Explanation:
    sample_id: int
    classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "activated_classes": self.classes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @property
    def prototypes(self) -> set:
        return {p["proto"] for c in self.classes for p in c["prototypes"]}


def explain(sample, params: HeadParams, t: float = 0.5, sample_id: int = 0) -> Explanation:
    """Additive breakdown of each activated class logit into prototype terms.

    Every prototype with a positive effective weight for the class is listed,
    so the contributions of a class add up to its logit.
    """
    x = np.asarray(sample, dtype=np.float64)
    out = forward(x if x.ndim == 4 else x[None], params)
    w_eff = params.sheet.effective(params.head_type)
    act = activated_classes(out.probs[:1], t)[0]
    v = out.pooled[0]
    expl = Explanation(sample_id)
    for c in np.flatnonzero(act):
        protos = []
        for j in np.flatnonzero(w_eff[c] > 0):
            h, w = out.argmax_hw[0, j]
            protos.append({
                "proto": int(j),
                "v": float(v[j]),
                "w": float(w_eff[c, j]),
                "contribution": float(w_eff[c, j] * v[j]),
                "h": int(h),
                "w_pos": int(w),
                "sign": int(out.argmax_sign[0, j]),
            })
        protos.sort(key=lambda r: (-r["contribution"], r["proto"]))
        expl.classes.append({
            "class": int(c),
            "prob": float(out.probs[0, c]),
            "logit": float(out.logits[0, c]),
            "prototypes": protos,
        })
    return expl


# ---------------------------------------------------------------------------
# weight histogram and reports
# ---------------------------------------------------------------------------

def weight_histogram(sheet: ScoresSheet, bins: int = 20, head_type: str = SIDE):
    if bins < 1:
        raise ValueError("bins must be >= 1")
    eff = sheet.effective(head_type)
    vals = eff[eff > 0]
    if vals.size == 0:
        return np.linspace(0.0, 1.0, bins + 1), np.zeros(bins, dtype=np.int64)
    counts, edges = np.histogram(vals, bins=bins)
    return edges, counts.astype(np.int64)


def histogram_csv(edges, counts) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["bin_lo", "bin_hi", "count"])
    for lo, hi, n in zip(edges[:-1], edges[1:], counts):
        wr.writerow([repr(float(lo)), repr(float(hi)), int(n)])
    return buf.getvalue()


@dataclass
class EvalReport:
    accuracy: float
    ocla: float
    global_size: int
    local_sizes: np.ndarray
    weight_histogram: tuple
    threshold: float = 0.5

    @property
    def local_size_mean(self) -> float:
        return float(np.mean(self.local_sizes))

    @property
    def n_samples(self) -> int:
        return int(len(self.local_sizes))

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "ocla": self.ocla,
            "global_size": self.global_size,
            "local_size_mean": self.local_size_mean,
            "n_samples": self.n_samples,
            "threshold": self.threshold,
        }


def predict(params: HeadParams, features, chunk: int = 512) -> HeadOutput:
    """Forward in chunks and stitch the outputs together (cache dropped)."""
    parts = [forward(features[i:i + chunk], params) for i in range(0, len(features), chunk)]
    return HeadOutput(
        np.concatenate([p.pooled for p in parts]),
        np.concatenate([p.logits for p in parts]),
        np.concatenate([p.probs for p in parts]),
        np.concatenate([p.argmax_hw for p in parts]),
        np.concatenate([p.argmax_sign for p in parts]),
    )


def evaluate(params: HeadParams, data, t: float = 0.5, bins: int = 20,
             min_activation: float = 0.0, out: Optional[HeadOutput] = None) -> EvalReport:
    if out is None:
        out = predict(params, data.features)
    sizes = local_sizes(out.probs, params.sheet, t, params.head_type, out.pooled, min_activation)
    return EvalReport(
        accuracy=accuracy(out.probs, data.labels),
        ocla=ocla_metric(out.probs, data.labels, t),
        global_size=global_size(params.sheet, params.head_type),
        local_sizes=sizes,
        weight_histogram=weight_histogram(params.sheet, bins, params.head_type),
        threshold=t,
    )


def companion_paths(path) -> tuple:
    path = Path(path)
    stem = path.with_suffix("")
    return Path(f"{stem}_histogram.csv"), Path(f"{stem}_local_sizes.csv")


def emit_report(report: EvalReport, path) -> None:
    """Write the JSON summary plus histogram and per-sample CSV companions."""
    path = Path(path)
    path.write_text(json.dumps(report.summary(), indent=1) + "\n")
    hist_path, local_path = companion_paths(path)
    hist_path.write_text(histogram_csv(*report.weight_histogram))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["sample", "local_size"])
    for i, n in enumerate(report.local_sizes):
        wr.writerow([i, int(n)])
    local_path.write_text(buf.getvalue())
