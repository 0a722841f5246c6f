"""Classification metrics, one-vs-rest ROC/AUC, reports and embedding export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractError
from .model import ModelBundle, forward
from .tensor import Tensor, no_grad, softmax


@dataclass
class ConfusionMatrix:
    counts: np.ndarray           # K×K, rows = true class, cols = predicted
    class_names: List[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(labels, predictions, k: int, class_names: Optional[List[str]] = None) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ContractError("labels and predictions differ in length")
    for name, arr in (("label", labels), ("prediction", predictions)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ContractError(f"{name} outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    names = class_names or [str(i) for i in range(k)]
    return ConfusionMatrix(counts, list(names))


def _ratio(num, den):
    return (num / den if den > 0 else 0.0), den == 0


def metrics(cm: ConfusionMatrix) -> dict:
    """Per-class recall/precision/F1/specificity/CA plus ACC and BACC.

    Undefined ratios are reported as 0 and listed under ``undefined``.
    """
    m = cm.counts.astype(np.float64)
    total = m.sum()
    if total <= 0:
        raise ContractError("confusion matrix is empty")
    tp = np.diag(m)
    support = m.sum(axis=1)
    predicted = m.sum(axis=0)
    per_class = {}
    undefined = []
    for i, name in enumerate(cm.class_names):
        fn = support[i] - tp[i]
        fp = predicted[i] - tp[i]
        tn = total - tp[i] - fn - fp
        recall, u_r = _ratio(tp[i], tp[i] + fn)
        precision, u_p = _ratio(tp[i], tp[i] + fp)
        specificity, u_s = _ratio(tn, tn + fp)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        for flag, what in ((u_r, "recall"), (u_p, "precision"), (u_s, "specificity")):
            if flag:
                undefined.append(f"{name}.{what}")
        per_class[name] = {
            "recall": recall, "precision": precision, "f1": f1,
            "sensitivity": recall, "specificity": specificity,
            "class_accuracy": 100.0 * recall, "support": int(support[i]),
        }
    recalls = [per_class[n]["recall"] for n in cm.class_names]
    return {
        "acc": float(tp.sum() / total),
        "bacc": float(np.mean(recalls)),
        "per_class": per_class,
        "undefined": undefined,
    }


def bacc_from_class_accuracies(class_accuracies: Sequence[float]) -> float:
    """BACC from per-class accuracies given in percent."""
    return float(np.mean(np.asarray(class_accuracies, dtype=np.float64) / 100.0))


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def binary_auc(scores, positives) -> float:
    """Mann-Whitney AUC with ties counted one half (average ranks)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, positives):
    """(fpr, tpr, threshold) at every distinct score, highest threshold first."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = max(int(pos.sum()), 1), max(int((~pos).sum()), 1)
    points = [(0.0, 0.0, float("inf"))]
    for t in np.unique(scores)[::-1]:
        hit = scores >= t
        points.append((float((hit & ~pos).sum() / n_neg), float((hit & pos).sum() / n_pos), float(t)))
    return points


def roc_auc_ovr(scores, labels, k: Optional[int] = None, class_names=None) -> dict:
    """One-vs-rest AUC per class; macro and support-weighted means."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = k or scores.shape[1]
    names = class_names or [str(i) for i in range(k)]
    per_class, skipped, roc = {}, [], {}
    for c in range(k):
        pos = labels == c
        if pos.all() or not pos.any():
            skipped.append(names[c])
            continue
        per_class[names[c]] = binary_auc(scores[:, c], pos)
        roc[names[c]] = roc_points(scores[:, c], pos)
    if not per_class:
        raise ContractError("no class has both positive and negative samples")
    support = {names[c]: int((labels == c).sum()) for c in range(k)}
    total = sum(support[n] for n in per_class)
    return {
        "per_class": per_class,
        "macro": float(np.mean(list(per_class.values()))),
        "weighted": float(sum(per_class[n] * support[n] for n in per_class) / total),
        "skipped": skipped,
        "roc": roc,
    }


@dataclass
class EvalReport:
    acc: float
    bacc: float
    auc_macro: Optional[float]
    auc_weighted: Optional[float]
    auc_per_class: Dict[str, float]
    per_class: Dict[str, dict]
    confusion: List[List[int]]
    class_names: List[str]
    roc: Dict[str, list] = field(default_factory=dict)
    undefined: List[str] = field(default_factory=list)
    auc_skipped: List[str] = field(default_factory=list)
    n_samples: int = 0
    auc_averaging: str = "macro one-vs-rest over softmax probabilities"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc"] = {k: [list(p) for p in v] for k, v in self.roc.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False,
                          default=_json_default)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(**d)


def _json_default(obj):
    raise TypeError(f"not JSON serialisable: {obj!r}")


def _roc_json(points):
    # JSON has no infinity; the sentinel first threshold is written as null
    return [[f, t, None if np.isinf(th) else th] for f, t, th in points]


def predict_proba(bundle: ModelBundle, data, batch_size: int = 64):
    """Softmax probabilities and FV_Final embeddings for a dataset (no augmentation)."""
    probs, embeds = [], []
    with no_grad():
        for s in range(0, len(data), batch_size):
            imgs = np.ascontiguousarray(data.images[s:s + batch_size].transpose(0, 3, 1, 2))
            out = forward(bundle, Tensor(imgs), Tensor(data.meta[s:s + batch_size]), with_sr=False)
            probs.append(softmax(out.logits).data)
            embeds.append(out.embedding.data)
    return np.concatenate(probs), np.concatenate(embeds)


def build_report(probs: np.ndarray, labels: np.ndarray, class_names: List[str]) -> EvalReport:
    k = len(class_names)
    preds = np.argmax(probs, axis=1)
    cm = confusion(labels, preds, k, class_names)
    m = metrics(cm)
    try:
        auc = roc_auc_ovr(probs, labels, k, class_names)
    except ContractError:
        auc = {"per_class": {}, "macro": None, "weighted": None, "skipped": list(class_names), "roc": {}}
    return EvalReport(
        acc=m["acc"], bacc=m["bacc"], auc_macro=auc["macro"], auc_weighted=auc["weighted"],
        auc_per_class=auc["per_class"], per_class=m["per_class"],
        confusion=cm.counts.tolist(), class_names=list(class_names),
        roc={c: _roc_json(p) for c, p in auc["roc"].items()},
        undefined=m["undefined"], auc_skipped=auc["skipped"], n_samples=int(len(labels)))


def evaluate(bundle: ModelBundle, data) -> EvalReport:
    if len(data) == 0:
        raise ContractError("cannot evaluate an empty partition")
    probs, _ = predict_proba(bundle, data)
    return build_report(probs, data.labels, list(data.class_names))


# ----------------------------------------------------------------------------
# file outputs


def write_report_files(report: EvalReport, out_dir) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"report": out_dir / "report.json", "confusion": out_dir / "confusion.csv",
             "roc": out_dir / "roc.csv"}
    paths["report"].write_text(report.to_json() + "\n")
    with open(paths["confusion"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + report.class_names)
        for name, row in zip(report.class_names, report.confusion):
            w.writerow([name] + list(row))
    with open(paths["roc"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "fpr", "tpr", "threshold"])
        for name, points in report.roc.items():
            for fpr, tpr, th in points:
                w.writerow([name, repr(fpr), repr(tpr), "inf" if th is None else repr(th)])
    return paths


def export_embeddings(bundle: ModelBundle, data, path) -> None:
    """CSV rows: sample_id, true_label, then the fused feature vector."""
    if len(data) == 0:
        raise ContractError("cannot export embeddings of an empty partition")
    _, emb = predict_proba(bundle, data)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "true_label"] + [f"e{i}" for i in range(emb.shape[1])])
        for sid, label, row in zip(data.ids, data.labels, emb):
            w.writerow([sid, data.class_names[label]] + [repr(float(v)) for v in row])
