"""Downstream-classifier evaluation of synthetic (or real) training sets.

Train a classifier on one image source, score it on a held-out set of real
images, and report per-class and macro precision/recall/F1 as percentages.
Comparison reports show raw per-class deltas between two runs, nothing more.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .fileio import atomic_write_bytes, atomic_write_json, read_json

REPORT_SCHEMA_VERSION = 1

__all__ = [
    "EvalConfig",
    "EvalReport",
    "TrainedClassifier",
    "train_classifier",
    "evaluate",
    "report_from_predictions",
    "metrics_from_confusion",
    "compare_runs",
    "render_report_text",
    "render_comparison_text",
    "save_report",
    "load_report",
]


@dataclass(frozen=True)
class EvalConfig:
    preset: str = "small_cnn_desk"   # or "resnext50_like"
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 32
    image_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.preset not in ("small_cnn_desk", "resnext50_like"):
            raise ValueError(f"unknown classifier preset {self.preset!r}")


@dataclass
class EvalReport:
    class_names: list
    confusion: list                 # rows = true class, cols = predicted
    precision: list                 # per class, percent
    recall: list
    f1: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    config: dict
    seed: int


class SmallCnn(nn.Module):
    """Three conv blocks + global pooling; the desk-scale preset."""

    def __init__(self, num_classes: int, in_channels: int = 3):
        super().__init__()
        chs = (16, 32, 64)
        layers = []
        prev = in_channels
        for ch in chs:
            layers += [nn.Conv2d(prev, ch, 3, padding=1), nn.ReLU(),
                       nn.MaxPool2d(2)]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(chs[-1], num_classes)

    def forward(self, x):
        h = self.features(x)
        return self.head(h.mean(dim=(2, 3)))


def _build_model(preset: str, num_classes: int) -> nn.Module:
    if preset == "small_cnn_desk":
        return SmallCnn(num_classes)
    import torchvision

    return torchvision.models.resnext50_32x4d(num_classes=num_classes)


@dataclass
class TrainedClassifier:
    model: nn.Module
    class_names: list
    config: EvalConfig

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        self.model.eval()
        preds = []
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                xb = torch.from_numpy(
                    np.asarray(images[start:start + batch_size], dtype=np.float32))
                preds.append(self.model(xb).argmax(dim=1).numpy())
        return np.concatenate(preds)

    def save(self, path) -> None:
        buf = io.BytesIO()
        torch.save({"state": self.model.state_dict(),
                    "class_names": self.class_names,
                    "config": asdict(self.config)}, buf)
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path) -> "TrainedClassifier":
        blob = torch.load(path, weights_only=False)
        config = EvalConfig(**blob["config"])
        model = _build_model(config.preset, len(blob["class_names"]))
        model.load_state_dict(blob["state"])
        model.eval()
        return cls(model=model, class_names=blob["class_names"], config=config)


def train_classifier(images: np.ndarray, labels: np.ndarray, class_names: list,
                     config: EvalConfig) -> TrainedClassifier:
    """Cross-entropy training, deterministic under a fixed seed."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("images must be a non-empty (N, C, H, W) array")
    if len(class_names) < 2:
        raise ValueError("need at least two classes")
    if labels.min() < 0 or labels.max() >= len(class_names):
        raise ValueError("labels outside the class map")

    torch.manual_seed(config.seed)
    model = _build_model(config.preset, len(class_names))
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = images.shape[0]
    x_all = torch.from_numpy(images)
    y_all = torch.from_numpy(labels)
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            logits = model(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return TrainedClassifier(model=model, class_names=list(class_names),
                             config=config)


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """Per-class and macro precision/recall/F1 in percent.

    Degenerate 0/0 ratios are reported as 0.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    tp = np.diag(cm)
    pred_totals = cm.sum(axis=0)
    true_totals = cm.sum(axis=1)
    precision = np.divide(tp, pred_totals, out=np.zeros_like(tp),
                          where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros_like(tp),
                       where=true_totals > 0)
    pr_sum = precision + recall
    f1 = np.divide(2 * precision * recall, pr_sum, out=np.zeros_like(tp),
                   where=pr_sum > 0)
    return {
        "precision": (100 * precision).tolist(),
        "recall": (100 * recall).tolist(),
        "f1": (100 * f1).tolist(),
        "macro_precision": float(100 * precision.mean()),
        "macro_recall": float(100 * recall.mean()),
        "macro_f1": float(100 * f1.mean()),
    }


def report_from_predictions(y_true: np.ndarray, y_pred: np.ndarray,
                            class_names: list, config: dict | None = None,
                            seed: int = 0) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    c = len(class_names)
    counts = np.bincount(y_true, minlength=c)
    if np.any(counts == 0):
        empty = [class_names[i] for i in np.nonzero(counts == 0)[0]]
        raise ValueError(f"holdout classes with no samples: {empty}")
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    m = metrics_from_confusion(cm)
    return EvalReport(class_names=list(class_names), confusion=cm.tolist(),
                      precision=m["precision"], recall=m["recall"], f1=m["f1"],
                      macro_precision=m["macro_precision"],
                      macro_recall=m["macro_recall"], macro_f1=m["macro_f1"],
                      config=config or {}, seed=seed)


def evaluate(classifier: TrainedClassifier, images: np.ndarray,
             labels: np.ndarray, class_names: list) -> EvalReport:
    """Score the classifier on a real holdout set."""
    if list(class_names) != list(classifier.class_names):
        raise ValueError("holdout class map does not match the classifier's")
    preds = classifier.predict(images)
    return report_from_predictions(labels, preds, class_names,
                                   config=asdict(classifier.config),
                                   seed=classifier.config.seed)


def compare_runs(report_a: EvalReport, report_b: EvalReport) -> dict:
    """Side-by-side deltas (b minus a); raw numbers only, no statistics."""
    if report_a.class_names != report_b.class_names:
        raise ValueError("reports cover different class maps")
    per_class = [{
        "class_name": name,
        "precision_delta": report_b.precision[i] - report_a.precision[i],
        "recall_delta": report_b.recall[i] - report_a.recall[i],
        "f1_delta": report_b.f1[i] - report_a.f1[i],
    } for i, name in enumerate(report_a.class_names)]
    return {
        "class_names": list(report_a.class_names),
        "per_class": per_class,
        "macro_precision_delta": report_b.macro_precision - report_a.macro_precision,
        "macro_recall_delta": report_b.macro_recall - report_a.macro_recall,
        "macro_f1_delta": report_b.macro_f1 - report_a.macro_f1,
        "seeds": {"a": report_a.seed, "b": report_b.seed},
    }


def render_report_text(report: EvalReport, title: str = "evaluation") -> str:
    lines = [title,
             f"{'Class':<24}{'Precision (%)':>15}{'Recall (%)':>13}{'F1 Score (%)':>15}"]
    for i, name in enumerate(report.class_names):
        lines.append(f"{name:<24}{report.precision[i]:>15.2f}"
                     f"{report.recall[i]:>13.2f}{report.f1[i]:>15.2f}")
    lines.append(f"{'macro avg':<24}{report.macro_precision:>15.2f}"
                 f"{report.macro_recall:>13.2f}{report.macro_f1:>15.2f}")
    return "\n".join(lines) + "\n"


def render_comparison_text(cmp: dict, label_a: str = "a", label_b: str = "b") -> str:
    lines = [f"comparison: {label_b} minus {label_a}",
             f"{'Class':<24}{'dPrecision':>12}{'dRecall':>12}{'dF1':>12}"]
    for row in cmp["per_class"]:
        lines.append(f"{row['class_name']:<24}{row['precision_delta']:>12.2f}"
                     f"{row['recall_delta']:>12.2f}{row['f1_delta']:>12.2f}")
    lines.append(f"{'macro avg':<24}{cmp['macro_precision_delta']:>12.2f}"
                 f"{cmp['macro_recall_delta']:>12.2f}{cmp['macro_f1_delta']:>12.2f}")
    return "\n".join(lines) + "\n"


def save_report(report: EvalReport, path) -> None:
    doc = {"schema_version": REPORT_SCHEMA_VERSION, **asdict(report)}
    atomic_write_json(path, doc)


def load_report(path) -> EvalReport:
    doc = read_json(path)
    if doc.pop("schema_version", None) != REPORT_SCHEMA_VERSION:
        raise ValueError("unsupported report schema")
    return EvalReport(**doc)
