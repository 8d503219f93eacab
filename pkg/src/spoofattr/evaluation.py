"""Classification metrics, confusion analysis and embedding export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import CorpusManifest
from .protocol import EmbeddingSet, ProtocolSpec, read_embeddings, write_embeddings

UMAP_REFERENCE_NEIGHBORS = 50


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def zero_rows(self) -> list[str]:
        return [c for c, s in zip(self.classes, self.support) if s == 0]

    def normalized(self) -> np.ndarray:
        """Rows divided by true-label counts; empty rows stay zero."""
        support = self.support.astype(np.float64)
        out = np.zeros(self.counts.shape, dtype=np.float64)
        nz = support > 0
        out[nz] = self.counts[nz] / support[nz, None]
        return out


def confusion(preds: Sequence[str], truths: Sequence[str], classes: Sequence[str]) -> ConfusionMatrix:
    """counts[i, j] = number of items with truth ``classes[i]`` predicted as ``classes[j]``."""
    if len(preds) != len(truths):
        raise EvaluationError(f"{len(preds)} predictions for {len(truths)} truths")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(preds, truths):
        if p not in index or t not in index:
            raise EvaluationError(f"label {p if p not in index else t!r} not among classes")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(tuple(classes), counts)


def per_class_scores(cm: ConfusionMatrix) -> dict[str, dict[str, float]]:
    tp = np.diag(cm.counts).astype(np.float64)
    predicted = cm.counts.sum(axis=0).astype(np.float64)
    support = cm.support.astype(np.float64)
    scores = {}
    for i, c in enumerate(cm.classes):
        p = tp[i] / predicted[i] if predicted[i] else 0.0
        r = tp[i] / support[i] if support[i] else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        scores[c] = {"precision": p, "recall": r, "f1": f1, "support": int(support[i])}
    return scores


def macro_f1(cm: ConfusionMatrix) -> float:
    if not cm.classes:
        raise EvaluationError("macro F1 needs at least one class")
    return float(np.mean([s["f1"] for s in per_class_scores(cm).values()]))


def micro_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    return float(np.trace(cm.counts) / total) if total else 0.0


def macro_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall; zero-support classes count as 0."""
    if not cm.classes:
        raise EvaluationError("macro accuracy needs at least one class")
    return float(np.mean([s["recall"] for s in per_class_scores(cm).values()]))


def error_analysis(cm: ConfusionMatrix, threshold: float) -> list[tuple[str, str, float]]:
    """Off-diagonal row-normalized rates at or above ``threshold``, largest first."""
    norm = cm.normalized()
    found = []
    for i, t in enumerate(cm.classes):
        for j, p in enumerate(cm.classes):
            if i != j and norm[i, j] >= threshold and norm[i, j] > 0:
                found.append((t, p, float(norm[i, j])))
    found.sort(key=lambda item: -item[2])
    return found


@dataclass
class EvalReport:
    task: str
    classes: list[str]
    per_class: dict[str, dict[str, float]]
    micro_accuracy: float
    macro_accuracy: float
    macro_f1: float
    confusion: ConfusionMatrix
    top_confused: list[tuple[str, str, float]]
    zero_support: list[str] = field(default_factory=list)
    unseen_classes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "classes": self.classes,
            "n_scored": int(self.confusion.counts.sum()),
            "micro_accuracy": self.micro_accuracy,
            "macro_accuracy": self.macro_accuracy,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
            "confusion": self.confusion.counts.tolist(),
            "top_confused": [list(x) for x in self.top_confused],
            "zero_support": self.zero_support,
            "unseen_classes": self.unseen_classes,
        }


def score(preds: Sequence[str], truths: Sequence[str], model_classes: Sequence[str], task: str = "",
          top_k: int = 5, threshold: float = 0.0) -> EvalReport:
    """Build a report; truth classes unknown to the model are appended and always wrong."""
    unseen = sorted(set(truths) - set(model_classes))
    classes = list(model_classes) + unseen
    cm = confusion(preds, truths, classes)
    return EvalReport(
        task=task,
        classes=classes,
        per_class=per_class_scores(cm),
        micro_accuracy=micro_accuracy(cm),
        macro_accuracy=macro_accuracy(cm),
        macro_f1=macro_f1(cm),
        confusion=cm,
        top_confused=error_analysis(cm, threshold)[:top_k],
        zero_support=cm.zero_rows,
        unseen_classes=unseen,
    )


def evaluate(model, manifest: CorpusManifest, protocol: ProtocolSpec, task: str,
             split: str = "eval") -> EvalReport:
    """Score ``model`` (anything with ``class_names`` and ``predict(ids)``) on one split."""
    ids = protocol.task_ids(manifest, task, split)
    if not ids:
        raise EvaluationError(f"{split} split is empty for task {task!r}")
    index = manifest.index()
    truths = [index[i][1].get(task) for i in ids]
    preds = model.predict(ids)
    return score(preds, truths, model.class_names, task)


def write_report(report: EvalReport, out_dir, figures: bool = True) -> list[Path]:
    """Write report.json, confusion TSV/CSV dumps and (optionally) figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "report.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(path)

    cm = report.confusion
    lines = ["truth\\pred\t" + "\t".join(cm.classes)]
    lines += [c + "\t" + "\t".join(str(int(v)) for v in row) for c, row in zip(cm.classes, cm.counts)]
    path = out / "confusion.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(path)

    norm = cm.normalized()
    lines = ["truth,pred,count,rate"]
    for i, t in enumerate(cm.classes):
        for j, p in enumerate(cm.classes):
            lines.append(f"{t},{p},{int(cm.counts[i, j])},{norm[i, j]:.6f}")
    path = out / "confusion_plot.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(path)

    lines = ["class\tprecision\trecall\tf1\tsupport"]
    for c in report.classes:
        s = report.per_class[c]
        lines.append(f"{c}\t{s['precision']:.6f}\t{s['recall']:.6f}\t{s['f1']:.6f}\t{s['support']}")
    path = out / "per_class.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(path)

    if figures:
        from .plotting import plot_confusion
        written.append(plot_confusion(cm, out / "confusion.png", title=f"{report.task} (row-normalized)"))
    return written


# --------------------------------------------------------------------------
# embedding export and 2-D projection


def export_embeddings(model, manifest: CorpusManifest, protocol: ProtocolSpec, split: str, out_stem,
                      task: str | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.emb`` (EMB1) and ``<stem>.labels.tsv`` for one split."""
    ids = protocol.task_ids(manifest, task, split) if task else protocol.ids(split)
    vectors = model.embed(ids)
    stem = Path(out_stem)
    emb_path = stem.with_name(stem.name + ".emb")
    write_embeddings(emb_path, EmbeddingSet(tuple(ids), vectors))
    index = manifest.index()
    lines = ["id\tinput_type\tacoustic_model\tvocoder"]
    for uid in ids:
        lab = index[uid][1]
        lines.append(f"{uid}\t{lab.input_type}\t{lab.acoustic_model}\t{lab.vocoder}")
    label_path = stem.with_name(stem.name + ".labels.tsv")
    label_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return emb_path, label_path


@dataclass
class Projection:
    ids: tuple[str, ...]
    coords: np.ndarray | None
    method: str
    degenerate: bool = False
    explained: tuple[float, float] = (0.0, 0.0)


def pca_2d(vectors: np.ndarray) -> tuple[np.ndarray, bool, tuple[float, float]]:
    """Exact top-2 principal-component scores with a deterministic sign.

    Each component is flipped so its largest-magnitude loading is positive.
    Returns zeros and a degenerate flag when all points coincide.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[0] < 3:
        raise EvaluationError("PCA projection needs at least 3 points")
    centred = x - x.mean(axis=0)
    if not np.any(centred):
        return np.zeros((x.shape[0], 2)), True, (0.0, 0.0)
    cov = centred.T @ centred / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order]
    if comps.shape[1] < 2:
        comps = np.hstack([comps, np.zeros((comps.shape[0], 1))])
    for k in range(comps.shape[1]):
        lead = np.argmax(np.abs(comps[:, k]))
        if comps[lead, k] < 0:
            comps[:, k] = -comps[:, k]
    total = vals.sum()
    explained = tuple(float(vals[i] / total) if total > 0 else 0.0 for i in order)
    explained = (explained + (0.0, 0.0))[:2]
    return centred @ comps, False, explained


def project_2d(emb_file, method: str = "pca", out=None) -> Projection:
    """Project an EMB1 file to 2-D.

    ``external`` writes the raw vectors as TSV for an outside UMAP run and
    records the reference neighbourhood size; no coordinates are produced.
    """
    emb = emb_file if isinstance(emb_file, EmbeddingSet) else read_embeddings(emb_file)
    if method == "pca":
        coords, degenerate, explained = pca_2d(emb.vectors)
        proj = Projection(emb.ids, coords, method, degenerate, explained)
        if out is not None:
            lines = ["id\tx\ty"] + [f"{i}\t{x:.9g}\t{y:.9g}" for i, (x, y) in zip(emb.ids, coords)]
            Path(out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        return proj
    if method == "external":
        if out is not None:
            out = Path(out)
            lines = ["id\t" + "\t".join(f"d{k}" for k in range(emb.dim))]
            lines += [i + "\t" + "\t".join(f"{v:.9g}" for v in row) for i, row in zip(emb.ids, emb.vectors)]
            out.write_text("\n".join(lines) + "\n", encoding="utf-8")
            out.with_name(out.name + ".params.json").write_text(
                json.dumps({"method": "umap", "n_neighbors": UMAP_REFERENCE_NEIGHBORS, "n_components": 2},
                           indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return Projection(emb.ids, None, method)
    raise EvaluationError(f"unknown projection method {method!r}")
