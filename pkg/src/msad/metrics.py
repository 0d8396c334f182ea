"""Detection and localization metrics, and the per-category evaluation report."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .core import MODALITY_ORDER, DataError, Modality, ModalityLabels, derive_object_label, subset_key
from .fusion import GatingModel, assemble_score_vectors, gate_score, rule_fuse
from .ingest import DatasetIndex, load_mask, load_point_labels
from .memory_bank import render_score_map

log = logging.getLogger(__name__)


def _prepare(scores, labels, need_negative: bool = True):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("no positive labels")
    if need_negative and n_pos == len(y):
        raise ValueError("no negative labels")
    return s, y, n_pos


def _sweep(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) at each distinct threshold, scores descending."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y, dtype=np.int64)[last]
    fp = (last + 1) - tp
    return tp, fp


def auroc(scores, labels) -> float:
    """Area under the ROC curve; ties earn half credit (Mann-Whitney)."""
    s, y, n_pos = _prepare(scores, labels)
    n_neg = len(y) - n_pos
    tp, fp = _sweep(s, y)
    tp_prev = np.r_[0, tp[:-1]]
    dfp = np.diff(np.r_[0, fp])
    # twice the trapezoid area, in units of 1/(n_pos * n_neg); exact integers
    twice_area = int(np.sum(dfp * (tp + tp_prev), dtype=np.int64))
    return twice_area / (2 * n_pos * n_neg)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s, y, n_pos = _prepare(scores, labels)
    tp, fp = _sweep(s, y)
    return np.r_[0.0, fp / (len(y) - n_pos)], np.r_[0.0, tp / n_pos]


def f1_max(scores, labels) -> float:
    """Best F1 over thresholds at each distinct score, predicting ``score >= t``."""
    s, y, n_pos = _prepare(scores, labels, need_negative=False)
    tp, fp = _sweep(s, y)
    return float(np.max(2 * tp / (tp + fp + n_pos)))


def aupr(scores, labels) -> float:
    """Step-wise (non-interpolated) area under the precision-recall curve."""
    s, y, n_pos = _prepare(scores, labels, need_negative=False)
    tp, fp = _sweep(s, y)
    dtp = np.diff(np.r_[0, tp])
    return float(np.sum(dtp / n_pos * (tp / (tp + fp))))


# ----------------------------------------------------------------------------
# Evaluation


class ScoreStore(Protocol):
    """Read access to per-sample score artifacts produced by the scoring stage."""

    def object_scores(self, category: str, modality: Modality) -> dict[str, dict]: ...

    def patch_scores(self, category: str, modality: Modality, key: str) -> np.ndarray: ...

    def gate(self, category: str, subset: tuple[Modality, ...]) -> GatingModel | None: ...


@dataclass
class Configuration:
    subset: tuple[Modality, ...]
    fusion: str = "gate"  # gate | max | mean; single-modality subsets use the raw score

    @property
    def name(self) -> str:
        return subset_key(self.subset)


def default_configurations(modalities: Sequence[Modality], fusion: str = "gate") -> list[Configuration]:
    """Single, dual and triple subsets of ``modalities`` in canonical order."""
    mods = [m for m in MODALITY_ORDER if m in modalities]
    configs = [Configuration((m,), fusion) for m in mods]
    for i in range(len(mods)):
        for j in range(i + 1, len(mods)):
            configs.append(Configuration((mods[i], mods[j]), fusion))
    if len(mods) == 3:
        configs.append(Configuration(tuple(mods), fusion))
    return configs


@dataclass
class EvalReport:
    categories: list[str]
    configurations: list[str]
    modalities: list[str]
    object_auroc: dict[str, dict[str, float]] = field(default_factory=dict)
    # AUROC of a single-modality configuration on normals vs anomalies that are
    # not annotated in that modality
    invisible_auroc: dict[str, dict[str, float | None]] = field(default_factory=dict)
    localization: dict[str, dict[str, dict[str, float | None]]] = field(default_factory=dict)
    object_scores: dict[str, dict[str, dict]] = field(default_factory=dict)

    def mean_row(self) -> dict:
        def avg(values):
            vals = [v for v in values if v is not None]
            return float(np.mean(vals)) if vals else None

        obj = {c: avg(self.object_auroc[cat][c] for cat in self.categories) for c in self.configurations}
        inv = {m: avg(self.invisible_auroc[cat].get(m) for cat in self.categories) for m in self.modalities}
        loc = {
            m: {k: avg(self.localization[cat][m][k] for cat in self.categories) for k in ("auroc", "f1_max", "aupr")}
            for m in self.modalities
        }
        return {"object_auroc": obj, "invisible_auroc": inv, "localization": loc}

    def to_json(self, include_scores: bool = False) -> dict:
        doc = {
            "categories": self.categories,
            "configurations": self.configurations,
            "modalities": self.modalities,
            "object_auroc": self.object_auroc,
            "invisible_auroc": self.invisible_auroc,
            "localization": self.localization,
            "mean": self.mean_row(),
        }
        if include_scores:
            doc["object_scores"] = self.object_scores
        return doc

    @classmethod
    def from_json(cls, doc: dict, object_scores: dict | None = None) -> "EvalReport":
        return cls(
            list(doc["categories"]),
            list(doc["configurations"]),
            list(doc["modalities"]),
            doc["object_auroc"],
            doc["invisible_auroc"],
            doc["localization"],
            object_scores or {},
        )

    def to_text(self) -> str:
        def fmt(v):
            return "  -  " if v is None else f"{v:.3f}"

        mean = self.mean_row()
        width = max([len("Category")] + [len(c) for c in self.categories]) + 2
        out = io.StringIO()
        out.write("Object-level AUROC\n")
        cols = self.configurations
        cw = max(7, *(len(c) + 2 for c in cols))
        out.write("Category".ljust(width) + "".join(c.rjust(cw) for c in cols) + "\n")
        for cat in self.categories:
            out.write(cat.ljust(width) + "".join(fmt(self.object_auroc[cat][c]).rjust(cw) for c in cols) + "\n")
        out.write("Mean".ljust(width) + "".join(fmt(mean["object_auroc"][c]).rjust(cw) for c in cols) + "\n\n")

        out.write("Localization (pixel / point level)\n")
        heads = [f"{k}:{m}" for k in ("AUROC", "F1max", "AUPR") for m in self.modalities]
        lw = max(9, *(len(h) + 2 for h in heads))
        out.write("Category".ljust(width) + "".join(h.rjust(lw) for h in heads) + "\n")
        keys = [(k, m) for k in ("auroc", "f1_max", "aupr") for m in self.modalities]
        for cat in self.categories:
            row = [fmt(self.localization[cat][m][k]) for k, m in keys]
            out.write(cat.ljust(width) + "".join(r.rjust(lw) for r in row) + "\n")
        row = [fmt(mean["localization"][m][k]) for k, m in keys]
        out.write("Mean".ljust(width) + "".join(r.rjust(lw) for r in row) + "\n")
        return out.getvalue()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "kind", "name", "metric", "value"])
        mean = self.mean_row()
        rows = [(cat, self.object_auroc[cat], self.invisible_auroc[cat], self.localization[cat]) for cat in self.categories]
        rows.append(("mean", mean["object_auroc"], mean["invisible_auroc"], mean["localization"]))
        for cat, obj, inv, loc in rows:
            for c in self.configurations:
                w.writerow([cat, "object", c, "auroc", _csv_val(obj[c])])
            for m in self.modalities:
                w.writerow([cat, "invisible", m, "auroc", _csv_val(inv.get(m))])
                for k in ("auroc", "f1_max", "aupr"):
                    w.writerow([cat, "localization", m, k, _csv_val(loc[m][k])])
        return buf.getvalue()


def _csv_val(v):
    return "" if v is None else repr(float(v))


def _safe(fn, scores, labels):
    try:
        return fn(scores, labels)
    except ValueError:
        return None


def sample_modality_labels(index: DatasetIndex, category: str) -> dict[str, ModalityLabels]:
    """Ground-truth per-modality labels for each test sample of a category."""
    cat = index[category]
    out = {}
    for ref in cat.test:
        labels = {}
        for m in MODALITY_ORDER:
            if m in index.modalities and m in ref.paths:
                labels[m] = 0 if ref.is_normal else int(cat.annotation(ref, m) is not None)
            elif cat.annotation(ref, m) is not None:
                # unselected modality: still decides whether the object is anomalous
                labels[m] = 1
        out[ref.key] = ModalityLabels.from_mapping(labels)
    return out


def evaluate(
    index: DatasetIndex,
    store: ScoreStore,
    configurations: Sequence[Configuration],
    modalities: Sequence[Modality],
    sigma: float = 4.0,
) -> EvalReport:
    """Object AUROC per category and configuration plus per-modality localization."""
    cats = sorted(index.categories)
    report = EvalReport(cats, [c.name for c in configurations], [m.short for m in modalities])
    for cat in cats:
        mlabels = sample_modality_labels(index, cat)
        obj_label = {k: derive_object_label(v) for k, v in mlabels.items()}
        tables = {m: store.object_scores(cat, m) for m in modalities}
        for m, table in tables.items():
            expected = {ref.key for ref in index[cat].test if m in ref.paths}
            missing = expected - set(table)
            if missing:
                raise DataError(f"{cat}/{m.dirname}: missing scores for {sorted(missing)[:3]}")
        report.object_auroc[cat] = {}
        report.object_scores[cat] = {}
        for config in configurations:
            if len(config.subset) == 1:
                m = config.subset[0]
                ids = sorted(tables[m])
                fused = np.array([tables[m][i]["raw"] for i in ids])
            else:
                norm = {m: {k: v["normalized"] for k, v in tables[m].items()} for m in config.subset}
                ids, vecs = assemble_score_vectors(norm, config.subset)
                if config.fusion == "gate":
                    model = store.gate(cat, config.subset)
                    if model is None:
                        raise DataError(f"{cat}: no gating model for {config.name}")
                    fused = np.atleast_1d(gate_score(model, vecs))
                else:
                    fused = np.array([rule_fuse(v, config.fusion) for v in vecs])
            labels = np.array([obj_label[i] for i in ids])
            report.object_auroc[cat][config.name] = _safe(auroc, fused, labels)
            report.object_scores[cat][config.name] = {
                "ids": ids, "scores": [float(x) for x in fused], "labels": [int(x) for x in labels]
            }
        report.invisible_auroc[cat] = {}
        for m in modalities:
            keep = [k for k in sorted(tables[m]) if mlabels[k].get(m) == 0]
            scores = [tables[m][k]["raw"] for k in keep]
            labels = [obj_label[k] for k in keep]
            report.invisible_auroc[cat][m.short] = _safe(auroc, scores, labels)
        report.localization[cat] = {m.short: _localization(index, store, cat, m, sigma) for m in modalities}
    return report


def _localization(index, store, cat, m, sigma) -> dict[str, float | None]:
    table = store.object_scores(cat, m)
    cidx = index[cat]
    all_scores, all_labels = [], []
    for ref in cidx.test:
        if m not in ref.paths:
            continue
        info = table[ref.key]
        patch = store.patch_scores(cat, m, ref.key)
        ann = cidx.annotation(ref, m)
        if m is Modality.POINTCLOUD:
            n = len(patch)
            gt = load_point_labels(ann, n) if ann is not None else np.zeros(n, dtype=np.uint8)
            all_scores.append(patch)
            all_labels.append(gt.astype(bool))
        else:
            h, w = info["shape"]
            dense = render_score_map(patch, tuple(info["grid"]), (h, w), sigma)
            gt = load_mask(ann, (h, w)) > 0 if ann is not None else np.zeros((h, w), dtype=bool)
            all_scores.append(dense.reshape(-1))
            all_labels.append(gt.reshape(-1))
    if not all_scores:
        return {"auroc": None, "f1_max": None, "aupr": None}
    s = np.concatenate(all_scores)
    y = np.concatenate(all_labels)
    return {"auroc": _safe(auroc, s, y), "f1_max": _safe(f1_max, s, y), "aupr": _safe(aupr, s, y)}


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)
