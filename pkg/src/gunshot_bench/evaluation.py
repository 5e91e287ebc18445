"""Evaluation protocol: stratified 60/20/20 splits, 5-fold plans, per-class
precision/recall/F1, average precision and mAP, and the two gun-type metric
conditionings:

- "overall": every true gunshot counts; a detection miss is a false negative
  for its true class and a typed false alarm is a false positive for the
  predicted class.
- "relevant": restricted to examples that are true gunshots AND were
  detected as gunshots, so it isolates the type head.

Zero-division convention throughout: 0/0 -> 0, flagged in the report.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParam
from .manifest import CLASS_NAMES

SCHEMA_VERSION = 1
N_CLASSES = len(CLASS_NAMES)
DETECTION_NAMES = ["no_gunshot", "gunshot"]


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int

    def to_dict(self):
        return {"train_ids": self.train_ids, "val_ids": self.val_ids,
                "test_ids": self.test_ids, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["train_ids"]), list(d["val_ids"]), list(d["test_ids"]),
                   int(d["seed"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _strata(rows):
    """Group row ids by stratum (class name, or no_gunshot), fixed order."""
    groups = {name: [] for name in CLASS_NAMES + ["no_gunshot"]}
    for r in rows:
        key = r.class_name if r.class_name else "no_gunshot"
        groups[key].append(r.id)
    return {k: v for k, v in groups.items() if v}


def stratified_split(rows, ratios=(0.6, 0.2, 0.2), seed=0):
    """Per-class shuffle and proportional allocation; remainders go to train."""
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise InvalidParam("ratios must be three values summing to 1")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for _, ids in _strata(rows).items():
        ids = list(ids)
        rng.shuffle(ids)
        n = len(ids)
        n_val = int(np.floor(n * ratios[1]))
        n_test = int(np.floor(n * ratios[2]))
        n_train = n - n_val - n_test
        train += ids[:n_train]
        val += ids[n_train : n_train + n_val]
        test += ids[n_train + n_val :]
    return SplitSpec(train, val, test, seed)


@dataclass
class FoldPlan:
    folds: list               # k lists of ids
    seed: int

    def train_ids(self, i):
        return [x for j, fold in enumerate(self.folds) if j != i for x in fold]


def kfold(ids_by_class, k=5, seed=0):
    """Stratified k folds: per-class shuffle, then greedy assignment to the
    currently smallest fold (ties to the lowest index), which keeps overall
    fold sizes within one of each other and spreads each class across folds."""
    if k < 2:
        raise InvalidParam("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for _, ids in ids_by_class.items():
        ids = list(ids)
        rng.shuffle(ids)
        for x in ids:
            sizes = [len(f) for f in folds]
            folds[int(np.argmin(sizes))].append(x)
    return FoldPlan(folds, seed)


# ---------------------------------------------------------------------------
# confusion-matrix metrics
# ---------------------------------------------------------------------------

def prf1(confusion):
    """Per-class (precision, recall, F1) from a K x K confusion matrix
    (rows true, columns predicted). 0/0 -> 0."""
    m = np.asarray(confusion, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidParam("confusion matrix must be square")
    tp = np.diag(m)
    pred = m.sum(axis=0)
    supp = m.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(pred > 0, tp / pred, 0.0)
        r = np.where(supp > 0, tp / supp, 0.0)
        f1 = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return [(float(p[i]), float(r[i]), float(f1[i])) for i in range(m.shape[0])]


def average_precision(scores, positives, ids=None):
    """Non-interpolated AP: mean of precision@rank over positive ranks.

    Sorting is by score descending with ties broken stably by id. Returns
    None (with a warning) when there are no positives."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape:
        raise InvalidParam("scores and positives must align")
    n_pos = int(positives.sum())
    if n_pos == 0:
        warnings.warn("average_precision: no positives; AP undefined", stacklevel=2)
        return None
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -scores))
    hits = positives[order]
    ranks = np.arange(1, len(scores) + 1)
    precision_at = np.cumsum(hits) / ranks
    return float(precision_at[hits].sum() / n_pos)


def mean_ap(per_class_ap):
    """Unweighted mean over classes whose AP is defined."""
    defined = [a for a in per_class_ap if a is not None]
    if not defined:
        warnings.warn("mean_ap: no class had a defined AP", stacklevel=2)
        return None
    return float(np.mean(defined))


# ---------------------------------------------------------------------------
# overall / relevant conditioning
# ---------------------------------------------------------------------------

def _as_arrays(true_class, pred_gun, pred_class):
    t = [NGI if c is None else int(c) for c in true_class]
    return (np.asarray(t), np.asarray(pred_gun, dtype=bool),
            np.asarray(pred_class, dtype=np.int64))


NGI = -1   # sentinel index for "no gunshot" rows/columns


def overall_confusion(true_class, pred_gun, pred_class, n_classes=N_CLASSES):
    """(K+1)x(K+1) matrix; index K holds the no-gunshot row/column.
    A miss lands in column K of its true class row; a typed false alarm
    lands in row K under the predicted class."""
    t, g, c = _as_arrays(true_class, pred_gun, pred_class)
    m = np.zeros((n_classes + 1, n_classes + 1), dtype=np.int64)
    for ti, gi, ci in zip(t, g, c):
        row = n_classes if ti == NGI else ti
        col = ci if gi else n_classes
        m[row, col] += 1
    return m


def overall_metrics(true_class, pred_gun, pred_class, n_classes=N_CLASSES):
    """Per-class P/R/F1 where detection errors propagate into the type task."""
    m = overall_confusion(true_class, pred_gun, pred_class, n_classes)
    tp = np.diag(m)[:n_classes]
    pred = m.sum(axis=0)[:n_classes]
    supp = m.sum(axis=1)[:n_classes]
    out = []
    for i in range(n_classes):
        p = tp[i] / pred[i] if pred[i] > 0 else 0.0
        r = tp[i] / supp[i] if supp[i] > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        out.append((float(p), float(r), float(f1)))
    return out, m


def relevant_confusion(true_class, pred_gun, pred_class, n_classes=N_CLASSES):
    """K x K type confusion over true gunshots that were detected as gunshots."""
    t, g, c = _as_arrays(true_class, pred_gun, pred_class)
    keep = (t != NGI) & g
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for ti, ci in zip(t[keep], c[keep]):
        m[ti, ci] += 1
    return m


def relevant_metrics(true_class, pred_gun, pred_class, n_classes=N_CLASSES):
    """Per-class P/R/F1 conditioned on correct detection, plus the list of
    classes with zero support in the conditioned set (reported as 0)."""
    m = relevant_confusion(true_class, pred_gun, pred_class, n_classes)
    zero_support = [CLASS_NAMES[i] for i in range(n_classes) if m[i].sum() == 0]
    return prf1(m), m, zero_support


def detection_confusion(true_is_gun, pred_is_gun):
    """2x2 matrix ordered [no_gunshot, gunshot] on both axes."""
    t = np.asarray(true_is_gun, dtype=bool)
    p = np.asarray(pred_is_gun, dtype=bool)
    m = np.zeros((2, 2), dtype=np.int64)
    for ti, pi in zip(t, p):
        m[int(ti), int(pi)] += 1
    return m


# ---------------------------------------------------------------------------
# report assembly and emission
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    schema_version: int
    dataset_hash: str
    split_seed: int | None
    model_meta: dict
    threshold: float
    detection: dict
    type_overall: dict
    type_relevant: dict
    ap_per_class: dict
    mean_ap: float | None
    flags: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "dataset_hash": self.dataset_hash,
            "split_seed": self.split_seed,
            "model_meta": self.model_meta,
            "threshold": self.threshold,
            "detection": self.detection,
            "type_overall": self.type_overall,
            "type_relevant": self.type_relevant,
            "ap_per_class": self.ap_per_class,
            "mean_ap": self.mean_ap,
            "flags": self.flags,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["schema_version"], d["dataset_hash"], d["split_seed"],
                   d["model_meta"], d["threshold"], d["detection"],
                   d["type_overall"], d["type_relevant"], d["ap_per_class"],
                   d["mean_ap"], d.get("flags", []), d.get("config", {}))


def _prf_block(names, triples):
    return {name: {"precision": p, "recall": r, "f1": f1}
            for name, (p, r, f1) in zip(names, triples)}


def build_report(true_class, pred_gun, pred_class, scores, *, threshold=0.5,
                 dataset_hash="", split_seed=None, model_meta=None, config=None):
    """Assemble the full evaluation report.

    true_class: per-example class index or None; pred_gun: decided detection;
    pred_class: argmax type index; scores: [n, K] ranking scores for AP."""
    t = [NGI if c is None else int(c) for c in true_class]
    t_arr = np.asarray(t)
    det_conf = detection_confusion(t_arr != NGI, pred_gun)
    det_prf = prf1(det_conf)

    ov_prf, ov_conf = overall_metrics(true_class, pred_gun, pred_class)
    rel_prf, rel_conf, zero_support = relevant_metrics(true_class, pred_gun, pred_class)

    scores = np.asarray(scores, dtype=np.float64)
    ap = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for ci, name in enumerate(CLASS_NAMES):
            ap[name] = average_precision(scores[:, ci], t_arr == ci)
        m_ap = mean_ap(list(ap.values()))

    flags = []
    if zero_support:
        flags.append("zero_support_relevant:" + ",".join(zero_support))
    if any(v is None for v in ap.values()):
        flags.append("undefined_ap:" + ",".join(k for k, v in ap.items() if v is None))

    return EvalReport(
        schema_version=SCHEMA_VERSION,
        dataset_hash=dataset_hash,
        split_seed=split_seed,
        model_meta=model_meta or {},
        threshold=float(threshold),
        detection={"confusion": det_conf.tolist(),
                   "per_class": _prf_block(DETECTION_NAMES, det_prf)},
        type_overall={"confusion": ov_conf.tolist(),
                      "per_class": _prf_block(CLASS_NAMES, ov_prf)},
        type_relevant={"confusion": rel_conf.tolist(),
                       "per_class": _prf_block(CLASS_NAMES, rel_prf),
                       "zero_support": zero_support},
        ap_per_class=ap,
        mean_ap=m_ap,
        flags=flags,
        config=config or {},
    )


def macro_f1(per_class_block):
    return float(np.mean([v["f1"] for v in per_class_block.values()]))


def _fmt(x):
    return "   n/a" if x is None else f"{x:6.3f}"


def render_text_report(report):
    """Fixed-width tables: detection block, then gun-type block with the
    Overall and Relevant variants side by side, then AP/mAP."""
    lines = []
    lines.append("Gunshot Detection")
    lines.append(f"{'Class':<16}{'Precision':>10}{'Recall':>10}{'F1':>10}")
    for name in DETECTION_NAMES:
        b = report.detection["per_class"][name]
        lines.append(f"{name:<16}{b['precision']:>10.3f}{b['recall']:>10.3f}{b['f1']:>10.3f}")
    lines.append("")
    lines.append("Gun Type Classification (Overall / Relevant)")
    lines.append(f"{'Class':<16}{'P-ovr':>8}{'P-rel':>8}{'R-ovr':>8}{'R-rel':>8}"
                 f"{'F1-ovr':>8}{'F1-rel':>8}{'AP':>8}")
    for name in CLASS_NAMES:
        o = report.type_overall["per_class"][name]
        r = report.type_relevant["per_class"][name]
        ap = report.ap_per_class[name]
        lines.append(f"{name:<16}{o['precision']:>8.3f}{r['precision']:>8.3f}"
                     f"{o['recall']:>8.3f}{r['recall']:>8.3f}"
                     f"{o['f1']:>8.3f}{r['f1']:>8.3f}{_fmt(ap):>8}")
    lines.append("")
    lines.append(f"mAP: {_fmt(report.mean_ap).strip()}")
    if report.flags:
        lines.append("flags: " + "; ".join(report.flags))
    return "\n".join(lines) + "\n"


def emit_report(report, path, fmt="record-file"):
    """Write a report as a machine-readable record file or a text table.
    Output bytes are deterministic for a fixed report."""
    if fmt == "record-file":
        blob = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    elif fmt == "text-table":
        blob = render_text_report(report)
    else:
        raise InvalidParam(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(blob)


def load_report(path):
    with open(path, encoding="utf-8") as f:
        return EvalReport.from_dict(json.load(f))
