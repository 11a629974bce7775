"""Confusion metrics, AP, threshold sweep, and the protocol inflation audit.

Two scoring protocols:
  clean    : the target raster is scored as given and -1 pixels are excluded
             from every count;
  inflated : the target becomes union(previous-day mask, target == 1), -1
             relabels to 0, and every pixel is counted.
Pixels are pooled across the whole split (micro-averaging) before any ratio
is formed. All inputs are plain numpy arrays; probabilities live in [0, 1].
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EmptyMaskWarning, ShapeMismatchError

PROTOCOLS = ("clean", "inflated")
THRESHOLDS = tuple(i / 20 for i in range(1, 20))  # 0.05 .. 0.95

# sentinel for AP when the pooled split has no positive pixels
AP_UNDEFINED = -1.0

REPORT_CSV_HEADER = "model,protocol,threshold,tp,fp,fn,tn,precision,recall,f1,auc_pr"
SWEEP_CSV_HEADER = "threshold,tp,fp,fn,tn,precision,recall,f1"
AUDIT_CSV_HEADER = "model,clean_f1,inflated_f1,inflation_pct"


@dataclass
class MetricsReport:
    protocol: str
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    auc_pr: float
    model: str = ""

    def csv_row(self) -> str:
        return (f"{self.model},{self.protocol},{self.threshold:g},{self.tp},{self.fp},"
                f"{self.fn},{self.tn},{self.precision!r},{self.recall!r},{self.f1!r},"
                f"{self.auc_pr!r}")


def _flat(probs, prev_mask, target):
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    pm = np.asarray(prev_mask).reshape(-1)
    t = np.asarray(target).reshape(-1)
    if not (p.size == pm.size == t.size):
        raise ShapeMismatchError(
            f"probs/prev/target sizes differ: {p.size}/{pm.size}/{t.size}"
        )
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ConfigurationError("probabilities must lie in [0, 1]")
    return p, pm, t


def effective_target(prev_mask, target, protocol: str):
    """Per-protocol binary target and inclusion mask (flattened)."""
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    pm = np.asarray(prev_mask).reshape(-1)
    t = np.asarray(target).reshape(-1)
    if protocol == "clean":
        eff = (t == 1)
        include = (t != -1)
    else:
        eff = (t == 1) | (pm >= 0.5)
        include = np.ones(t.shape, dtype=bool)
    return eff, include


def confusion(probs, prev_mask, target, protocol: str, threshold: float) -> dict:
    p, pm, t = _flat(probs, prev_mask, target)
    eff, include = effective_target(pm, t, protocol)
    pred = p >= threshold
    pred = pred[include]
    eff = eff[include]
    tp = int(np.sum(pred & eff))
    fp = int(np.sum(pred & ~eff))
    fn = int(np.sum(~pred & eff))
    tn = int(np.sum(~pred & ~eff))
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn}


def prf1(counts: dict) -> tuple[float, float, float]:
    """Precision/recall/F1 with the 0-denominator-means-0 convention."""
    tp, fp, fn = counts["tp"], counts["fp"], counts["fn"]
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def auc_pr(probs, targets, include=None) -> float:
    """Average precision: mean of precision-at-rank over positives.

    Ranking is by descending score; ties keep ascending pixel order (stable).
    No positives -> AP_UNDEFINED sentinel plus a warning.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=bool).reshape(-1)
    if include is not None:
        inc = np.asarray(include, dtype=bool).reshape(-1)
        p, t = p[inc], t[inc]
    if not t.any():
        warnings.warn("AP undefined: no positive pixels", EmptyMaskWarning)
        return AP_UNDEFINED
    order = np.argsort(-p, kind="stable")
    hits = t[order]
    ranks = np.arange(1, hits.size + 1)
    cum = np.cumsum(hits)
    return float((cum[hits] / ranks[hits]).mean())


def threshold_sweep(probs, prev_mask, target, protocol: str):
    """Score all 19 thresholds; best F1 wins, lowest threshold breaks ties."""
    rows = []
    best_thr, best_f1 = THRESHOLDS[0], -1.0
    for thr in THRESHOLDS:
        counts = confusion(probs, prev_mask, target, protocol, thr)
        precision, recall, f1 = prf1(counts)
        rows.append({"threshold": thr, **counts,
                     "precision": precision, "recall": recall, "f1": f1})
        if f1 > best_f1:
            best_f1, best_thr = f1, thr
    return best_thr, rows


def evaluate(probs, prev_mask, target, protocol: str, model: str = "") -> tuple[MetricsReport, list]:
    """Full protocol evaluation: sweep, best-threshold confusion, AP."""
    best_thr, rows = threshold_sweep(probs, prev_mask, target, protocol)
    counts = confusion(probs, prev_mask, target, protocol, best_thr)
    precision, recall, f1 = prf1(counts)
    eff, include = effective_target(prev_mask, target, protocol)
    ap = auc_pr(probs, eff, include)
    report = MetricsReport(protocol=protocol, threshold=best_thr, **counts,
                           precision=precision, recall=recall, f1=f1,
                           auc_pr=ap, model=model)
    return report, rows


def inflation_audit(probs, prev_mask, target, model: str = "") -> dict:
    """Clean vs inflated F1 for one predictor, each at its own best threshold.

    inflation_pct is None (rendered "undefined") when clean F1 is 0.
    """
    clean_report, _ = evaluate(probs, prev_mask, target, "clean", model)
    inflated_report, _ = evaluate(probs, prev_mask, target, "inflated", model)
    if clean_report.f1 > 0:
        pct = (inflated_report.f1 - clean_report.f1) / clean_report.f1 * 100.0
    else:
        pct = None
    return {"model": model, "clean": clean_report, "inflated": inflated_report,
            "inflation_pct": pct}


def audit_csv_row(audit: dict) -> str:
    pct = audit["inflation_pct"]
    pct_s = "undefined" if pct is None else repr(pct)
    return (f"{audit['model']},{audit['clean'].f1!r},"
            f"{audit['inflated'].f1!r},{pct_s}")
