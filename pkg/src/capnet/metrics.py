"""Concordance correlation coefficient, the 1 - CCC loss, and Table-style reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

EPS = 1e-8


@dataclass(frozen=True)
class CCCStats:
    mu_pred: float
    mu_label: float
    var_pred: float
    var_label: float
    cov: float
    ccc: float
    n: int


def _guard(den, eps: float = EPS):
    # eps only floors a degenerate (all-constant) denominator; well-conditioned
    # inputs are not distorted
    return np.maximum(den, eps)


def _check_pair(pred, label):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    label = np.asarray(label, dtype=np.float64).ravel()
    if pred.shape != label.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {label.size} labels")
    if pred.size < 2:
        raise ValueError(f"CCC needs at least 2 samples, got {pred.size}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(label))):
        raise ValueError("CCC inputs must be finite")
    return pred, label


def ccc(pred, label, ddof: int = 0, eps: float = EPS) -> CCCStats:
    """CCC = 2k / max(var_pred + var_label + (mu_pred - mu_label)^2, eps).

    ``ddof=0`` uses population moments; ``ddof=1`` gives the sample-moment variant.
    """
    pred, label = _check_pair(pred, label)
    n = pred.size
    mp, ml = pred.mean(), label.mean()
    dp, dl = pred - mp, label - ml
    vp = float(dp @ dp) / (n - ddof)
    vl = float(dl @ dl) / (n - ddof)
    k = float(dp @ dl) / (n - ddof)
    value = float(2.0 * k / _guard(vp + vl + (mp - ml) ** 2, eps))
    return CCCStats(float(mp), float(ml), vp, vl, k, value, n)


class CCCAccumulator:
    """Streaming (Welford-style) CCC moments for one output dimension.

    Two accumulators over disjoint data merge into the accumulator of the union.
    """

    def __init__(self):
        self.n = 0
        self.mean_p = 0.0
        self.mean_l = 0.0
        self.m2_p = 0.0
        self.m2_l = 0.0
        self.c = 0.0

    def update(self, pred, label) -> "CCCAccumulator":
        pred = np.asarray(pred, dtype=np.float64).ravel()
        label = np.asarray(label, dtype=np.float64).ravel()
        if pred.shape != label.shape:
            raise ValueError(f"length mismatch: {pred.size} vs {label.size}")
        if pred.size == 0:
            return self
        other = CCCAccumulator()
        other.n = pred.size
        other.mean_p, other.mean_l = float(pred.mean()), float(label.mean())
        dp, dl = pred - other.mean_p, label - other.mean_l
        other.m2_p, other.m2_l, other.c = float(dp @ dp), float(dl @ dl), float(dp @ dl)
        return self.merge(other)

    def merge(self, other: "CCCAccumulator") -> "CCCAccumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.__dict__.update(other.__dict__)
            return self
        n = self.n + other.n
        dp = other.mean_p - self.mean_p
        dl = other.mean_l - self.mean_l
        w = self.n * other.n / n
        self.m2_p += other.m2_p + dp * dp * w
        self.m2_l += other.m2_l + dl * dl * w
        self.c += other.c + dp * dl * w
        self.mean_p += dp * other.n / n
        self.mean_l += dl * other.n / n
        self.n = n
        return self

    def stats(self, ddof: int = 0, eps: float = EPS) -> CCCStats:
        if self.n < 2:
            raise ValueError(f"CCC needs at least 2 samples, got {self.n}")
        d = self.n - ddof
        vp, vl, k = self.m2_p / d, self.m2_l / d, self.c / d
        value = float(2.0 * k / _guard(vp + vl + (self.mean_p - self.mean_l) ** 2, eps))
        return CCCStats(float(self.mean_p), float(self.mean_l), float(vp), float(vl), float(k), value, self.n)


def ccc_loss_and_grad(preds: np.ndarray, labels: np.ndarray, eps: float = EPS):
    """Batch loss ``1 - mean(CCC_valence, CCC_arousal)`` and its gradient w.r.t. ``preds``."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.ndim != 2:
        raise ValueError(f"shape mismatch: preds {preds.shape}, labels {labels.shape}")
    N, K = preds.shape
    if N < 2:
        raise ValueError(f"a batch needs N >= 2 to define CCC, got N={N}")
    mp, ml = preds.mean(axis=0), labels.mean(axis=0)
    dp, dl = preds - mp, labels - ml
    vp = (dp * dp).mean(axis=0)
    vl = (dl * dl).mean(axis=0)
    k = (dp * dl).mean(axis=0)
    den = _guard(vp + vl + (mp - ml) ** 2, eps)
    cccs = 2.0 * k / den
    dccc = (2.0 / (N * den)) * dl - (4.0 * k / (N * den * den)) * (dp + (mp - ml))
    return float(1.0 - cccs.mean()), -dccc / K


@dataclass(frozen=True)
class CCCReport:
    valence: CCCStats
    arousal: CCCStats

    @property
    def mean_ccc(self) -> float:
        return (self.valence.ccc + self.arousal.ccc) / 2.0

    def row(self) -> str:
        return f"{self.valence.ccc:.3f} / {self.arousal.ccc:.3f} / {self.mean_ccc:.3f}"


def report_from_arrays(preds, labels, ddof: int = 0) -> CCCReport:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return CCCReport(ccc(preds[:, 0], labels[:, 0], ddof), ccc(preds[:, 1], labels[:, 1], ddof))


def evaluate(predict: Callable[[list], np.ndarray], items: Iterable, batch: int = 128,
             label_of: Callable = lambda item: item.label) -> CCCReport:
    """Run ``predict`` over ``items`` in batches and compute one global CCC per dimension.

    ``predict`` maps a list of items to an (n, 2) array. CCC is computed over
    the whole stream, not averaged over batches.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    acc = (CCCAccumulator(), CCCAccumulator())
    chunk: list = []

    def flush():
        out = np.asarray(predict(chunk), dtype=np.float64)
        lab = np.array([tuple(label_of(it)) for it in chunk], dtype=np.float64)
        for j in range(2):
            acc[j].update(out[:, j], lab[:, j])
        chunk.clear()

    for item in items:
        chunk.append(item)
        if len(chunk) == batch:
            flush()
    if chunk:
        flush()
    if acc[0].n == 0:
        raise ValueError("cannot evaluate an empty stream")
    return CCCReport(acc[0].stats(), acc[1].stats())


def pcc(pred, label) -> float:
    """Pearson correlation; debugging aid only."""
    pred, label = _check_pair(pred, label)
    return float(np.corrcoef(pred, label)[0, 1])


# -- rendering ---------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    model: str
    input: str
    window: Optional[str]
    report: CCCReport


_COLS = ("Model", "Input", "window size (seconds)", "Valence", "Arousal", "Mean")


def render_table(rows: Sequence[ReportRow]) -> str:
    body = [(r.model, r.input, r.window or "-", f"{r.report.valence.ccc:.3f}",
             f"{r.report.arousal.ccc:.3f}", f"{r.report.mean_ccc:.3f}") for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(_COLS)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    lines = [fmt.format(*_COLS), "  ".join("-" * w for w in widths)]
    lines += [fmt.format(*b) for b in body]
    return "\n".join(lines)


def render_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["model", "window", "valence_ccc", "arousal_ccc", "mean_ccc"])
    for r in rows:
        wr.writerow([r.model, r.window or "-", repr(r.report.valence.ccc),
                     repr(r.report.arousal.ccc), repr(r.report.mean_ccc)])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append({"model": rec["model"], "window": rec["window"],
                    **{k: float(rec[k]) for k in ("valence_ccc", "arousal_ccc", "mean_ccc")}})
    return out
