"""Comparison statistics over per-dataset accuracy tables.

Accuracies are compared after half-up rounding to eight decimals. The
signed-rank test drops zero differences, uses the exact null distribution
for up to 12 nonzero differences and a tie-corrected normal approximation
above that.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from itertools import combinations
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgumentError

EXACT_MAX_N = 12
PROVENANCE = ("own-run", "published-table")
_EIGHT_PLACES = Decimal("1e-8")


def round8(x: float) -> float:
    x = float(x)
    if not (0.0 <= x <= 1.0):
        raise InvalidArgumentError(f"accuracy {x} is outside [0, 1]")
    # repr gives the shortest decimal that round-trips, so 0.125 stays 0.125
    return float(Decimal(repr(x)).quantize(_EIGHT_PLACES, rounding=ROUND_HALF_UP))


# -- accuracy tables ----------------------------------------------------------

@dataclass
class AccuracyMatrix:
    """``values[i, j]`` is the accuracy of classifier ``j`` on dataset ``i``; NaN marks a missing cell."""

    classifiers: list[str]
    datasets: list[str]
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.classifiers = list(self.classifiers)
        self.datasets = list(self.datasets)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.datasets), len(self.classifiers))
        if len(set(self.classifiers)) != len(self.classifiers) or len(set(self.datasets)) != len(self.datasets):
            raise InvalidArgumentError("classifier and dataset names must be unique")
        present = self.values[~np.isnan(self.values)]
        if present.size and (present.min() < 0 or present.max() > 1):
            raise InvalidArgumentError("accuracies must lie in [0, 1]")
        for name in self.classifiers:
            self.provenance.setdefault(name, "published-table")
        bad = set(self.provenance.values()) - set(PROVENANCE)
        if bad:
            raise InvalidArgumentError(f"unknown provenance {sorted(bad)}")

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.classifiers.index(name)]
        except ValueError:
            raise InvalidArgumentError(f"no classifier named {name!r}") from None

    def column_dict(self, name: str) -> dict[str, float]:
        return dict(zip(self.datasets, self.column(name).tolist()))

    def with_column(self, name, accuracies: dict, provenance="own-run") -> "AccuracyMatrix":
        """Add a classifier; datasets it lacks get NaN, new datasets get NaN elsewhere."""
        datasets = self.datasets + [d for d in accuracies if d not in self.datasets]
        values = np.full((len(datasets), len(self.classifiers) + 1), np.nan)
        values[: len(self.datasets), :-1] = self.values
        for d, acc in accuracies.items():
            values[datasets.index(d), -1] = acc
        prov = dict(self.provenance, **{name: provenance})
        return AccuracyMatrix(self.classifiers + [name], datasets, values, prov)

    def complete(self, classifiers=None) -> "AccuracyMatrix":
        """Restrict to ``classifiers`` and the datasets where all of them have a value."""
        names = list(classifiers) if classifiers is not None else self.classifiers
        cols = [self.classifiers.index(n) for n in names]
        sub = self.values[:, cols]
        keep = ~np.isnan(sub).any(axis=1)
        return AccuracyMatrix(names, [d for d, k in zip(self.datasets, keep) if k], sub[keep],
                              {n: self.provenance[n] for n in names})

    def require_complete(self):
        if np.isnan(self.values).any():
            raise InvalidArgumentError("accuracy matrix has missing cells; call complete() first")

    def rounded(self) -> "AccuracyMatrix":
        rounded = np.vectorize(lambda v: v if math.isnan(v) else round8(v))(self.values) if self.values.size else self.values
        return AccuracyMatrix(self.classifiers, self.datasets, rounded, dict(self.provenance))

    @classmethod
    def from_csv(cls, path, provenance="published-table") -> "AccuracyMatrix":
        """Header row is ``dataset, clf1, clf2, ...``; empty cells are missing."""
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
        if not rows:
            raise InvalidArgumentError(f"{path}: empty accuracy table")
        header, body = rows[0], rows[1:]
        classifiers = [h.strip() for h in header[1:]]
        datasets, values = [], []
        for lineno, row in enumerate(body, 2):
            if len(row) != len(header):
                raise InvalidArgumentError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            datasets.append(row[0].strip())
            try:
                values.append([float(c) if c.strip() else math.nan for c in row[1:]])
            except ValueError:
                raise InvalidArgumentError(f"{path}:{lineno}: non-numeric accuracy") from None
        return cls(classifiers, datasets, np.array(values).reshape(len(datasets), len(classifiers)),
                   {c: provenance for c in classifiers})

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset"] + self.classifiers)
        for d, row in zip(self.datasets, self.values):
            w.writerow([d] + ["" if math.isnan(v) else repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def merge_matrices(*matrices: AccuracyMatrix) -> AccuracyMatrix:
    out = matrices[0]
    for m in matrices[1:]:
        for name in m.classifiers:
            if name in out.classifiers:
                raise InvalidArgumentError(f"classifier {name!r} appears in more than one table")
            out = out.with_column(name, {d: v for d, v in m.column_dict(name).items() if not math.isnan(v)},
                                  m.provenance[name])
    return out


# -- wins and ranks -----------------------------------------------------------

def pairwise_wins(a, b) -> tuple[int, int, int]:
    """(a wins, b wins, ties) after rounding both to eight decimals."""
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise InvalidArgumentError(f"accuracy vectors differ in length: {len(a)} vs {len(b)}")
    a_wins = b_wins = ties = 0
    for x, y in zip(a, b):
        x, y = round8(x), round8(y)
        if x > y:
            a_wins += 1
        elif y > x:
            b_wins += 1
        else:
            ties += 1
    return a_wins, b_wins, ties


def wins_table(matrix: AccuracyMatrix, candidate: str) -> list[dict]:
    """Candidate versus every other classifier, as (wins, losses, ties) rows."""
    rows = []
    for other in matrix.classifiers:
        if other == candidate:
            continue
        sub = matrix.complete([candidate, other])
        w, l, t = pairwise_wins(sub.column(candidate), sub.column(other))
        rows.append({"candidate": candidate, "baseline": other, "wins": w, "losses": l, "ties": t,
                     "datasets": len(sub.datasets)})
    return rows


def wins_losses_ties_from_csv(candidate_csv, baseline_csv) -> dict:
    """Compare two single-classifier CSVs on their shared datasets."""
    a, b = AccuracyMatrix.from_csv(candidate_csv), AccuracyMatrix.from_csv(baseline_csv)
    if len(a.classifiers) != 1 or len(b.classifiers) != 1:
        raise InvalidArgumentError("each file must hold exactly one classifier column")
    if a.classifiers == b.classifiers:
        b = AccuracyMatrix([b.classifiers[0] + " (baseline)"], b.datasets, b.values)
    merged = merge_matrices(a, b).complete()
    row = wins_table(merged, a.classifiers[0])[0]
    return row


def per_dataset_ranks(values) -> np.ndarray:
    """Rank 1 is the highest accuracy; ties share the mean rank."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] < 2:
        raise InvalidArgumentError("ranking needs a (datasets, classifiers) table with at least 2 classifiers")
    if np.isnan(values).any():
        raise InvalidArgumentError("cannot rank a table with missing cells")
    return rankdata(-values, axis=1, method="average")


def average_ranks(matrix) -> dict[str, float] | np.ndarray:
    if isinstance(matrix, AccuracyMatrix):
        ranks = per_dataset_ranks(matrix.values).mean(axis=0)
        return dict(zip(matrix.classifiers, ranks.tolist()))
    return per_dataset_ranks(matrix).mean(axis=0)


# -- signed-rank test -----------------------------------------------------------

@dataclass(frozen=True)
class SignedRankResult:
    statistic: float  # sum of ranks of positive differences
    p_value: float
    n: int  # nonzero differences
    method: str


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise InvalidArgumentError("signed-rank test needs two 1-D vectors")
    d = d[d != 0]
    return d, rankdata(np.abs(d), method="average")


def _exact_null_counts(doubled_ranks) -> np.ndarray:
    """counts[s] = number of sign assignments whose positive doubled-rank sum is s."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    return counts


def wilcoxon_exact(a, b) -> SignedRankResult:
    d, ranks = _signed_ranks(a, b)
    n = d.size
    if n == 0:
        return SignedRankResult(0.0, 1.0, 0, "exact")
    # ties give half-integer ranks; doubling keeps the sums integral
    doubled = np.rint(2 * ranks).astype(np.int64)
    w2 = int(doubled[d > 0].sum())
    counts = _exact_null_counts(doubled)
    lower = counts[: w2 + 1].sum()
    upper = counts[w2:].sum()
    p = min(1.0, 2.0 * min(lower, upper) / 2.0**n)
    return SignedRankResult(w2 / 2.0, p, n, "exact")


def wilcoxon_normal(a, b) -> SignedRankResult:
    d, ranks = _signed_ranks(a, b)
    n = d.size
    if n == 0:
        return SignedRankResult(0.0, 1.0, 0, "normal")
    w = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    if var <= 0:
        return SignedRankResult(w, 1.0, n, "normal")
    z = (w - mean) / math.sqrt(var)
    return SignedRankResult(w, min(1.0, math.erfc(abs(z) / math.sqrt(2.0))), n, "normal")


def wilcoxon_signed_rank(a, b) -> SignedRankResult:
    """Two-sided test of ``a - b``; exact for up to 12 nonzero differences."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"paired vectors differ in shape: {a.shape} vs {b.shape}")
    n = int(np.count_nonzero(a - b))
    return wilcoxon_exact(a, b) if n <= EXACT_MAX_N else wilcoxon_normal(a, b)


def holm(p_values, alpha=0.05) -> tuple[np.ndarray, np.ndarray]:
    """Holm step-down: adjusted p-values (monotone in raw order) and reject flags."""
    p = np.asarray(p_values, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted_sorted = np.minimum(1.0, np.maximum.accumulate((m - np.arange(m)) * p[order]))
    adjusted = np.empty(m)
    adjusted[order] = adjusted_sorted
    return adjusted, adjusted <= alpha


@dataclass
class PairTest:
    a: str
    b: str
    statistic: float
    p_value: float
    p_adjusted: float
    significant: bool
    method: str
    n: int

    def to_dict(self):
        return dict(vars(self))


@dataclass
class CriticalDifferenceReport:
    alpha: float
    average_ranks: dict[str, float]
    pairs: list[PairTest]
    cliques: list[list[str]]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "ranks": self.average_ranks,
            "pairs": [p.to_dict() for p in self.pairs],
            "cliques": self.cliques,
        }


def wilcoxon_holm(matrix: AccuracyMatrix, alpha=0.05) -> CriticalDifferenceReport:
    """Pairwise signed-rank tests with Holm correction and groups of indistinguishable classifiers."""
    if len(matrix.classifiers) < 2:
        raise InvalidArgumentError("need at least two classifiers")
    matrix.require_complete()
    ranks = average_ranks(matrix)
    tests = []
    for x, y in combinations(matrix.classifiers, 2):
        res = wilcoxon_signed_rank(matrix.column(x), matrix.column(y))
        tests.append((x, y, res))
    adjusted, reject = holm([t[2].p_value for t in tests], alpha)
    pairs = [
        PairTest(x, y, r.statistic, r.p_value, float(adj), bool(rej), r.method, r.n)
        for (x, y, r), adj, rej in zip(tests, adjusted, reject)
    ]
    g = nx.Graph()
    g.add_nodes_from(matrix.classifiers)
    g.add_edges_from((p.a, p.b) for p in pairs if not p.significant)
    cliques = [sorted(c, key=lambda n: (ranks[n], n)) for c in nx.find_cliques(g)]
    cliques.sort(key=lambda c: (min(ranks[n] for n in c), -len(c), c))
    return CriticalDifferenceReport(alpha, ranks, pairs, cliques)


# -- sharpshooter quadrants -------------------------------------------------------

QUADRANTS = ("TP", "FP", "TN", "FN")


def texas_quadrant(expected_gain: float, actual_gain: float) -> str:
    if expected_gain <= 0 or actual_gain <= 0:
        raise InvalidArgumentError("gains are accuracy ratios and must be positive")
    if expected_gain > 1:
        return "TP" if actual_gain > 1 else "FP"
    return "FN" if actual_gain > 1 else "TN"


def accuracy_gain(candidate: float, baseline: float) -> float:
    if baseline <= 0:
        raise InvalidArgumentError("baseline accuracy must be positive to form a ratio")
    return candidate / baseline


def leave_one_out_accuracy(fit_predict, x, y) -> float:
    """Train-split estimate: ``fit_predict(x_train, y_train, x_held)`` returns one label."""
    x, y = np.asarray(x), np.asarray(y)
    if len(x) < 2:
        raise InvalidArgumentError("leave-one-out needs at least two samples")
    hits = 0
    for i in range(len(x)):
        keep = np.arange(len(x)) != i
        hits += int(fit_predict(x[keep], y[keep], x[i : i + 1]) == y[i])
    return hits / len(x)


def sharpshooter_table(expected: dict, actual: dict) -> list[dict]:
    if set(expected) != set(actual):
        raise InvalidArgumentError("expected and actual gains cover different datasets")
    return [
        {"dataset": d, "expected_gain": expected[d], "actual_gain": actual[d],
         "quadrant": texas_quadrant(expected[d], actual[d])}
        for d in sorted(expected)
    ]


# -- relative accuracy ------------------------------------------------------------

def relative_accuracy_report(candidate: dict, baselines: dict) -> list[dict]:
    """Per dataset ``candidate - baseline`` for each baseline, sorted by delta."""
    rows = []
    for name, base in baselines.items():
        if set(base) != set(candidate):
            missing = sorted(set(candidate) ^ set(base))
            raise InvalidArgumentError(f"baseline {name!r} is misaligned with the candidate on {missing}")
        deltas = sorted(((candidate[d] - base[d], d) for d in candidate), key=lambda t: (t[0], t[1]))
        rows.extend({"baseline": name, "dataset": d, "candidate": candidate[d], "baseline_accuracy": base[d],
                     "delta": delta} for delta, d in deltas)
    return rows


def rows_to_csv(rows: list[dict], path=None) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
