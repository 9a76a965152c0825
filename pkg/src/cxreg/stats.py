"""Non-parametric comparison of registration models over image pairs.

Friedman test on per-subject ranks, Nemenyi post-hoc critical difference,
pairwise Wilcoxon signed-rank tests (exact for small samples) and
Bonferroni correction, plus a driver running the whole protocol on metric
reports.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field as dc_field
from importlib import resources

import numpy as np
from scipy.special import gammaincc, ndtr
from scipy.stats import rankdata

from .exceptions import AllZeroDifferences, DegenerateMatrix, UnsupportedAlpha

EXACT_MAX_N = 25
MIN_SUBJECTS = 5

# metrics for which a smaller value is better
LOWER_IS_BETTER = {"mse", "negjac", "h95r", "h95l"}


def _load_q_table():
    text = resources.files("cxreg").joinpath("data/nemenyi_q.csv").read_text()
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = rows[0].split(",")
    ks = [int(h[1:]) for h in header[1:]]
    table = {}
    for ln in rows[1:]:
        vals = ln.split(",")
        table[float(vals[0])] = dict(zip(ks, map(float, vals[1:])))
    return table


Q_TABLE = _load_q_table()


@dataclass
class ScoreMatrix:
    """Scores of ``k`` models (columns) on ``N`` subjects (rows)."""

    values: np.ndarray
    models: list = None
    metric: str = "score"
    higher_is_better: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DegenerateMatrix("score matrix must be 2D (subjects x models)")
        if v.shape[1] < 2:
            raise DegenerateMatrix("need at least two models")
        if v.shape[0] < MIN_SUBJECTS:
            raise DegenerateMatrix(f"need at least {MIN_SUBJECTS} subjects, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise DegenerateMatrix("score matrix has missing or non-finite entries")
        self.values = v
        if self.models is None:
            self.models = [f"m{j}" for j in range(v.shape[1])]
        if len(self.models) != v.shape[1]:
            raise DegenerateMatrix("one model name per column required")
        self.models = list(self.models)

    @property
    def n_subjects(self):
        return self.values.shape[0]

    @property
    def n_models(self):
        return self.values.shape[1]

    def ranks(self):
        """Within-row ranks, 1 = best, ties share their mean rank."""
        v = -self.values if self.higher_is_better else self.values
        return rankdata(v, axis=1)


def chi2_sf(x, dof):
    """Upper tail of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return float(gammaincc(dof / 2.0, x / 2.0))


@dataclass
class FriedmanResult:
    statistic: float
    p_value: float
    mean_ranks: list
    n_subjects: int
    n_models: int
    degenerate: bool = False


def friedman_test(m: ScoreMatrix) -> FriedmanResult:
    """Friedman chi-square on within-subject ranks.

    A matrix whose rows are all fully tied carries no ranking information;
    it yields statistic 0 and p = 1 with ``degenerate`` set.
    """
    n, k = m.n_subjects, m.n_models
    r = m.ranks().mean(axis=0)
    degenerate = bool(np.all(m.values == m.values[:, :1]))
    stat = 12.0 * n / (k * (k + 1)) * (np.sum(r ** 2) - k * (k + 1) ** 2 / 4.0)
    stat = max(0.0, float(stat))
    if degenerate:
        stat = 0.0
    return FriedmanResult(stat, chi2_sf(stat, k - 1), r.tolist(), n, k, degenerate)


@dataclass
class NemenyiResult:
    critical_difference: float
    q_alpha: float
    alpha: float
    significant: np.ndarray
    mean_ranks: list


def nemenyi_q(k, alpha):
    if alpha not in Q_TABLE:
        raise UnsupportedAlpha(f"alpha must be one of {sorted(Q_TABLE)}, got {alpha}")
    row = Q_TABLE[alpha]
    if k not in row:
        raise UnsupportedAlpha(f"no q value for {k} models (table covers {min(row)}..{max(row)})")
    return row[k]


def nemenyi_posthoc(mean_ranks, n, k=None, alpha=0.05) -> NemenyiResult:
    """Pairs whose mean ranks differ by more than the critical difference."""
    r = np.asarray(mean_ranks, dtype=np.float64)
    k = r.size if k is None else k
    q = nemenyi_q(k, alpha)
    cd = q * np.sqrt(k * (k + 1) / (6.0 * n))
    sig = np.abs(r[:, None] - r[None, :]) > cd
    return NemenyiResult(float(cd), q, alpha, sig, r.tolist())


@dataclass
class WilcoxonResult:
    statistic: float  # W+ = sum of ranks of positive differences a - b
    p_value: float
    n: int
    exact: bool
    n_zero: int = 0


def _signed_ranks(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("wilcoxon needs two 1D samples of equal length")
    d = a - b
    nz = d != 0
    if not nz.any():
        raise AllZeroDifferences("all paired differences are zero")
    d = d[nz]
    ranks = rankdata(np.abs(d))
    return d, ranks, int((~nz).sum())


def exact_signed_rank_counts(ranks2):
    """Number of sign assignments giving each doubled W+ value.

    ``ranks2`` are the ranks times two (integers, mid-ranks included).
    """
    ranks2 = [int(r) for r in ranks2]
    counts = np.zeros(sum(ranks2) + 1, dtype=np.float64)
    counts[0] = 1.0
    top = 0
    for r in ranks2:
        # each rank is either absent or added to W+
        counts[r:top + r + 1] += counts[:top + 1].copy()
        top += r
    return counts


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test of paired samples.

    Zero differences are dropped.  For up to 25 non-zero differences the p
    value is exact (all 2**n sign assignments, mid-ranks for ties); above,
    a normal approximation with tie and continuity correction is used.
    """
    d, ranks, n_zero = _signed_ranks(a, b)
    n = d.size
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        counts = exact_signed_rank_counts(ranks2)
        w2 = int(round(2 * w_plus))
        total = counts.sum()
        lower = counts[:w2 + 1].sum() / total
        upper = counts[w2:].sum() / total
        p = min(1.0, 2.0 * min(lower, upper))
        return WilcoxonResult(w_plus, float(p), n, True, n_zero)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / np.sqrt(var)
    p = min(1.0, 2.0 * float(ndtr(-z)))
    return WilcoxonResult(w_plus, p, n, False, n_zero)


def bonferroni(pvals, m=None):
    """``min(1, p * m)``; ``m`` defaults to the number of p values."""
    p = np.asarray(pvals, dtype=np.float64)
    m = p.size if m is None else m
    if m < 1:
        raise ValueError("number of comparisons must be positive")
    return np.minimum(1.0, p * m)


@dataclass
class PairwiseComparison:
    model_a: str
    model_b: str
    statistic: float
    p_value: float
    p_adjusted: float
    significant: bool
    mean_difference: float
    nemenyi_significant: bool


@dataclass
class ComparisonSummary:
    metric: str
    models: list
    n_subjects: int
    friedman: FriedmanResult
    friedman_significant: bool
    critical_difference: float
    pairs: list = dc_field(default_factory=list)
    alpha: float = 0.05
    friedman_alpha: float = 0.005

    def pair(self, a, b):
        for p in self.pairs:
            if {p.model_a, p.model_b} == {a, b}:
                return p
        raise KeyError((a, b))

    def to_dict(self):
        return asdict(self)


def _metric_value(report, metric):
    if isinstance(report, dict):
        return report[metric]
    return getattr(report, metric)


def score_matrix(reports, metric):
    """Build a :class:`ScoreMatrix` from ``{model: [report per subject]}``."""
    models = list(reports)
    cols = [[_metric_value(r, metric) for r in reports[mo]] for mo in models]
    if len({len(c) for c in cols}) != 1:
        raise DegenerateMatrix("every model needs one report per subject")
    if any(v is None for c in cols for v in c):
        raise DegenerateMatrix(f"metric {metric!r} missing in some reports")
    values = np.array(cols, dtype=np.float64).T
    return ScoreMatrix(values, models, metric, metric not in LOWER_IS_BETTER)


def compare_models(reports, metric="dcr", alpha=0.05, friedman_alpha=0.005):
    """Friedman test, Nemenyi post-hoc and Bonferroni-corrected pairwise
    Wilcoxon tests of one metric across models.

    ``reports`` maps model name to a list of per-subject metric reports
    (objects or dicts) in the same subject order.
    """
    sm = reports if isinstance(reports, ScoreMatrix) else score_matrix(reports, metric)
    fr = friedman_test(sm)
    nem = nemenyi_posthoc(fr.mean_ranks, sm.n_subjects, sm.n_models, alpha)
    combos = list(itertools.combinations(range(sm.n_models), 2))
    raw, stats_ = [], []
    for i, j in combos:
        a, b = sm.values[:, i], sm.values[:, j]
        try:
            w = wilcoxon_signed_rank(a, b)
            raw.append(w.p_value)
            stats_.append(w.statistic)
        except AllZeroDifferences:
            raw.append(1.0)
            stats_.append(0.0)
    adj = bonferroni(raw, len(combos))
    pairs = []
    for (i, j), s, p, pa in zip(combos, stats_, raw, adj):
        pairs.append(PairwiseComparison(
            sm.models[i], sm.models[j], float(s), float(p), float(pa), bool(pa < alpha),
            float(np.mean(sm.values[:, i] - sm.values[:, j])), bool(nem.significant[i, j])))
    return ComparisonSummary(sm.metric, sm.models, sm.n_subjects, fr,
                             bool(fr.p_value < friedman_alpha), nem.critical_difference,
                             pairs, alpha, friedman_alpha)
