"""Rule-based quality control of rib-pair segmentation masks.

Each rib pair (one label covering a left and a right rib) is checked by four
rules:

Q1  more than two sizable connected components
Q2  only one sizable component (a rib is missing)
Q3  rib sizes differ by more than ``t_q3`` percent
Q4  the tops of the two ribs differ by more than ``t_q4`` rows

Components smaller than ``t_q1`` pixels are tolerated patches and are
ignored by every rule.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .exceptions import EmptyCorpus
from .validation import LabelSemantics, check_label_mask

RIB_LABELS = LabelSemantics.RIB_PAIRS.labels
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class QcThresholds:
    t_q1: int = 300
    t_q3: float = 30.0
    t_q4: int = 50

    def __post_init__(self):
        if self.t_q1 <= 0 or self.t_q3 <= 0 or self.t_q4 <= 0:
            raise ValueError("QC thresholds must be positive")

    @property
    def q1_small_patch_tolerance(self):
        return self.t_q1


@dataclass(frozen=True)
class Component:
    size: int
    bbox: tuple  # (row_min, col_min, row_max, col_max), inclusive
    centroid: tuple  # (row, col)
    pixels: np.ndarray = dc_field(repr=False, compare=False)

    @property
    def top(self):
        return self.bbox[0]


def connected_components(mask):
    """8-connected components of a binary grid, largest first."""
    m = np.asarray(mask).astype(bool)
    lab, n = ndimage.label(m, structure=_EIGHT)
    comps = []
    for k, sl in enumerate(ndimage.find_objects(lab), start=1):
        sub = lab[sl] == k
        rows, cols = np.nonzero(sub)
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        comps.append(Component(
            size=int(rows.size),
            bbox=(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())),
            centroid=(float(rows.mean()), float(cols.mean())),
            pixels=np.stack([rows, cols], axis=1),
        ))
    comps.sort(key=lambda c: (-c.size, c.bbox))
    return comps


def sizable(components, t: QcThresholds):
    return [c for c in components if c.size >= t.q1_small_patch_tolerance]


def _ribs(pair, t):
    comps = pair if isinstance(pair, list) else connected_components(pair)
    return sizable(comps, t)


def rule_q1(pair, t: QcThresholds = QcThresholds()):
    """True (pass) unless more than two sizable components are present."""
    return len(_ribs(pair, t)) <= 2


def rule_q2(pair, t: QcThresholds = QcThresholds()):
    """Pass iff at least two sizable components exist.

    Returns ``(passed, diagnostic)``; an empty pair fails with
    ``"empty_pair"``.
    """
    ribs = _ribs(pair, t)
    if not ribs:
        return False, "empty_pair"
    if len(ribs) == 1:
        return False, "single_rib"
    return True, None


def _left_right(ribs):
    """The two largest ribs ordered (left, right) by centroid column relative
    to their common centroid."""
    a, b = ribs[0], ribs[1]
    total = a.size + b.size
    center = (a.centroid[1] * a.size + b.centroid[1] * b.size) / total
    return (a, b) if a.centroid[1] - center <= b.centroid[1] - center else (b, a)


def size_difference_percent(ribs):
    big, small = max(ribs[0].size, ribs[1].size), min(ribs[0].size, ribs[1].size)
    return 100.0 * (big - small) / small


def top_distance(ribs):
    left, right = _left_right(ribs)
    return abs(left.top - right.top)


def rule_q3(pair, t: QcThresholds = QcThresholds()):
    """Pass unless the larger rib exceeds the smaller by more than t_q3 %.

    Needs two sizable ribs; with fewer the rule is not applicable and passes
    (Q2 reports the problem).
    """
    ribs = _ribs(pair, t)
    if len(ribs) < 2:
        return True
    return size_difference_percent(ribs) <= t.t_q3


def rule_q4(pair, t: QcThresholds = QcThresholds()):
    """Pass unless the rib tops are more than t_q4 rows apart."""
    ribs = _ribs(pair, t)
    if len(ribs) < 2:
        return True
    return top_distance(ribs) <= t.t_q4


@dataclass
class PairReport:
    label: int
    q1: bool
    q2: bool
    q3: bool
    q4: bool
    n_components: int
    n_sizable: int
    rib_sizes: list
    rib_tops: list
    diagnostic: str | None = None

    @property
    def passed(self):
        return self.q1 and self.q2 and self.q3 and self.q4

    @property
    def failed_rules(self):
        return [name for name in ("q1", "q2", "q3", "q4") if not getattr(self, name)]


@dataclass
class QcReport:
    pairs: list
    passed: bool
    first_failing_label: int | None
    thresholds: dict
    source: str | None = None

    def to_dict(self):
        d = asdict(self)
        for p, obj in zip(d["pairs"], self.pairs):
            p["passed"] = obj.passed
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        pairs = []
        for p in d["pairs"]:
            p = {k: v for k, v in p.items() if k != "passed"}
            pairs.append(PairReport(**p))
        d["pairs"] = pairs
        return cls(**d)


def check_pair(pair_mask, label, t: QcThresholds = QcThresholds()) -> PairReport:
    comps = connected_components(pair_mask)
    ribs = sizable(comps, t)
    q2, diag = rule_q2(comps, t)
    ordered = list(_left_right(ribs)) if len(ribs) >= 2 else ribs
    return PairReport(
        label=int(label),
        q1=rule_q1(comps, t),
        q2=q2,
        q3=rule_q3(comps, t),
        q4=rule_q4(comps, t),
        n_components=len(comps),
        n_sizable=len(ribs),
        rib_sizes=[c.size for c in ordered],
        rib_tops=[c.top for c in ordered],
        diagnostic=diag,
    )


def qc_mask(mask, t: QcThresholds = QcThresholds(), labels=RIB_LABELS,
            source=None) -> QcReport:
    """Run all rules on every rib pair, top pair first.

    ``first_failing_label`` is the pair to correct first when relabelling;
    later pairs are usually fixed by re-running sequential segmentation.
    """
    mask = check_label_mask(mask, LabelSemantics.RIB_PAIRS)
    pairs = [check_pair(mask == lab, lab, t) for lab in labels]
    first = next((p.label for p in pairs if not p.passed), None)
    return QcReport(pairs, first is None, first, asdict(t), source)


def calibrate_thresholds(gt_masks, ddof=1) -> QcThresholds:
    """Derive thresholds from ground-truth rib-pair masks.

    ``t_q1`` is mean - 2.5 std of the pixel count of the top pair (label 2),
    ``t_q3`` the largest size-difference percentage and ``t_q4`` the largest
    rib-top distance observed across all pairs with two ribs.
    """
    gt_masks = list(gt_masks)
    if len(gt_masks) < 2:
        raise EmptyCorpus("calibration needs at least two ground-truth masks")
    counts, diffs, tops = [], [], []
    for m in gt_masks:
        m = check_label_mask(m, LabelSemantics.RIB_PAIRS)
        counts.append(int(np.count_nonzero(m == RIB_LABELS[0])))
        for lab in RIB_LABELS:
            ribs = connected_components(m == lab)[:2]
            if len(ribs) == 2:
                diffs.append(size_difference_percent(ribs))
                tops.append(top_distance(ribs))
    counts = np.asarray(counts, dtype=np.float64)
    t_q1 = counts.mean() - 2.5 * counts.std(ddof=ddof)
    if not diffs:
        raise EmptyCorpus("no rib pair with two ribs in the corpus")
    # zero spreads would make the rules reject any asymmetry at all
    return QcThresholds(
        t_q1=max(1, int(round(t_q1))),
        t_q3=max(float(max(diffs)), 1e-9),
        t_q4=max(int(max(tops)), 1),
    )
