"""Confusion matrices, per-class scores, joint-versus-single comparisons and
the Wilcoxon signed-rank test."""
import csv
import io
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from importlib import resources
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field
from scipy.stats import norm, rankdata

from .data import head_classes
from .exceptions import FormatError, InvalidArgumentError

logger = logging.getLogger(__name__)

TABLE_IV_FIXTURE = 'table_iv_f1_v1.csv'

# (output, class) columns in report order
REPORT_COLUMNS: list[tuple[str, str]] = [
    (head, label.name.lower())
    for head in ('valence', 'arousal', 'context') for label in head_classes(head)
]

EXACT_LIMIT = 25

# valence Negative / Positive baselines reported alongside the study's values
REPORTED_RANDOM_F1 = {'negative': 0.044, 'positive': 0.106}


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray
    """(K, K) counts, rows are true classes and columns predictions."""

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds: Sequence[int], truth: Sequence[int], n_classes: int) -> ConfusionMatrix:
    """Count (true, predicted) pairs into a K x K matrix."""

    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if preds.shape != truth.shape:
        raise InvalidArgumentError(f'{preds.size} predictions for {truth.size} labels')
    if n_classes < 1:
        raise InvalidArgumentError('a confusion matrix needs at least one class')
    for name, values in (('prediction', preds), ('label', truth)):
        if values.size and (values.min() < 0 or values.max() >= n_classes):
            raise InvalidArgumentError(f'{name} index out of range for {n_classes} classes')

    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truth, preds), 1)
    return ConfusionMatrix(counts)


def prf1(cm: ConfusionMatrix, c: int) -> tuple[float, float, float]:
    """Precision, recall and F1 of class `c`; zero denominators give 0."""

    if not 0 <= c < cm.n_classes:
        raise InvalidArgumentError(f'class {c} out of range for {cm.n_classes} classes')
    tp = cm.counts[c, c]
    predicted = cm.counts[:, c].sum()
    actual = cm.counts[c, :].sum()
    precision = tp / predicted if predicted else 0.0
    recall = tp / actual if actual else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return float(precision), float(recall), float(f1)


class ClassMetrics(BaseModel):
    output: str
    label: str
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    support: int = Field(0, ge=0)
    """Number of scored samples of this class."""


class MetricsReport(BaseModel):
    fusion: str
    task: str
    classes: list[ClassMetrics] = []
    n_samples: int = 0

    def f1(self) -> dict[tuple[str, str], float]:
        return {(m.output, m.label): m.f1 for m in self.classes}

    @property
    def outputs(self) -> list[str]:
        return list(dict.fromkeys(m.output for m in self.classes))


def build_report(fusion: str, task: str, preds: dict[str, np.ndarray],
                 truth: dict[str, np.ndarray]) -> MetricsReport:
    """Score predicted class indices against labels for every output in
    `preds`.

    Parameters
    ----------
    fusion : str
        Fusion kind of the scored model.
    task : str
        Task set of the scored model.
    preds : dict[str, np.ndarray]
        Predicted class indices per output.
    truth : dict[str, np.ndarray]
        True class indices per output.

    Returns
    -------
    MetricsReport
        Per-class precision, recall and F1.
    """

    classes = []
    n_samples = 0
    for output, predicted in preds.items():
        labels = head_classes(output)
        cm = confusion(predicted, truth[output], len(labels))
        n_samples = cm.total
        for c, label in enumerate(labels):
            p, r, f = prf1(cm, c)
            classes.append(ClassMetrics(output=output, label=label.name.lower(), precision=p,
                                        recall=r, f1=f, support=int(cm.counts[c].sum())))
    return MetricsReport(fusion=fusion, task=task, classes=classes, n_samples=n_samples)


def merge_reports(reports: Sequence[MetricsReport], task: str = 'single') -> MetricsReport:
    """Combine reports covering disjoint outputs, e.g. the affect-only and
    game-only models of one fusion kind."""

    if not reports:
        raise InvalidArgumentError('nothing to merge')
    fusions = {r.fusion for r in reports}
    if len(fusions) != 1:
        raise InvalidArgumentError(f'cannot merge reports of fusion kinds {sorted(fusions)}')
    seen = set()
    classes = []
    for report in reports:
        overlap = seen & set(report.outputs)
        if overlap:
            raise InvalidArgumentError(f'outputs {sorted(overlap)} appear in several reports')
        seen |= set(report.outputs)
        classes += report.classes
    return MetricsReport(fusion=reports[0].fusion, task=task, classes=classes,
                         n_samples=max(r.n_samples for r in reports))


class WilcoxonResult(BaseModel):
    statistic: float
    """Sum of the ranks of the positive differences."""

    p_value: float
    n: int
    """Number of non-zero differences."""

    mode: Literal['exact', 'approx']
    all_zero: bool = False


def _signed_ranks(x: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgumentError('paired samples must be 1-D and of equal length')
    # rounding makes ties of decimal data survive float subtraction
    d = np.round(x - y, 12)
    d = d[d != 0]
    return d, rankdata(np.abs(d))


def _exact_p(ranks: np.ndarray, positive: np.ndarray) -> float:
    """Two-sided p of the signed-rank sum by counting sign patterns.

    Average ranks are half-integers, so doubled ranks are integers and the
    null distribution is the coefficient list of prod_i (1 + t^(2 r_i)).
    """

    doubled = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] += counts[:-r].copy()
    t = int(doubled[positive].sum())
    total = counts.sum()
    lower = counts[:t + 1].sum() / total
    upper = counts[t:].sum() / total
    return min(1.0, 2.0 * min(lower, upper))


def _approx_p(ranks: np.ndarray, statistic: float) -> float:
    n = ranks.size
    _, ties = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(ties ** 3 - ties) / 48
    if var <= 0:
        return 1.0
    z = (statistic - mean) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(abs(z))))


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float],
                         mode: Literal['exact', 'approx', 'auto'] = 'exact') -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test of paired samples.

    Zero differences are dropped and tied absolute differences receive
    average ranks. The exact mode enumerates the null distribution of the
    positive rank sum (up to 25 pairs); the approximate mode uses the normal
    approximation with tie correction; 'auto' picks exact when possible.

    Parameters
    ----------
    x, y : Sequence[float]
        Paired observations.
    mode : {'exact', 'approx', 'auto'}, optional
        Test variant, by default 'exact'.

    Returns
    -------
    WilcoxonResult
        Statistic W+ and two-sided p-value; p is 1 with `all_zero` set when
        every difference is zero.
    """

    if mode not in ('exact', 'approx', 'auto'):
        raise InvalidArgumentError(f'unknown Wilcoxon mode {mode!r}')
    d, ranks = _signed_ranks(x, y)
    n = d.size
    if mode == 'auto':
        mode = 'exact' if n <= EXACT_LIMIT else 'approx'
    if n == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n=0, mode=mode, all_zero=True)
    if mode == 'exact' and n > EXACT_LIMIT:
        raise InvalidArgumentError(f'exact test supports at most {EXACT_LIMIT} non-zero '
                                   f'differences, got {n}')

    positive = d > 0
    statistic = float(ranks[positive].sum())
    p = _exact_p(ranks, positive) if mode == 'exact' else _approx_p(ranks, statistic)
    return WilcoxonResult(statistic=statistic, p_value=p, n=n, mode=mode)


class ClassDelta(BaseModel):
    output: str
    label: str
    joint: float
    single: float
    delta: float


class PairedDeltaReport(BaseModel):
    fusion: str
    deltas: list[ClassDelta]
    mean_delta: float
    wilcoxon: WilcoxonResult


def delta_report(joint: MetricsReport, single: MetricsReport,
                 mode: Literal['exact', 'approx', 'auto'] = 'exact') -> PairedDeltaReport:
    """Per-class F1(joint) - F1(single), their mean and the signed-rank test
    of the pairs."""

    joint_f1, single_f1 = joint.f1(), single.f1()
    if set(joint_f1) != set(single_f1):
        missing = sorted(set(joint_f1) ^ set(single_f1))
        raise InvalidArgumentError(f'class sets differ: {missing[:5]}')
    keys = [key for key in REPORT_COLUMNS if key in joint_f1] + \
        [key for key in joint_f1 if key not in REPORT_COLUMNS]
    if not keys:
        raise InvalidArgumentError('reports hold no classes')

    deltas = [ClassDelta(output=o, label=c, joint=joint_f1[o, c], single=single_f1[o, c],
                         delta=joint_f1[o, c] - single_f1[o, c]) for o, c in keys]
    test = wilcoxon_signed_rank([d.joint for d in deltas], [d.single for d in deltas], mode)
    return PairedDeltaReport(fusion=joint.fusion, deltas=deltas,
                             mean_delta=float(np.mean([d.delta for d in deltas])),
                             wilcoxon=test)


def expected_random_f1(prior: float, n_classes: int,
                       scheme: Literal['uniform', 'prior_matched'] = 'uniform') -> float:
    """Expected F1 of a class with prevalence `prior` under random guessing.

    'uniform' guesses every class with probability 1/K (precision p, recall
    1/K); 'prior_matched' guesses with the class prevalences (precision and
    recall p).
    """

    if not 0.0 < prior < 1.0:
        raise InvalidArgumentError(f'prior must be in (0, 1), got {prior}')
    if n_classes < 2:
        raise InvalidArgumentError('random baseline needs at least 2 classes')
    if scheme == 'uniform':
        recall = 1.0 / n_classes
        return 2 * prior * recall / (prior + recall)
    if scheme == 'prior_matched':
        return prior
    raise InvalidArgumentError(f'unknown random baseline scheme {scheme!r}')


def random_baseline_reference(counts: Sequence[int]) -> list[dict[str, float | str]]:
    """Both random baselines for valence Negative and Positive from valence
    class counts, next to the values reported for the original study."""

    counts = np.asarray(counts, dtype=np.float64)
    priors = counts / counts.sum()
    rows = []
    for label, c in (('negative', 0), ('positive', 2)):
        row = {'label': label,
               'prior': float(priors[c]),
               'uniform': expected_random_f1(priors[c], counts.size, 'uniform'),
               'prior_matched': expected_random_f1(priors[c], counts.size, 'prior_matched'),
               'reported': REPORTED_RANDOM_F1[label]}
        if not any(math.isclose(row[s], row['reported'], abs_tol=5e-4)
                   for s in ('uniform', 'prior_matched')):
            logger.warning('Random baseline for %s valence: reported %.3f, uniform %.3f, '
                           'prior matched %.3f', label, row['reported'], row['uniform'],
                           row['prior_matched'])
        rows.append(row)
    return rows


def _header() -> list[str]:
    return ['fusion', 'task'] + [f'{o}:{c}' for o, c in REPORT_COLUMNS]


def _cells(report: MetricsReport) -> list[str]:
    f1 = report.f1()
    return [report.fusion, report.task] + \
        [repr(float(f1[key])) if key in f1 else '' for key in REPORT_COLUMNS]


def report_render(reports: Sequence[MetricsReport]) -> tuple[str, str]:
    """Render F1 reports as a CSV document and an aligned text table.

    One row per report, one column per (output, class) in report order;
    classes a report does not cover are left empty.
    """

    rows = [_header()] + [_cells(r) for r in reports]

    buffer = io.StringIO()
    csv.writer(buffer, lineterminator='\n').writerows(rows)

    shown = [rows[0]] + [row[:2] + [f'{float(v):.3f}' if v else '-' for v in row[2:]]
                         for row in rows[1:]]
    widths = [max(len(row[i]) for row in shown) for i in range(len(shown[0]))]
    text = '\n'.join('  '.join(cell.rjust(w) if i > 1 else cell.ljust(w)
                               for i, (cell, w) in enumerate(zip(row, widths))).rstrip()
                     for row in shown)
    return buffer.getvalue(), text + '\n'


def parse_report_csv(text: str) -> list[MetricsReport]:
    """Read F1 reports back from `report_render` CSV output."""

    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != _header():
        raise FormatError('unexpected report header')
    reports = []
    for row in reader:
        if len(row) != len(header):
            raise FormatError(f'report row has {len(row)} cells, expected {len(header)}')
        classes = []
        for (output, label), cell in zip(REPORT_COLUMNS, row[2:]):
            if cell:
                value = float(cell)
                classes.append(ClassMetrics(output=output, label=label, precision=0.0,
                                            recall=0.0, f1=value))
        reports.append(MetricsReport(fusion=row[0], task=row[1], classes=classes))
    return reports


def load_table_iv() -> list[MetricsReport]:
    """F1 values of the three fusion models, joint and single task, as
    shipped with the package. Only F1 is populated."""

    text = resources.files('tt_fusion_workflow.fixtures').joinpath(TABLE_IV_FIXTURE).read_text()
    return parse_report_csv(text)


def table_iv_pair(fusion: str) -> tuple[MetricsReport, MetricsReport]:
    """Joint and single reports of one fusion kind from the fixture."""

    reports = {(r.fusion, r.task): r for r in load_table_iv()}
    try:
        return reports[fusion, 'joint'], reports[fusion, 'single']
    except KeyError:
        raise InvalidArgumentError(f'no fixture rows for fusion {fusion!r}') from None
