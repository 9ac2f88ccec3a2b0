"""
Evaluation statistics: Dice, MAE, Spearman and Wilcoxon signed-rank
"""

import csv
import io
import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats as sps

from .exceptions import (
    ErrorCode, FormatError, StatisticsError, ValidationError,
    create_file_not_found_error, create_shape_mismatch_error
)
from .file_writer import FileWriter
from .models import BinaryMask, CorrelationResult, EvalRecord, SubjectRecord, WilcoxonResult

logger = logging.getLogger(__name__)

RECORD_HEADER = ("subject_id", "image_id", "pd_true", "pd_pred", "breast_dsc", "dense_dsc", "failed")

# Spearman p-values use the t reference below this size, the normal above
NORMAL_APPROXIMATION_MIN_N = 30


def dice(x: BinaryMask, y: BinaryMask) -> float:
    """
    2|X ∩ Y| / (|X| + |Y|)

    Two empty masks agree perfectly and score 1.0.
    """
    if x.bits.shape != y.bits.shape:
        raise create_shape_mismatch_error("mask dims", x.bits.shape, y.bits.shape)
    total = x.area + y.area
    if total == 0:
        return 1.0
    return 2.0 * x.intersect(y).area / total


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator; 0 for n = 1)"""
    if len(values) == 0:
        raise ValidationError("Cannot summarise an empty sequence", ErrorCode.EMPTY_INPUT)
    array = np.asarray(values, dtype=np.float64)
    if len(array) == 1:
        return float(array[0]), 0.0
    return float(array.mean()), float(array.std(ddof=1))


def mae(pairs: Sequence[Tuple[float, Optional[float]]]) -> Tuple[float, float]:
    """
    Mean absolute error between true and predicted PD, with its std

    Args:
        pairs: (pd_true, pd_pred) in percentage points

    Returns:
        (mean, std) of |true - pred|, std with the n - 1 convention

    Raises:
        ValidationError: Empty input or an undefined prediction
    """
    if not pairs:
        raise ValidationError("MAE needs at least one pair", ErrorCode.EMPTY_INPUT)
    if any(pred is None for _, pred in pairs):
        raise ValidationError("MAE input contains undefined predictions", field_name="pd_pred")
    errors = [abs(true - pred) for true, pred in pairs]  # type: ignore[operator]
    return mean_std(errors)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """
    Pearson correlation coefficient, clamped to [-1, 1]

    Raises:
        StatisticsError: Unequal lengths or a constant input
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape:
        raise create_shape_mismatch_error("correlation inputs", x.shape, y.shape)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise StatisticsError("Correlation is undefined for a constant input",
                              suggestions=["Check that predictions vary across images"])
    return max(-1.0, min(1.0, float(np.dot(dx, dy)) / math.sqrt(sxx * syy)))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> CorrelationResult:
    """
    Spearman rank correlation with p-value and 95% confidence interval

    Ties get average ranks. The p-value uses t = rho * sqrt((n - 2) / (1 - rho^2))
    against Student's t with n - 2 degrees of freedom, or the normal
    distribution from n = 30 on. The interval is a Fisher transform with
    the Bonett-Wright standard error sqrt((1 + rho^2 / 2) / (n - 3)) and
    needs n >= 4.

    Raises:
        StatisticsError: Fewer than three pairs or a constant input
    """
    if len(xs) != len(ys):
        raise create_shape_mismatch_error("spearman inputs", len(xs), len(ys))
    n = len(xs)
    if n < 3:
        raise StatisticsError(f"Spearman correlation needs at least 3 pairs, got {n}", ErrorCode.EMPTY_INPUT)
    rho = pearson(sps.rankdata(xs), sps.rankdata(ys))

    if abs(rho) >= 1.0:
        p_value = 0.0
    else:
        t_stat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        if n >= NORMAL_APPROXIMATION_MIN_N:
            p_value = float(2.0 * sps.norm.sf(abs(t_stat)))
        else:
            p_value = float(2.0 * sps.t.sf(abs(t_stat), n - 2))

    ci_low = ci_high = None
    if n >= 4:
        if abs(rho) >= 1.0:
            ci_low = ci_high = rho
        else:
            z = math.atanh(rho)
            half_width = float(sps.norm.ppf(0.975)) * math.sqrt((1.0 + rho * rho / 2.0) / (n - 3))
            ci_low, ci_high = math.tanh(z - half_width), math.tanh(z + half_width)
    return CorrelationResult(rho=rho, p_value=min(1.0, p_value), n=n, ci_low=ci_low, ci_high=ci_high)


def wilcoxon_signed_rank(diffs: Sequence[float]) -> WilcoxonResult:
    """
    Two-sided Wilcoxon signed-rank test

    Zero differences are dropped; |d| is ranked with average ranks for
    ties; W+ sums the ranks of positive differences. The p-value is the
    normal approximation with tie-corrected variance
    n(n+1)(2n+1)/24 - sum(t^3 - t)/48 and a 0.5 continuity correction.
    All-zero input gives W+ = 0 and p = 1.
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(w_plus=0.0, p_value=1.0, n=0)

    ranks = sps.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    mean = n * (n + 1) / 4.0
    numerator = abs(w_plus - mean) - 0.5
    if numerator <= 0 or variance <= 0:
        p_value = 1.0
    else:
        p_value = min(1.0, float(2.0 * sps.norm.sf(numerator / math.sqrt(variance))))
    return WilcoxonResult(w_plus=w_plus, p_value=p_value, n=n)


def collapse_by_subject(records: Sequence[EvalRecord]) -> List[SubjectRecord]:
    """
    Average image-level metrics per subject

    Failed images (undefined PD) still contribute their DSC values but
    not to pd_pred or abs_error; a subject whose images all failed has
    both set to None.

    Returns:
        One record per subject, sorted by subject_id
    """
    if not records:
        raise ValidationError("No evaluation records to collapse", ErrorCode.EMPTY_INPUT)
    groups: "OrderedDict[str, List[EvalRecord]]" = OrderedDict()
    for record in sorted(records, key=lambda r: (r.subject_id, r.image_id)):
        groups.setdefault(record.subject_id, []).append(record)

    collapsed = []
    for subject_id, group in groups.items():
        defined = [r for r in group if not r.failed]
        collapsed.append(SubjectRecord(
            subject_id=subject_id,
            n_images=len(group),
            pd_true=float(np.mean([r.pd_true for r in group])),
            pd_pred=float(np.mean([r.pd_pred for r in defined])) if defined else None,
            abs_error=float(np.mean([r.abs_error for r in defined])) if defined else None,
            breast_dsc=float(np.mean([r.breast_dsc for r in group])),
            dense_dsc=float(np.mean([r.dense_dsc for r in group])),
        ))
    return collapsed


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _record_row(record: EvalRecord) -> List[str]:
    return [
        record.subject_id,
        record.image_id,
        repr(float(record.pd_true)),
        "" if record.pd_pred is None else repr(float(record.pd_pred)),
        repr(float(record.breast_dsc)),
        repr(float(record.dense_dsc)),
        "1" if record.failed else "0",
    ]


def write_eval_records(writer: FileWriter, relative_path: Union[str, Path],
                       records: Iterable[EvalRecord]) -> Path:
    """Write records with the pinned header, ordered by (subject_id, image_id)"""
    ordered = sorted(records, key=lambda r: (r.subject_id, r.image_id))
    return writer.write_csv(relative_path, RECORD_HEADER, (_record_row(r) for r in ordered))


def read_eval_records(path: Union[str, Path]) -> List[EvalRecord]:
    """
    Read records written by write_eval_records

    Raises:
        FileError: Missing file
        FormatError: Wrong header or malformed values
    """
    source = Path(path)
    if not source.exists():
        raise create_file_not_found_error(str(source))
    reader = csv.reader(io.StringIO(source.read_text(encoding="utf-8")))
    header = next(reader, None)
    if header is None or tuple(header) != RECORD_HEADER:
        raise FormatError(f"{source}: expected header {','.join(RECORD_HEADER)}",
                          ErrorCode.MALFORMED_HEADER, format_name="csv")
    records = []
    for line_number, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            subject_id, image_id, pd_true, pd_pred, breast_dsc, dense_dsc, _ = row
            records.append(EvalRecord(
                subject_id=subject_id,
                image_id=image_id,
                pd_true=float(pd_true),
                pd_pred=float(pd_pred) if pd_pred else None,
                breast_dsc=float(breast_dsc),
                dense_dsc=float(dense_dsc),
            ))
        except ValueError as e:
            raise FormatError(f"{source}:{line_number}: {e}", ErrorCode.MALFORMED_HEADER, format_name="csv")
    return records
