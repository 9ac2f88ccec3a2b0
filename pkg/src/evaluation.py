"""
Held-out evaluation of trained cascades and the regime comparison report
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .cascade import CascadeModel, infer_many
from .exceptions import ErrorCode, StatisticsError, ValidationError
from .file_writer import FileWriter
from .models import (
    ComparisonReport, CorrelationResult, EvalRecord, MetricSummary, PairedComparison,
    PhantomSample, Regime
)
from .preprocess import DEFAULT_TAG_THRESHOLD
from .stats import collapse_by_subject, dice, mae, mean_std, spearman, wilcoxon_signed_rank, write_eval_records

logger = logging.getLogger(__name__)

METRICS = ("mae", "breast_dsc", "dense_dsc")
TRAINING_LABELS = "training-labels"

METRICS_HEADER = ("regime", "test_institution", "n_images", "n_failed", "mae_mean", "mae_std",
                 "breast_dsc_mean", "breast_dsc_std", "dense_dsc_mean", "dense_dsc_std", "rho")
PAIRED_TESTS_HEADER = ("baseline", "test_institution", "metric", "n_subjects", "w_plus", "p_value")
CORRELATIONS_HEADER = ("model", "test_institution", "n", "rho", "p_value", "ci_low", "ci_high")
SCATTER_HEADER = ("pd_true", "pd_pred")

EvaluationKey = Tuple[Regime, str]


@dataclass
class EvaluationProgress:
    """Progress information for one model evaluation"""
    completed: int
    total: int
    percentage: float
    elapsed_time: float


class Evaluator:
    """Runs a cascade over held-out samples and scores every image"""

    def __init__(self, batch_size: int = 16, workers: int = 1,
                 tag_threshold: float = DEFAULT_TAG_THRESHOLD,
                 logger: Optional[logging.Logger] = None):
        """
        Initialize evaluator

        Args:
            batch_size: Images per inference batch
            workers: Threads scoring batches concurrently
            tag_threshold: Relative intensity cut for tag removal
            logger: Optional logger for progress tracking
        """
        if batch_size < 1 or workers < 1:
            raise ValidationError("batch_size and workers must be >= 1", field_name="workers")
        self.batch_size = batch_size
        self.workers = workers
        self.tag_threshold = tag_threshold
        self.logger = logger or logging.getLogger(__name__)
        self._progress_callback: Optional[Callable[[EvaluationProgress], None]] = None

    def set_progress_callback(self, callback: Callable[[EvaluationProgress], None]) -> None:
        """Set callback function for progress updates"""
        self._progress_callback = callback

    def _score_batch(self, model: CascadeModel, batch: Sequence[PhantomSample]) -> List[EvalRecord]:
        results = infer_many(model, [sample.image for sample in batch], len(batch), self.tag_threshold)
        return [
            EvalRecord(
                subject_id=sample.subject_id,
                image_id=sample.image_id,
                pd_true=sample.pd_truth,
                pd_pred=result.pd_percent,
                breast_dsc=dice(result.breast_mask, sample.breast_truth),
                dense_dsc=dice(result.dense_mask, sample.dense_truth),
            )
            for sample, result in zip(batch, results)
        ]

    def evaluate(self, model: CascadeModel, samples: Sequence[PhantomSample]) -> List[EvalRecord]:
        """
        Score every sample

        Returns:
            One record per image, ordered by (subject_id, image_id)
            regardless of the worker count
        """
        start_time = time.time()
        batches = [list(samples[i:i + self.batch_size]) for i in range(0, len(samples), self.batch_size)]
        records: List[EvalRecord] = []

        def report(done: int) -> None:
            if self._progress_callback is not None and samples:
                self._progress_callback(EvaluationProgress(
                    completed=done,
                    total=len(samples),
                    percentage=100.0 * done / len(samples),
                    elapsed_time=time.time() - start_time,
                ))

        if self.workers == 1 or len(batches) <= 1:
            for batch in batches:
                records.extend(self._score_batch(model, batch))
                report(len(records))
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                for scored in pool.map(lambda b: self._score_batch(model, b), batches):
                    records.extend(scored)
                    report(len(records))

        failed = sum(1 for record in records if record.failed)
        if failed:
            self.logger.warning(f"{failed} of {len(records)} images had an empty predicted breast mask")
        self.logger.info(f"Evaluated {len(records)} images in {time.time() - start_time:.1f}s")
        return sorted(records, key=lambda r: (r.subject_id, r.image_id))


def evaluate_model(model: CascadeModel, samples: Sequence[PhantomSample], batch_size: int = 16,
                   workers: int = 1, tag_threshold: float = DEFAULT_TAG_THRESHOLD) -> List[EvalRecord]:
    """Per-image inference records, sorted by (subject_id, image_id)"""
    return Evaluator(batch_size, workers, tag_threshold).evaluate(model, samples)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _correlation(truth: Sequence[float], predicted: Sequence[float], label: str) -> Optional[CorrelationResult]:
    try:
        return spearman(truth, predicted)
    except StatisticsError as e:
        logger.warning(f"No correlation for {label}: {e.message}")
        return None


def summarize(regime: Regime, institution: str, records: Sequence[EvalRecord]) -> MetricSummary:
    """
    Metric summary for one regime on one test institution

    DSC means average the per-image values. Failed images count towards
    DSC (their breast DSC is 0) but not towards MAE or rho.
    """
    if not records:
        raise ValidationError(f"No records for {regime.value} on {institution}", ErrorCode.EMPTY_INPUT)
    defined = [r for r in records if not r.failed]
    mae_mean = mae_std = None
    if defined:
        mae_mean, mae_std = mae([(r.pd_true, r.pd_pred) for r in defined])
    breast_mean, breast_std = mean_std([r.breast_dsc for r in records])
    dense_mean, dense_std = mean_std([r.dense_dsc for r in records])
    return MetricSummary(
        regime=regime,
        test_institution=institution,
        n_images=len(records),
        n_failed=len(records) - len(defined),
        mae_mean=mae_mean,
        mae_std=mae_std,
        breast_dsc_mean=breast_mean,
        breast_dsc_std=breast_std,
        dense_dsc_mean=dense_mean,
        dense_dsc_std=dense_std,
        correlation=_correlation([r.pd_true for r in defined], [r.pd_pred for r in defined],  # type: ignore[misc]
                                 f"{regime.value} on {institution}"),
    )


def compare_to_baseline(federated: Sequence[EvalRecord], baseline: Sequence[EvalRecord],
                        baseline_regime: Regime, institution: str) -> List[PairedComparison]:
    """
    Paired tests: Wilcoxon signed-rank of federated minus baseline, by subject

    Subjects are paired by id; for MAE a subject is dropped when either
    model failed on all of its images.
    """
    fed_subjects = {s.subject_id: s for s in collapse_by_subject(federated)}
    base_subjects = {s.subject_id: s for s in collapse_by_subject(baseline)}
    shared = sorted(set(fed_subjects) & set(base_subjects))

    comparisons = []
    for metric in METRICS:
        attribute = "abs_error" if metric == "mae" else metric
        diffs = []
        for subject_id in shared:
            fed_value = getattr(fed_subjects[subject_id], attribute)
            base_value = getattr(base_subjects[subject_id], attribute)
            if fed_value is None or base_value is None:
                continue
            diffs.append(fed_value - base_value)
        if diffs:
            result = wilcoxon_signed_rank(diffs)
            p_value, w_plus = result.p_value, result.w_plus
        else:
            p_value = w_plus = None
        comparisons.append(PairedComparison(
            baseline=baseline_regime,
            test_institution=institution,
            metric=metric,
            n_subjects=len(diffs),
            p_value=p_value,
            w_plus=w_plus,
        ))
    return comparisons


def build_report(evaluations: Mapping[EvaluationKey, Sequence[EvalRecord]],
                 training_labels: Optional[Mapping[str, Sequence[Tuple[float, float]]]] = None) -> ComparisonReport:
    """
    Assemble the regime comparison

    Args:
        evaluations: (regime, test institution) -> per-image records
        training_labels: test institution -> (pd_truth, pd of the training
            label) pairs, reported as an extra correlation row

    Returns:
        ComparisonReport with summaries in regime order then institution
        order, federated-vs-baseline comparisons when a federated
        evaluation exists, correlations and scatter point lists
    """
    if not evaluations:
        raise ValidationError("Nothing to report: no evaluations given", ErrorCode.EMPTY_INPUT)
    regime_order = {regime: index for index, regime in enumerate(Regime)}
    keys = sorted(evaluations, key=lambda k: (regime_order[k[0]], k[1]))

    report = ComparisonReport()
    for regime, institution in keys:
        records = evaluations[(regime, institution)]
        summary = summarize(regime, institution, records)
        report.summaries.append(summary)
        report.correlations[(regime.value, institution)] = summary.correlation
        report.scatter[(regime.value, institution)] = [
            (r.pd_true, r.pd_pred) for r in records if r.pd_pred is not None
        ]

    for regime, institution in keys:
        if not regime.is_baseline or (Regime.FEDERATED, institution) not in evaluations:
            continue
        report.comparisons.extend(compare_to_baseline(
            evaluations[(Regime.FEDERATED, institution)], evaluations[(regime, institution)],
            regime, institution,
        ))

    for institution in sorted(training_labels or {}):
        pairs = training_labels[institution]  # type: ignore[index]
        report.correlations[(TRAINING_LABELS, institution)] = _correlation(
            [truth for truth, _ in pairs], [label for _, label in pairs], f"training labels of {institution}"
        )
    return report


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def metrics_rows(report: ComparisonReport) -> List[List[str]]:
    return [
        [s.regime.value, s.test_institution, str(s.n_images), str(s.n_failed),
         _fmt(s.mae_mean), _fmt(s.mae_std),
         _fmt(s.breast_dsc_mean), _fmt(s.breast_dsc_std),
         _fmt(s.dense_dsc_mean), _fmt(s.dense_dsc_std),
         _fmt(s.correlation.rho if s.correlation else None)]
        for s in report.summaries
    ]


def paired_test_rows(report: ComparisonReport) -> List[List[str]]:
    return [
        [c.baseline.value, c.test_institution, c.metric, str(c.n_subjects), _fmt(c.w_plus), _fmt(c.p_value)]
        for c in report.comparisons
    ]


def correlation_rows(report: ComparisonReport) -> List[List[str]]:
    rows = []
    for (model, institution), result in report.correlations.items():
        if result is None:
            rows.append([model, institution, "0", "", "", "", ""])
        else:
            rows.append([model, institution, str(result.n), _fmt(result.rho), _fmt(result.p_value),
                         _fmt(result.ci_low), _fmt(result.ci_high)])
    return rows


def write_report_tables(report: ComparisonReport, writer: FileWriter,
                        evaluations: Optional[Mapping[EvaluationKey, Sequence[EvalRecord]]] = None) -> List[str]:
    """
    Write the metrics, paired-test and correlation CSVs, scatter CSVs and, when given, per-model records

    Returns:
        Relative names of the files written
    """
    written = []
    writer.write_csv("metrics.csv", METRICS_HEADER, metrics_rows(report))
    writer.write_csv("paired_tests.csv", PAIRED_TESTS_HEADER, paired_test_rows(report))
    writer.write_csv("correlations.csv", CORRELATIONS_HEADER, correlation_rows(report))
    written.extend(["metrics.csv", "paired_tests.csv", "correlations.csv"])
    for (model, institution), points in report.scatter.items():
        name = f"scatter_{model}_{institution}.csv"
        writer.write_csv(name, SCATTER_HEADER, ([_fmt(t), _fmt(p)] for t, p in points))
        written.append(name)
    ordered = sorted((evaluations or {}).items(), key=lambda item: (item[0][0].value, item[0][1]))
    for (regime, institution), records in ordered:
        name = f"records_{regime.value}_{institution}.csv"
        write_eval_records(writer, name, records)
        written.append(name)
    return written
