"""
Human-readable comparison report rendered from jinja2 templates
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union
from jinja2 import Environment, FileSystemLoader, TemplateNotFound
import logging

try:
    from .exceptions import ConfigurationError, create_file_not_found_error
    from .models import ComparisonReport, CorrelationResult
except ImportError:
    from exceptions import ConfigurationError, create_file_not_found_error
    from models import ComparisonReport, CorrelationResult

REPORT_TEMPLATE = "report.md"
DEFAULT_TEMPLATES_DIR = Path(__file__).parent / "templates"


class TextTable:
    """Header plus string cells, padded to common column widths"""

    def __init__(self, header: Sequence[str], rows: Sequence[Sequence[str]]):
        self.header = list(header)
        self.rows = [list(row) for row in rows]
        self.widths = [
            max(len(str(cell)) for cell in column)
            for column in zip(self.header, *self.rows)
        ]

    def lines(self) -> List[str]:
        def line(cells: Sequence[str]) -> str:
            return "  ".join(str(c).ljust(w) for c, w in zip(cells, self.widths)).rstrip()

        rule = "  ".join("-" * w for w in self.widths)
        return [line(self.header), rule] + [line(row) for row in self.rows]


class ReportRenderer:
    """Renders a ComparisonReport into aligned-text markdown"""

    def __init__(self, templates_dir: Optional[Union[str, Path]] = None,
                 precision: int = 4, logger: Optional[logging.Logger] = None):
        """
        Initialize report renderer

        Args:
            templates_dir: Directory containing report.md
            precision: Decimal places for metric cells
        """
        self.templates_dir = Path(templates_dir) if templates_dir else DEFAULT_TEMPLATES_DIR
        self.precision = precision
        self.logger = logger or logging.getLogger(__name__)
        try:
            self.env = Environment(
                loader=FileSystemLoader(str(self.templates_dir)),
                trim_blocks=True,
                lstrip_blocks=True,
                keep_trailing_newline=True
            )
            self.env.filters.update({
                'num': self._num,
                'pm': self._plus_minus,
            })
            self.env.globals.update({
                'aligned': lambda table: "\n".join(table.lines()),
            })
        except Exception as e:
            raise ConfigurationError(f"Failed to initialize template environment: {e}")

    def _num(self, value: Optional[float], digits: Optional[int] = None) -> str:
        if value is None:
            return "-"
        return f"{value:.{self.precision if digits is None else digits}f}"

    def _plus_minus(self, mean: Optional[float], std: Optional[float]) -> str:
        if mean is None:
            return "-"
        return f"{self._num(mean)} ± {self._num(std)}"

    def _interval(self, result: Optional[CorrelationResult]) -> str:
        if result is None or result.ci_low is None:
            return "-"
        return f"[{self._num(result.ci_low)}, {self._num(result.ci_high)}]"

    def metrics_table(self, report: ComparisonReport) -> TextTable:
        return TextTable(
            ["Regime", "Test", "Images", "Failed", "MAE (%)", "Breast DSC", "Dense DSC", "rho"],
            [[s.regime.value, s.test_institution, str(s.n_images), str(s.n_failed),
              self._plus_minus(s.mae_mean, s.mae_std),
              self._plus_minus(s.breast_dsc_mean, s.breast_dsc_std),
              self._plus_minus(s.dense_dsc_mean, s.dense_dsc_std),
              self._num(s.correlation.rho if s.correlation else None)]
             for s in report.summaries],
        )

    def paired_tests_table(self, report: ComparisonReport) -> TextTable:
        return TextTable(
            ["Baseline", "Test", "Metric", "Subjects", "W+", "p"],
            [[c.baseline.value, c.test_institution, c.metric, str(c.n_subjects),
              self._num(c.w_plus, 1), self._num(c.p_value)]
             for c in report.comparisons],
        )

    def correlations_table(self, report: ComparisonReport) -> TextTable:
        rows = []
        for (model, institution), result in report.correlations.items():
            rows.append([
                model, institution,
                str(result.n) if result else "0",
                self._num(result.rho if result else None),
                self._num(result.p_value if result else None),
                self._interval(result),
            ])
        return TextTable(["Model", "Test", "n", "rho", "p", "95% CI"], rows)

    def render(self, report: ComparisonReport, title: str = "Density federation report",
               context: Optional[Dict[str, Any]] = None) -> str:
        """
        Render the report

        Args:
            report: Comparison to render
            title: Heading of the document
            context: Extra key/value pairs listed under the heading (seed,
                config path, ...)

        Raises:
            FileError: Missing report template
        """
        try:
            template = self.env.get_template(REPORT_TEMPLATE)
        except TemplateNotFound:
            raise create_file_not_found_error(str(self.templates_dir / REPORT_TEMPLATE))
        rendered = template.render(
            title=title,
            context=sorted((context or {}).items()),
            metrics=self.metrics_table(report),
            paired_tests=self.paired_tests_table(report),
            correlations=self.correlations_table(report),
            has_comparisons=bool(report.comparisons),
        )
        self.logger.debug(f"Rendered report with {len(report.summaries)} summaries")
        return rendered
