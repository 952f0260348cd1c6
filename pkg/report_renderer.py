"""
Report rendering services: JSON documents, console tables and
delimiter-separated series files
"""

import csv
import io
import json
from typing import Dict, List, Sequence

from interfaces import ReportRenderer


class JsonReportRenderer(ReportRenderer):
    """Renders a report as a JSON document"""

    def render(self, report: Dict, title: str) -> str:
        """Render report data into JSON format"""
        output_data = {
            "title": title,
            "report": report,
        }
        return json.dumps(output_data, indent=2, sort_keys=True, default=_json_default)


def _json_default(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _format_cell(value) -> str:
    if value is None:
        return "failed"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class TableRenderer(ReportRenderer):
    """Renders {"columns": [...], "rows": [[...], ...]} as an aligned plain-text table"""

    def render(self, report: Dict, title: str) -> str:
        columns: List[str] = list(report["columns"])
        rows = [[_format_cell(v) for v in row] for row in report["rows"]]
        widths = [len(c) for c in columns]
        for row in rows:
            widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
        lines = [title, "-" * max(len(title), sum(widths) + 2 * (len(widths) - 1))]
        lines.append("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
        for row in rows:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
        return "\n".join(lines) + "\n"


class SeriesRenderer(ReportRenderer):
    """Renders {"columns": [...], "rows": [...]} as comma-separated text for plotting tools"""

    def __init__(self, delimiter: str = ","):
        self.delimiter = delimiter

    def render(self, report: Dict, title: str) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, delimiter=self.delimiter, lineterminator="\n")
        writer.writerow([f"# {title}"])
        writer.writerow(report["columns"])
        for row in report["rows"]:
            writer.writerow(["" if v is None else v for v in row])
        return buffer.getvalue()


def signed_delta(value: float) -> str:
    """Delta-row convention: explicit sign, one decimal in AP points"""
    return f"{100.0 * value:+.1f}"


def table_from_dict(report: Dict[str, float], key_name: str = "metric",
                    value_name: str = "value", keys: Sequence[str] = ()) -> Dict:
    ordered = list(keys) if keys else sorted(report)
    return {"columns": [key_name, value_name], "rows": [[k, report[k]] for k in ordered if k in report]}
