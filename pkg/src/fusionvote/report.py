"""
Plain-text reports: titled sections holding tables or free text, and a
closing ``[metrics]`` block of ``name=value`` lines for machine parsing.

The first line is a timestamp header; everything after it is a pure
function of the inputs, so reports from identical runs compare equal
after :func:`strip_header`.
"""
from __future__ import annotations

import datetime as _dt

import numpy as np

HEADER_PREFIX = "# fusionvote report generated "


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.4f}"
    return str(value)


def format_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def confusion_table(confusion: np.ndarray, class_names) -> str:
    """Rows are true classes, columns predictions, entries in percent."""
    headers = ["true\\pred"] + list(class_names)
    rows = [[name] + [f"{100 * v:.2f}" for v in row] for name, row in zip(class_names, confusion)]
    return format_table(headers, rows)


def rank_table(distributions: dict[str, np.ndarray]) -> str:
    C = len(next(iter(distributions.values())))
    headers = ["network"] + [f"rank{k}" for k in range(1, C + 1)]
    rows = [[name] + [f"{100 * v:.2f}" for v in dist] for name, dist in distributions.items()]
    return format_table(headers, rows)


class Report:
    def __init__(self, title: str):
        self.title = title
        self.sections: list[tuple[str, str]] = []
        self.metrics: dict[str, object] = {}

    def add(self, name: str, body: str) -> None:
        self.sections.append((name, body.rstrip("\n")))

    def add_table(self, name: str, headers, rows) -> None:
        self.add(name, format_table(headers, rows))

    def metric(self, name: str, value) -> None:
        self.metrics[name] = value

    def body(self) -> str:
        parts = [f"== {self.title} =="]
        for name, text in self.sections:
            parts.append(f"[{name}]\n{text}")
        parts.append("[metrics]\n" + "\n".join(f"{k}={fmt(v)}" for k, v in self.metrics.items()))
        return "\n\n".join(parts) + "\n"

    def render(self, timestamp: str | None = None) -> str:
        stamp = timestamp or _dt.datetime.now().isoformat(timespec="seconds")
        return f"{HEADER_PREFIX}{stamp}\n{self.body()}"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.render())


def strip_header(text: str) -> str:
    lines = text.splitlines(keepends=True)
    if lines and lines[0].startswith(HEADER_PREFIX):
        lines = lines[1:]
    return "".join(lines)


def parse_metrics(text: str) -> dict[str, str]:
    """Read back the ``[metrics]`` block of a rendered report."""
    _, _, block = text.partition("[metrics]\n")
    out = {}
    for line in block.splitlines():
        if not line.strip():
            break
        key, _, value = line.partition("=")
        out[key] = value
    return out
