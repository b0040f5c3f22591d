"""Deterministic CSV/JSON emission shared by the experiment harness."""

from __future__ import annotations

import json
from pathlib import Path


def fmt(x) -> str:
    """Stable scalar formatting: 17 significant digits for floats."""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return format(x, ".17g")
    if x is None:
        return ""
    return str(x)


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    """Rows share a column set; order is the first row's key order by default."""
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    cols = columns or list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(fmt(row.get(c)) for c in cols))
    path.write_text("\n".join(lines) + "\n")


def _jsonable(obj):
    import numpy as np

    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_json(path, payload: dict) -> None:
    Path(path).write_text(
        json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"
    )


def write_plot_script(path, csv_name: str, x: str, y: str, title: str,
                      logy: bool = True) -> None:
    """Emit a small gnuplot script next to the data instead of an image."""
    lines = [
        f'set title "{title}"',
        "set datafile separator ','",
        f'set xlabel "{x}"',
        f'set ylabel "{y}"',
    ]
    if logy:
        lines.append("set logscale y")
    lines.append(
        f"plot '{csv_name}' using "
        f"(column('{x}')):(column('{y}')) with linespoints notitle"
    )
    Path(path).write_text("\n".join(lines) + "\n")
