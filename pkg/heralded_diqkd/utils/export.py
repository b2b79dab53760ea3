# heralded_diqkd/utils/export.py
"""Writers for the files the commands produce: JSON reports, CSV tables and plot scripts."""
import csv
import io
import json
import logging
import math
import os
from typing import Any, Iterable, Optional, Sequence

from heralded_diqkd.utils.checks import ensure_inside_directory

logger = logging.getLogger(__name__)


def format_value(value: Any) -> str:
    """Stable text form of a table cell: floats with 12 significant digits."""
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        if math.isnan(value):
            return 'nan'
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return f'{value:.12g}'
    if value is None:
        return ''
    return str(value)


def _json_default(value: Any):
    # numpy scalars and arrays
    if hasattr(value, 'tolist'):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_text(path: str, text: str, root: str) -> str:
    """Writes `text` atomically inside `root` (a .part file renamed into place); returns the absolute path."""
    target = ensure_inside_directory(path, root)
    os.makedirs(os.path.dirname(target), exist_ok=True)
    temporary = target + '.part'
    with open(temporary, 'w', encoding='utf-8', newline='') as handle:
        handle.write(text)
    os.replace(temporary, target)
    logger.debug("Wrote %s", target)
    return target


def write_json(path: str, data: Any, root: str) -> str:
    """Writes `data` as indented JSON with sorted keys; returns the absolute path."""
    return write_text(path, json.dumps(data, indent=2, sort_keys=True, default=_json_default) + '\n', root)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]], root: str) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return write_text(path, buffer.getvalue(), root)


def write_plot_script(path: str, data_file: str, x_column: int, y_columns: Sequence[int],
                      titles: Sequence[str], root: str, xlabel: str = '', ylabel: str = '',
                      log_y: bool = False, title: Optional[str] = None) -> str:
    """
    Emits a gnuplot script plotting columns of a CSV file that sits next to the script.
    Columns are 1-based as gnuplot counts them.
    """
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set xlabel '{xlabel}'",
        f"set ylabel '{ylabel}'",
    ]
    if title:
        lines.append(f"set title '{title}'")
    if log_y:
        lines.append("set logscale y")
    plots = [f"'{os.path.basename(data_file)}' using {x_column}:{y} with linespoints title '{name}'"
             for y, name in zip(y_columns, titles)]
    lines.append("plot " + ", \\\n     ".join(plots))
    return write_text(path, '\n'.join(lines) + '\n', root)
