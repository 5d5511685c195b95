"""
SVG line charts from metrics, sweep, ablation and sampling CSVs
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from core.exceptions import CsvParseError  # noqa: E402

logger = logging.getLogger(__name__)

# fixed ids and no timestamp: identical input gives identical bytes
SVG_STYLE = {
    "svg.hashsalt": "trg-lab",
    "svg.fonttype": "none",
    "path.simplify": False,
}


@dataclass
class Series:
    label: str
    xs: List
    ys: List[float]


def _parse_error_line(message: str) -> int:
    match = re.search(r"line (\d+)", message)
    return int(match.group(1)) if match else 0


def read_table(path: Union[str, Path]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise CsvParseError(1, f"{path} is empty") from None
    except pd.errors.ParserError as e:
        raise CsvParseError(_parse_error_line(str(e)), str(e)) from None
    if frame.empty:
        raise CsvParseError(2, f"{path} has a header but no data rows")
    return frame


def load_series(path: Union[str, Path], y: str = "top1") -> Tuple[str, List[Series]]:
    """Pick the x column and series grouping from the CSV's header"""
    frame = read_table(path)
    if y not in frame.columns:
        raise CsvParseError(1, f"missing column {y!r} (have {', '.join(frame.columns)})")

    values = pd.to_numeric(frame[y], errors="coerce")
    bad = values.isna() & frame[y].notna()
    if bad.any():
        row = int(bad.idxmax())
        raise CsvParseError(row + 2, f"non-numeric {y} value {frame[y][row]!r}")

    if "epoch" in frame.columns:
        x, group = "epoch", "split" if "split" in frame.columns else None
    elif "heads" in frame.columns:
        x, group = "heads", None
    elif "sampling" in frame.columns:
        x, group = "sampling", "variant" if "variant" in frame.columns else None
    else:
        x, group = frame.columns[0], None

    frame = frame.assign(**{y: values}).dropna(subset=[y])
    if group is None:
        return x, [Series(y, frame[x].tolist(), frame[y].tolist())]
    series = [
        Series(str(name), part[x].tolist(), part[y].tolist())
        for name, part in frame.groupby(group, sort=False)
    ]
    return x, series


def plot_series(x_label: str, y_label: str, series: List[Series], out_path: Union[str, Path],
                title: Optional[str] = None) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(SVG_STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        for s in series:
            xs = [str(v) for v in s.xs] if any(isinstance(v, str) for v in s.xs) else s.xs
            (line,) = ax.plot(xs, s.ys, label=s.label)
            line.set_gid(f"series-{s.label}")
        ax.set_xlabel(x_label)
        ax.set_ylabel(y_label)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    logger.info(f"Chart saved to {out_path}")
    return out_path


def plot_csv(csv_path: Union[str, Path], out_path: Union[str, Path], y: str = "top1") -> Path:
    x, series = load_series(csv_path, y)
    return plot_series(x, y, series, out_path, title=Path(csv_path).stem)
