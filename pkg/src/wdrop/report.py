"""Result rows, CSV round-tripping, aligned tables and figures."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

MODE_ORDER = {"none": 0, "W": 1, "D": 2, "W&D": 3}


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class ReportRow:
    label: str
    mode: str
    kind: str
    placement: str
    k_shot: int
    mean: float
    ci: float
    seeds: int
    wall_time: float = 0.0
    std_across_seeds: float = 0.0
    base_accuracy: float | None = None
    episodes: int = 0
    fingerprint: str = ""

    def __post_init__(self):
        for name in ("mean", "ci", "wall_time", "std_across_seeds", "base_accuracy"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ReportError(f"ReportRow.{name} must be finite, got {getattr(self, name)}")

    def sort_key(self):
        return (MODE_ORDER.get(self.mode, len(MODE_ORDER)), self.mode, self.kind, self.placement, self.k_shot, self.label)


# wall time varies run to run, so it lives in timings.csv instead
CSV_FIELDS = [f.name for f in fields(ReportRow) if f.name != "wall_time"]
_INT = {"k_shot", "seeds", "episodes"}
_FLOAT = {"mean", "ci", "wall_time", "std_across_seeds", "base_accuracy"}


def _cell(value) -> str:
    if value is None:
        return ""
    # repr round-trips every finite float exactly
    return repr(float(value)) if isinstance(value, float) else str(value)


def rows_to_csv(rows: Iterable[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([_cell(getattr(r, f)) for f in CSV_FIELDS])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[ReportRow]:
    reader = csv.DictReader(io.StringIO(text))
    missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
    if missing:
        raise ReportError(f"results CSV lacks columns {sorted(missing)}")
    out = []
    for rec in reader:
        kw = {}
        for k in CSV_FIELDS:
            v = rec[k]
            if k in _INT:
                kw[k] = int(v)
            elif k in _FLOAT:
                kw[k] = float(v) if v != "" else None
            else:
                kw[k] = v
        out.append(ReportRow(**kw))
    return out


def write_results(rows: Sequence[ReportRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(rows))
    return path


def read_results(path: str | Path) -> list[ReportRow]:
    return rows_from_csv(Path(path).read_text())


def write_timings(rows: Sequence[ReportRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "k_shot", "seeds", "wall_time"])
        for r in rows:
            w.writerow([r.label, r.k_shot, r.seeds, repr(float(r.wall_time))])
    return path


def pm(mean: float, ci: float) -> str:
    """Accuracy as a percentage, e.g. ``60.95±0.87``."""
    return f"{mean * 100:.2f}±{ci * 100:.2f}"


def format_table(rows: Sequence[ReportRow]) -> str:
    """One line per row, columns padded to a common width."""
    header = ["label", "mode", "kind", "placement", "shot", "accuracy", "base", "seeds"]
    body = [
        [
            r.label,
            r.mode,
            r.kind,
            r.placement,
            f"{r.k_shot}-shot",
            pm(r.mean, r.ci),
            "-" if r.base_accuracy is None else f"{r.base_accuracy * 100:.2f}",
            str(r.seeds),
        ]
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_figure(rows: Sequence[ReportRow], path: str | Path, title: str = "") -> Path:
    """Bar chart of mean accuracy with CI whiskers, one group per k-shot."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    shots = sorted({r.k_shot for r in rows})
    labels = list(dict.fromkeys(r.label for r in rows))
    by = {(r.label, r.k_shot): r for r in rows}
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels) * len(shots)), 3.6))
    width = 0.8 / max(len(shots), 1)
    for j, k in enumerate(shots):
        xs, ys, es = [], [], []
        for i, lab in enumerate(labels):
            r = by.get((lab, k))
            if r is not None:
                xs.append(i + (j - (len(shots) - 1) / 2) * width)
                ys.append(r.mean * 100)
                es.append(r.ci * 100)
        ax.bar(xs, ys, width, yerr=es, capsize=3, label=f"{k}-shot")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("accuracy (%)")
    lo = min((r.mean - r.ci) * 100 for r in rows)
    ax.set_ylim(max(0.0, lo - 5), min(100.0, max((r.mean + r.ci) * 100 for r in rows) + 5))
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
