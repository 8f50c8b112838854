"""CSV metrics sink and placement tables."""
import csv
import math

import numpy as np

from . import dist
from .trainer import METRIC_FIELDS, MetricsRow

INT_FIELDS = {"epoch", "iteration", "decomp_interval", "allreduce_calls", "allgather_calls", "element_volume"}


def _fmt(name, value):
    if name in INT_FIELDS:
        return str(int(value))
    return f"{float(value):.9g}"


def emit_report(rows, path):
    """Write metrics rows as CSV; floats carry 9 significant digits."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_FIELDS)
            for row in rows:
                writer.writerow([_fmt(name, getattr(row, name)) for name in METRIC_FIELDS])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc.strerror or exc}") from exc
    return path


def read_report(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for rec in reader:
            vals = {}
            for name, text in zip(header, rec):
                vals[name] = int(text) if name in INT_FIELDS else float(text)
            rows.append(MetricsRow(**vals))
    return rows


class CsvSink:
    """Incremental writer used by the CLI so partial runs leave a readable file."""

    def __init__(self, path):
        self.path = path
        try:
            self._fh = open(path, "w", newline="")
        except OSError as exc:
            raise OSError(f"cannot write metrics to {path}: {exc.strerror or exc}") from exc
        self._writer = csv.writer(self._fh)
        self._writer.writerow(METRIC_FIELDS)

    def __call__(self, row):
        self._writer.writerow([_fmt(name, getattr(row, name)) for name in METRIC_FIELDS])
        self._fh.flush()

    def close(self):
        self._fh.close()


# --------------------------------------------------------------- placement --

def heavy_tailed_sizes(seed, count, low=16, high=1024, shape=2.0):
    """Factor dimensions with a Pareto tail, clipped to ``[low, high]``."""
    rng = np.random.default_rng(seed)
    raw = low * (1.0 + rng.pareto(shape, size=count))
    return [int(v) for v in np.clip(np.round(raw), low, high)]


def sizes_to_factors(sizes):
    """Pair consecutive sizes as the A and G factors of successive layers."""
    sizes = list(sizes)
    if len(sizes) % 2:
        sizes.append(sizes[-1])
    return dist.factor_list(list(zip(sizes[0::2], sizes[1::2])))


def placement_table(factors, worker_counts):
    rows = []
    for w in worker_counts:
        entry = {"workers": w}
        for policy in ("roundrobin", "sized"):
            rep = dist.report_imbalance(dist.assign(factors, w, policy))
            entry[policy] = rep
        rows.append(entry)
    return rows


def _speed(x):
    return "    idle" if math.isinf(x) else f"{x:8.2f}"


def format_placement_table(rows):
    lines = [
        "            |          round-robin           |          size-balanced",
        "  workers   |  min-spd   max-spd   max-cost  |  min-spd   max-spd   max-cost",
        "  ----------+--------------------------------+-------------------------------",
    ]
    for r in rows:
        rr, sz = r["roundrobin"], r["sized"]
        lines.append(
            f"  {r['workers']:>8}  | {_speed(rr.min_speedup)}  {_speed(rr.max_speedup)}  {rr.max_cost:>9.3g} "
            f" | {_speed(sz.min_speedup)}  {_speed(sz.max_speedup)}  {sz.max_cost:>9.3g}"
        )
    lines.append("")
    lines.append("  parameters per worker (min / max):")
    for r in rows:
        rr, sz = r["roundrobin"], r["sized"]
        lines.append(
            f"  {r['workers']:>8}  round-robin {rr.min_params:.3g} / {rr.max_params:.3g}"
            f"   size-balanced {sz.min_params:.3g} / {sz.max_params:.3g}"
        )
    return "\n".join(lines)
