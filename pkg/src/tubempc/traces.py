"""CSV emission of episode traces.

Floats are written with ``repr``, the shortest decimal that round-trips, so
reading a file back reproduces every value bit for bit.
"""
from __future__ import annotations

import csv

import numpy as np

from .simulation import SimTrace

TRACE_COLUMNS = (
    "t", "x", "y", "th1", "th2", "th3",
    "xs", "ys", "th1s", "th2s", "th3s",
    "u1", "u2", "u3", "v1", "v2", "v3",
    "e_norm", "stage_cost", "pos_err", "viol", "solve_latency_steps",
)
_INT_COLUMNS = ("viol", "solve_latency_steps")


def fmt_float(x) -> str:
    return repr(float(x))


def trace_rows(trace: SimTrace):
    e_norm = trace.e_norm
    for k in range(len(trace)):
        row = [fmt_float(trace.t[k])]
        row += [fmt_float(v) for v in trace.z[k]]
        row += [fmt_float(v) for v in trace.z_star[k]]
        row += [fmt_float(v) for v in trace.u[k]]
        row += [fmt_float(v) for v in trace.v[k]]
        row += [fmt_float(e_norm[k]), fmt_float(trace.stage_cost[k]), fmt_float(trace.pos_err[k])]
        row += [str(int(trace.viol[k])), str(int(trace.latency[k]))]
        yield row


def emit_trace(trace: SimTrace, path) -> None:
    """Write one header row and one row per step."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            w.writerows(trace_rows(trace))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write trace: {exc.strerror}", str(path)) from exc


def read_trace(path) -> dict:
    """Column name -> array (float, or int for the flag/latency columns)."""
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = list(r)
    out = {}
    for j, name in enumerate(header):
        col = [row[j] for row in rows]
        out[name] = np.array([int(c) for c in col], dtype=np.int64) if name in _INT_COLUMNS else \
            np.array([float(c) for c in col], dtype=float)
    return out
