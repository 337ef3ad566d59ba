"""Controller comparison: run every (controller, task, seed) and tabulate.

Output layout under ``out``::

    manifest.json                 written before the first episode
    runs/<task>_<controller>_seed<k>.csv
    summary.csv                   one row per run
    plot_<task>_error.csv         time vs. seed-mean position error per controller
    plot_<task>_xy.csv            end-point polyline per controller (first seed) and the reference
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ResolvedConfig
from .simulation import ControllerKind, metrics_summary, reference_trajectory, run_episode
from .traces import emit_trace, fmt_float

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = (
    "controller", "task", "seed", "status", "failure_step", "final_error", "mean_error",
    "steady_state_error", "total_cost", "violation_count", "mean_solve_latency_steps", "trace_file",
)
ORDER = ("optimal", "smooth", "delayed")


@dataclass
class CompareResult:
    rows: list
    verdicts: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)

    @property
    def ordering_ok(self) -> bool:
        return all(v["ok"] for v in self.verdicts.values())


def run_name(task: str, controller: str, seed: int) -> str:
    return f"{task}_{controller}_seed{seed}.csv"


def write_manifest(out: Path, rc: ResolvedConfig, controllers, tasks, seeds) -> dict:
    runs = [{"controller": c, "task": t.name, "seed": int(s), "file": f"runs/{run_name(t.name, c, s)}"}
            for t in tasks for c in controllers for s in seeds]
    manifest = {
        "tool": "tubempc",
        "version": __version__,
        "config_hash": rc.config_hash,
        "seeds": [int(s) for s in seeds],
        "controllers": list(controllers),
        "tasks": [t.name for t in tasks],
        "output_dir": str(out),
        "runs": runs,
        "config": rc.data,
    }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def ordering_verdict(rows, controllers) -> dict:
    """Seed-mean steady-state error must satisfy optimal <= smooth <= delayed per task.

    Also checks that the smooth controller ends within 0.1 m on the position task.
    """
    verdicts = {}
    if not all(c in controllers for c in ORDER):
        return verdicts
    for task in sorted({r["task"] for r in rows}):
        mean = {}
        for c in ORDER:
            vals = [r["steady_state_error"] for r in rows if r["task"] == task and r["controller"] == c]
            ok_runs = all(r["status"] == "ok" for r in rows if r["task"] == task and r["controller"] == c)
            mean[c] = float(np.mean(vals)) if vals and ok_runs else np.nan
        ok = bool(mean["optimal"] <= mean["smooth"] <= mean["delayed"])
        v = {"steady_state_error": mean, "ok": ok}
        if task == "position":
            finals = [r["final_error"] for r in rows if r["task"] == task and r["controller"] == "smooth"]
            v["smooth_final_error_max"] = float(np.max(finals))
            v["ok"] = ok and v["smooth_final_error_max"] < 0.1
        verdicts[task] = v
    return verdicts


def _write_plot_data(out: Path, task, traces: dict, controllers):
    """``traces`` maps controller -> list of traces (seed order)."""
    n = int(round(task.duration / next(iter(traces.values()))[0].delta)) + 1
    delta = next(iter(traces.values()))[0].delta
    t = np.arange(n) * delta
    cols = {}
    for c in controllers:
        stack = np.full((len(traces[c]), n), np.nan)
        for i, tr in enumerate(traces[c]):
            stack[i, :len(tr)] = tr.pos_err
        with np.errstate(all="ignore"):
            cols[c] = np.array([np.nan if np.all(np.isnan(col)) else np.nanmean(col) for col in stack.T])
    with open(out / f"plot_{task.name}_error.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + list(controllers))
        for k in range(n):
            w.writerow([fmt_float(t[k])] + [fmt_float(cols[c][k]) for c in controllers])
    with open(out / f"plot_{task.name}_xy.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "t", "x", "y"])
        for k in range(n):
            p = reference_trajectory(task, min(t[k], task.duration))
            w.writerow(["reference", fmt_float(t[k]), fmt_float(p[0]), fmt_float(p[1])])
        for c in controllers:
            tr = traces[c][0]
            for k in range(len(tr)):
                w.writerow([c, fmt_float(tr.t[k]), fmt_float(tr.z[k, 0]), fmt_float(tr.z[k, 1])])


def run_compare(rc: ResolvedConfig, out, controllers=None, tasks=None, seeds=None,
                progress=None, keep_traces: bool = False) -> CompareResult:
    """Run the sweep, write every output file and compute the ordering verdict.

    A failed episode is recorded in the summary and the sweep continues. With
    ``keep_traces`` the in-memory traces are returned keyed by
    ``(controller, task, seed)``.
    """
    out = Path(out)
    controllers = tuple(ControllerKind(c).value for c in (controllers or rc.controllers))
    tasks = tuple(tasks or rc.tasks)
    seeds = tuple(int(s) for s in (seeds if seeds is not None else rc.seeds))
    write_manifest(out, rc, controllers, tasks, seeds)
    (out / "runs").mkdir(exist_ok=True)
    rows, failures, kept = [], [], {}
    for task in tasks:
        traces = {c: [] for c in controllers}
        for c in controllers:
            for s in seeds:
                tr = run_episode(rc.with_seed(s), c, task)
                name = run_name(task.name, c, s)
                emit_trace(tr, out / "runs" / name)
                traces[c].append(tr)
                if keep_traces:
                    kept[(c, task.name, s)] = tr
                ms = metrics_summary(tr)
                row = {"controller": c, "task": task.name, "seed": s, "status": tr.status,
                       "failure_step": "" if tr.failure_step is None else tr.failure_step,
                       **ms, "trace_file": f"runs/{name}"}
                rows.append(row)
                if tr.status != "ok":
                    failures.append((c, task.name, s, tr.failure))
                if progress is not None:
                    progress(row)
        _write_plot_data(out, task, traces, controllers)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([fmt_float(r[k]) if isinstance(r[k], float) else str(r[k]) for k in SUMMARY_COLUMNS])
    return CompareResult(rows=rows, verdicts=ordering_verdict(rows, controllers), failures=failures, traces=kept)


def format_verdicts(verdicts: dict) -> str:
    lines = []
    for task, v in verdicts.items():
        m = v["steady_state_error"]
        line = (f"ordering {task}: optimal {m['optimal']:.4f} <= smooth {m['smooth']:.4f} "
                f"<= delayed {m['delayed']:.4f}")
        if "smooth_final_error_max" in v:
            line += f"; smooth final error max {v['smooth_final_error_max']:.4f} < 0.1"
        lines.append(f"{line}: {'PASS' if v['ok'] else 'FAIL'}")
    return "\n".join(lines)
