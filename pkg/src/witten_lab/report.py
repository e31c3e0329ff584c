"""JSON reports and CSV tables."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

# keys that legitimately differ between identical runs
VOLATILE = ("timings", "cache")


def jsonable(obj):
    """Plain-python copy with numpy scalars/arrays unwrapped and non-finite floats spelled out."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def dumps(report: dict) -> str:
    return json.dumps(jsonable(report), sort_keys=True, indent=2) + "\n"


def canonical(report: dict) -> str:
    """Serialization without run-dependent fields, for determinism comparisons."""
    return dumps({k: v for k, v in report.items() if k not in VOLATILE})


def write_report(report: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(dumps(report))
    return path


def write_tables(tables: dict, out_dir) -> list[Path]:
    """One CSV per table; the four standard tables are always written (header only when empty)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    defaults = {
        "eigenvalues.csv": ("T", "degree", "index", "eigenvalue", "residual", "gap_next"),
        "decay_scatter.csv": ("T", "degree", "mode", "rho", "log_abs"),
        "flowlines.csv": ("orbit", "source", "target", "sign", "point", "t", "f"),
        "betti.csv": ("source",),
    }
    paths = []
    for name in sorted(set(defaults) | set(tables)):
        header, rows = tables.get(name, (defaults.get(name, ()), []))
        p = out / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        paths.append(p)
    return paths
