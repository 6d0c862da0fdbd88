"""Deterministic artifact writers: JSON summaries, CSV tables and legacy VTK meshes."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .fespace import FieldP, FieldU
from .geometry import Mesh

VTK_TETRA = 10


def _plain(obj):
    """Convert numpy scalars/arrays and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def dumps(data) -> str:
    return json.dumps(_plain(data), sort_keys=True, indent=2) + "\n"


def write_json(path, data) -> None:
    Path(path).write_text(dumps(data))


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12e}"
    if isinstance(v, (np.integer,)):
        return int(v)
    return "" if v is None else v


def write_csv(path, rows, columns=None) -> None:
    """Rows are dicts; columns default to the keys of the first row."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_cell(r.get(c)) for c in columns])


def _num(a) -> str:
    return " ".join(f"{x:.10g}" for x in np.asarray(a, dtype=float).ravel())


def write_vtk(path, mesh: Mesh, u: FieldU | None = None, P: FieldP | None = None,
              title: str = "micromorph fields") -> None:
    """Legacy ASCII unstructured grid; ``u`` at vertices, ``P`` and ``Curl P`` at cell centroids."""
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " "), "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines += [_num(v) for v in mesh.vertices]
    nc = mesh.n_cells
    lines.append(f"CELLS {nc} {5 * nc}")
    lines += ["4 " + " ".join(str(int(i)) for i in t) for t in mesh.tets]
    lines.append(f"CELL_TYPES {nc}")
    lines += [str(VTK_TETRA)] * nc
    if u is not None:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        lines.append("VECTORS u double")
        lines += [_num(v) for v in u.coeffs.reshape(3, -1).T]
    if P is not None:
        cells = np.arange(nc)
        bary = np.full((nc, 4), 0.25)
        lines.append(f"CELL_DATA {nc}")
        for name, val in (("P", P.value_in(cells, bary)), ("CurlP", P.curl_in(cells))):
            lines.append(f"TENSORS {name} double")
            lines += [_num(t) for t in val]
    Path(path).write_text("\n".join(lines) + "\n")
