"""Reading and writing meshes, boundary data and vertex fields (JSON, CSV, legacy VTK)."""

from __future__ import annotations

import csv
import hashlib
import json
import re
from pathlib import Path

import numpy as np

from penn.mesh import BoundarySpec, Mesh, StructuredGrid, TensorField

_COMPONENTS = {0: [""], 1: ["x", "y", "z"], 2: [a + b for a in "xyz" for b in "xyz"]}
_COLUMN = re.compile(r"^([A-Za-z0-9]+)(?:_([xyz]{1,2}))?(?:_c(\d+))?$")


def write_json(obj, path):
    """Deterministic JSON (sorted keys, fixed separators, trailing newline)."""
    text = json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": "))
    Path(path).write_text(text + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -------------------------------------------------------------------- mesh

def mesh_to_dict(mesh: Mesh, bc: BoundarySpec = None) -> dict:
    d = {
        "vertices": mesh.vertices.tolist(),
        "cells": mesh.cells.tolist(),
        "boundary_faces": mesh.boundary_faces.tolist(),
    }
    if mesh.grid is not None:
        d["grid"] = mesh.grid.to_dict()
    if bc is not None:
        d.update(bc_to_dict(bc))
    return d


def mesh_from_dict(d) -> Mesh:
    grid = StructuredGrid.from_dict(d["grid"]) if d.get("grid") else None
    faces = np.asarray(d.get("boundary_faces", []), dtype=np.int64).reshape(-1, 4)
    return Mesh(np.asarray(d["vertices"], float), np.asarray(d["cells"], np.int64), faces, grid)


def save_mesh(mesh: Mesh, path, bc: BoundarySpec = None):
    write_json(mesh_to_dict(mesh, bc), path)


def load_mesh(path) -> Mesh:
    return mesh_from_dict(read_json(path))


def bc_to_dict(bc: BoundarySpec) -> dict:
    return {
        "rank": bc.rank,
        "channels": bc.channels,
        "dirichlet": {str(int(i)): v.tolist() for i, v in zip(bc.dirichlet_idx, bc.dirichlet_values)},
        "neumann": {
            str(int(i)): {"normal": n.tolist(), "value": g.tolist(), "weight": float(w)}
            for i, n, g, w in zip(bc.neumann_idx, bc.neumann_normals, bc.neumann_values, bc.weights)
        },
    }


def bc_from_dict(d) -> BoundarySpec:
    neu = d.get("neumann", {})
    return BoundarySpec.from_maps(
        dirichlet={int(k): v for k, v in d.get("dirichlet", {}).items()},
        neumann={int(k): (v["normal"], v["value"]) for k, v in neu.items()},
        weights={int(k): v.get("weight", BoundarySpec.DEFAULT_WEIGHT) for k, v in neu.items()},
        rank=int(d.get("rank", 0)),
        channels=int(d.get("channels", 1)),
    )


# ------------------------------------------------------------------ fields

def _columns(name, field: TensorField):
    if "_" in name:
        raise ValueError(f"field name {name!r} must not contain '_'")
    cols = []
    for comp in _COMPONENTS[field.rank]:
        for c in range(field.channels):
            col = name + (f"_{comp}" if comp else "")
            cols.append(col + (f"_c{c}" if field.channels > 1 else ""))
    return cols


def write_fields_csv(path, mesh: Mesh, fields: dict):
    """One row per vertex: ``vertex_id,x,y,z,<quantity components>``."""
    header = ["vertex_id", "x", "y", "z"]
    blocks = []
    for name, f in fields.items():
        f.check_mesh(mesh)
        header += _columns(name, f)
        blocks.append(f.values.reshape(mesh.n_vertices, -1))
    data = np.concatenate([mesh.vertices] + blocks, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(data):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_fields_csv(path) -> tuple[np.ndarray, dict]:
    """Return ``(coordinates, {name: TensorField})`` from a field CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(rows[0]))
    if header[:4] != ["vertex_id", "x", "y", "z"]:
        raise ValueError(f"{path}: unexpected header {header[:4]}")
    order = np.argsort(body[:, 0], kind="stable")
    body = body[order]
    groups: dict = {}
    for k, col in enumerate(header[4:], start=4):
        m = _COLUMN.match(col)
        if not m:
            raise ValueError(f"{path}: cannot parse column {col!r}")
        name, comp, ch = m.group(1), m.group(2) or "", int(m.group(3) or 0)
        groups.setdefault(name, []).append((comp, ch, k))
    fields = {}
    for name, cols in groups.items():
        comps = sorted({c for c, _, _ in cols}, key=lambda c: (len(c), c))
        rank = {1: 0, 3: 1, 9: 2}[len(comps)]
        channels = max(ch for _, ch, _ in cols) + 1
        vals = np.zeros((len(body), 3**rank, channels))
        lookup = {comp: i for i, comp in enumerate(_COMPONENTS[rank])}
        for comp, ch, k in cols:
            vals[:, lookup[comp], ch] = body[:, k]
        fields[name] = TensorField(rank, vals)
    return body[:, 1:4], fields


def write_vtk(path, mesh: Mesh, fields: dict, title="penn fields"):
    """Legacy ASCII VTK unstructured grid with POINT_DATA arrays."""
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines += [" ".join(repr(float(v)) for v in x) for x in mesh.vertices]
    lines.append(f"CELLS {mesh.n_cells} {9 * mesh.n_cells}")
    lines += ["8 " + " ".join(str(int(v)) for v in c) for c in mesh.cells]
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines += ["12"] * mesh.n_cells
    lines.append(f"POINT_DATA {mesh.n_vertices}")
    for name, f in fields.items():
        f.check_mesh(mesh)
        for c in range(f.channels):
            label = name if f.channels == 1 else f"{name}_c{c}"
            vals = f.values[:, :, c]
            if f.rank == 0:
                lines += [f"SCALARS {label} double 1", "LOOKUP_TABLE default"]
                lines += [repr(float(v)) for v in vals[:, 0]]
            elif f.rank == 1:
                lines.append(f"VECTORS {label} double")
                lines += [" ".join(repr(float(v)) for v in row) for row in vals]
            else:
                lines.append(f"TENSORS {label} double")
                for row in vals:
                    t = row.reshape(3, 3)
                    lines += [" ".join(repr(float(v)) for v in r) for r in t]
    Path(path).write_text("\n".join(lines) + "\n")
