"""Legacy ASCII VTK export and raw state snapshots."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mesh import TetMesh

VTK_TETRA = 10


def write_vtk(path, mesh: TetMesh, cell_data: dict | None = None, point_data: dict | None = None,
              title: str = "ctmhd") -> Path:
    """Write an unstructured tetrahedral grid with optional cell/point fields.

    Fields are arrays of shape (N,) for scalars or (N, 3) for vectors.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    V, T = mesh.n_vertices, mesh.n_tets
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {V} double")
    lines.extend(" ".join(f"{c:.16g}" for c in p) for p in mesh.vertices)
    lines.append(f"CELLS {T} {5 * T}")
    lines.extend("4 " + " ".join(str(int(i)) for i in t) for t in mesh.tets)
    lines.append(f"CELL_TYPES {T}")
    lines.extend([str(VTK_TETRA)] * T)

    def emit(data, n):
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape[0] != n:
                raise ValueError(f"field {name!r} has {arr.shape[0]} entries, expected {n}")
            if arr.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(f"{v:.16g}" for v in arr)
            else:
                lines.append(f"VECTORS {name} double")
                lines.extend(" ".join(f"{c:.16g}" for c in v) for v in arr)

    if cell_data:
        lines.append(f"CELL_DATA {T}")
        emit(cell_data, T)
    if point_data:
        lines.append(f"POINT_DATA {V}")
        emit(point_data, V)
    path.write_text("\n".join(lines) + "\n")
    return path


def save_arrays(path, arrays: dict, header: dict) -> tuple[Path, Path]:
    """Coefficient arrays as ``.npz`` plus a small JSON header beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    npz = path.with_suffix(".npz")
    np.savez(npz, **{k: np.asarray(v) for k, v in arrays.items()})
    meta = path.with_suffix(".json")
    meta.write_text(json.dumps(header, indent=2, sort_keys=True, default=str) + "\n")
    return npz, meta


def load_arrays(path) -> tuple[dict, dict]:
    path = Path(path)
    with np.load(path.with_suffix(".npz")) as z:
        arrays = {k: z[k] for k in z.files}
    header = json.loads(path.with_suffix(".json").read_text())
    return arrays, header
