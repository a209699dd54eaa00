import numpy as np
import pytest

from penn import io
from penn.datagen import generate_heat_sample
from penn.mesh import BoundarySpec, TensorField, cuboid_mesh


def test_mesh_and_bc_round_trip(tmp_path):
    s = generate_heat_sample(0, 3, 3, refine=1)
    io.save_mesh(s.mesh, tmp_path / "m.json")
    m = io.load_mesh(tmp_path / "m.json")
    assert np.array_equal(m.vertices, s.mesh.vertices) and m.grid == s.mesh.grid
    bc = io.bc_from_dict(io.bc_to_dict(s.problem.bc))
    for a in ("dirichlet_idx", "dirichlet_values", "neumann_idx", "neumann_normals", "neumann_values", "weights"):
        assert np.array_equal(getattr(bc, a), getattr(s.problem.bc, a))


def test_fields_csv_round_trip(tmp_path, rng):
    mesh = cuboid_mesh((2, 1, 1))
    n = mesh.n_vertices
    fields = {
        "p": TensorField.scalar(rng.normal(size=n)),
        "u": TensorField(1, rng.normal(size=(n, 3, 2))),
        "T": TensorField(2, rng.normal(size=(n, 9, 1))),
    }
    io.write_fields_csv(tmp_path / "f.csv", mesh, fields)
    header = (tmp_path / "f.csv").read_text().splitlines()[0].split(",")
    assert header[:6] == ["vertex_id", "x", "y", "z", "p", "u_x_c0"]
    assert len((tmp_path / "f.csv").read_text().splitlines()) == n + 1
    coords, back = io.read_fields_csv(tmp_path / "f.csv")
    assert np.array_equal(coords, mesh.vertices)
    for k, f in fields.items():
        assert back[k].rank == f.rank and np.array_equal(back[k].values, f.values)


def test_csv_rejects_underscore_names(tmp_path):
    mesh = cuboid_mesh((1, 1, 1))
    with pytest.raises(ValueError):
        io.write_fields_csv(tmp_path / "f.csv", mesh, {"u_0": TensorField.scalar(np.zeros(8))})


def test_vtk_layout(tmp_path, rng):
    mesh = cuboid_mesh((2, 1, 1))
    n = mesh.n_vertices
    io.write_vtk(tmp_path / "f.vtk", mesh, {"p": TensorField.scalar(rng.normal(size=n)),
                                           "u": TensorField(1, rng.normal(size=(n, 3, 1)))})
    lines = (tmp_path / "f.vtk").read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0" and lines[2] == "ASCII"
    assert f"POINTS {n} double" in lines and f"POINT_DATA {n}" in lines
    assert lines.count("12") == mesh.n_cells
    assert "SCALARS p double 1" in lines and "VECTORS u double" in lines


def test_json_is_deterministic(tmp_path):
    io.write_json({"b": 1, "a": [1.5, 2]}, tmp_path / "x.json")
    io.write_json({"a": [1.5, 2], "b": 1}, tmp_path / "y.json")
    assert io.sha256_file(tmp_path / "x.json") == io.sha256_file(tmp_path / "y.json")
    assert io.read_json(tmp_path / "x.json") == {"a": [1.5, 2], "b": 1}


def test_bc_without_entries():
    bc = io.bc_from_dict(io.bc_to_dict(BoundarySpec(1, 2)))
    assert bc.rank == 1 and bc.channels == 2 and len(bc.dirichlet_idx) == 0
