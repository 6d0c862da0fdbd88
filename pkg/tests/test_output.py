import json

import numpy as np

from micromorph import output
from micromorph.fespace import FieldU, H1VectorSpace, HCurlTensorSpace
from micromorph.geometry import DomainSpec, build_mesh
from micromorph.transform import random_field_P


def test_json_handles_numpy_and_nonfinite(tmp_path):
    data = {"b": np.float64(np.inf), "a": np.arange(3), "c": np.bool_(True), "d": (np.int64(2), None)}
    output.write_json(tmp_path / "x.json", data)
    text = (tmp_path / "x.json").read_text()
    assert json.loads(text) == {"a": [0, 1, 2], "b": "inf", "c": True, "d": [2, None]}
    assert text.index('"a"') < text.index('"b"')


def test_csv_formats_floats(tmp_path):
    output.write_csv(tmp_path / "t.csv", [{"k": 2, "x": 0.1, "s": None}, {"k": 3, "x": 1e-20, "s": "ok"}])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["k,x,s", "2,1.000000000000e-01,", "3,1.000000000000e-20,ok"]


def test_vtk_layout(tmp_path, rng):
    mesh = build_mesh(DomainSpec.unit_cube(), 1)
    U = H1VectorSpace(mesh)
    u = FieldU(U, rng.standard_normal(U.ndof))
    P = random_field_P(HCurlTensorSpace(mesh), rng)
    output.write_vtk(tmp_path / "f.vtk", mesh, u, P)
    lines = (tmp_path / "f.vtk").read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert f"POINTS {mesh.n_vertices} double" in lines
    assert f"CELLS {mesh.n_cells} {5 * mesh.n_cells}" in lines
    i = lines.index("VECTORS u double")
    np.testing.assert_allclose([float(t) for t in lines[i + 1].split()], u.coeffs.reshape(3, -1)[:, 0], rtol=1e-9)
    assert "TENSORS P double" in lines and "TENSORS CurlP double" in lines
