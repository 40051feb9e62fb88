import csv
import subprocess
import sys

import numpy as np
import pytest

from chemorepulsion.cli import (ConfigError, check_stability, main, parse_config, read_vtk,
                                write_vtk)
from chemorepulsion.fem import make_spaces
from chemorepulsion.mesh import unit_square_mesh
from chemorepulsion.mms import TrigSolution
from chemorepulsion.projections import initialize_state
from chemorepulsion.scheme import State


def write(tmp_path, text, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_empty_file_gives_defaults(tmp_path):
    cfg = parse_config("run", write(tmp_path, ""))
    assert (cfg.method, cfg.tol, cfg.k, cfg.T, cfg.m) == ("newton", 1e-6, 1e-5, 1e-3, [40])
    assert cfg == parse_config("run")


def test_file_then_flags(tmp_path):
    path = write(tmp_path, "k = 1e-4\n[solver]\nmethod = picard\ntol = 1e-8\n[output]\nsnapshots = 5\n")
    cfg = parse_config("run", path, {"tol": 1e-7, "m": "12", "k": None})
    assert cfg.k == 1e-4 and cfg.method == "picard" and cfg.tol == 1e-7 and cfg.m == [12]
    assert cfg.snapshots == 5


def test_inline_comments(tmp_path):
    cfg = parse_config("converge", write(tmp_path, "[problem]\nm = 8, 16  # list\nk = 1e-3 ; step\n"))
    assert cfg.m == [8, 16] and cfg.k == 1e-3


def test_rejections_name_the_key(tmp_path):
    with pytest.raises(ConfigError, match="T/k"):
        parse_config("run", overrides={"T": 1e-3, "k": 3e-4})
    with pytest.raises(ConfigError, match="^colour: unknown key"):
        parse_config("run", write(tmp_path, "colour = red\n"))
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("run", write(tmp_path, "[plot]\nm = 3\n"))
    with pytest.raises(ConfigError, match="method"):
        parse_config("run", write(tmp_path, "[problem]\nmethod = newton\n"))
    with pytest.raises(ConfigError, match="^tol"):
        parse_config("run", overrides={"tol": -1.0})
    with pytest.raises(ConfigError, match="^m:"):
        parse_config("converge", overrides={"m": "40,40"})
    with pytest.raises(ConfigError, match="^m:"):
        parse_config("converge", overrides={"m": "50,40"})
    with pytest.raises(ConfigError, match="^m:"):
        parse_config("stability", overrides={"m": "20,40"})
    with pytest.raises(ConfigError, match="^k:"):
        parse_config("run", write(tmp_path, "k = fast\n"))
    with pytest.raises(ConfigError, match="more than once"):
        parse_config("run", write(tmp_path, "k = 1e-4\n[problem]\nk = 1e-4\n"))


def test_table_mesh_list_accepted():
    cfg = parse_config("converge", overrides={"m": "40,50,60,70,80"})
    assert cfg.m == [40, 50, 60, 70, 80]


def test_vtk_m1_and_roundtrip(tmp_path):
    spaces = make_spaces(unit_square_mesh(1))
    U, S, V = spaces.u, spaces.sigma, spaces.v
    st = State(0, 0.0, U.interpolate(lambda x, y, t: 3 + 0 * x), S.zero(), V.interpolate(lambda x, y, t: 1 + 0 * x))
    path = tmp_path / "c.vtk"
    write_vtk(st, path)
    text = path.read_text()
    assert "POINTS 4 double" in text and "CELLS 2 8" in text and "CELL_TYPES 2" in text
    mesh, data = read_vtk(path)
    assert mesh.n_vertices == 4 and mesh.n_triangles == 2
    np.testing.assert_array_equal(data["u"], 3.0)
    np.testing.assert_array_equal(data["v"], 1.0)
    np.testing.assert_array_equal(data["sigma"], 0.0)

    spaces = make_spaces(unit_square_mesh(5))
    ex = TrigSolution()
    st = initialize_state(spaces, ex.u_field, ex.sigma_field, ex.v_field)
    write_vtk(st, path)
    mesh, data = read_vtk(path)
    nv = spaces.mesh.n_vertices
    np.testing.assert_allclose(mesh.vertices, spaces.mesh.vertices, atol=1e-12)
    np.testing.assert_allclose(data["u"], st.u.coefficients, atol=1e-12)
    np.testing.assert_allclose(data["v"], st.v.coefficients[:nv], atol=1e-12)
    np.testing.assert_allclose(data["sigma"][:, 1], st.sigma.coefficients[spaces.sigma.n_scalar:][:nv], atol=1e-12)


def test_vtk_unwritable_path(tmp_path):
    spaces = make_spaces(unit_square_mesh(1))
    st = State(0, 0.0, spaces.u.zero(), spaces.sigma.zero(), spaces.v.zero())
    with pytest.raises(OSError, match="missing"):
        write_vtk(st, tmp_path / "missing" / "x.vtk")


def test_check_stability_names_first_bad_step():
    assert check_stability([3.0, 2.0, 2.0], [2.0, 2.0, 2.0], 1e-13, 1e-10) is None
    step, why = check_stability([3.0, 2.0, 2.5, 4.0], [2.0] * 4, 1e-13, 1e-10)
    assert step == 2 and "energy" in why
    step, why = check_stability([3.0, 2.0, 1.0], [2.0, 2.0, 2.0 + 1e-9], 1e-13, 1e-10)
    assert step == 2 and "mass" in why


def test_stability_command(tmp_path, capsys):
    out = tmp_path / "stab"
    status = main(["stability", "--m", "8", "--k", "1e-3", "--T", "1e-2", "--out", str(out), "--snapshots", "5"])
    assert status == 0
    rows = read_csv(out / "stability.csv")
    assert rows[0] == ["n", "t", "energy", "energy_law_residual", "mass", "picard_or_newton_iters"]
    assert len(rows) == 12
    energies = [float(r[2]) for r in rows[1:]]
    assert all(b <= a for a, b in zip(energies, energies[1:]))
    assert all(abs(float(r[4]) - 2.0) <= 1e-10 for r in rows[1:])
    assert (out / "state_000005.vtk").exists() and (out / "state_000010.vtk").exists()


def test_stability_detects_nonconvergence(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[solver]\nmax_nl_iter = 1\nmethod = picard\n")
    status = main(["stability", "--config", str(cfg), "--m", "6", "--k", "1e-3", "--T", "2e-3",
                   "--out", str(tmp_path / "s")])
    assert status == 1


def test_run_command_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--m", "6", "--k", "1e-4", "--T", "3e-4", "--out", str(out)]) == 0
    steps = read_csv(out / "steps.csv")
    assert len(steps) == 4 and steps[0][:3] == ["n", "t", "iterations"]
    summary = dict(read_csv(out / "error_summary.csv")[1:])
    assert set(summary) >= {"u_linf_l2", "v_linf_h1"}
    assert (out / "final.vtk").exists()
    assert len(read_csv(out / "errors.csv")) == 5  # n = 0..3


def test_converge_command_and_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["converge", "--m", "6,8", "--k", "1e-5", "--T", "2e-5", "--out", str(out)]) == 0
        outs.append(out)
    rows = read_csv(outs[0] / "u_linf_l2.csv")
    assert rows[0] == ["m", "u_linf_l2", "order"] and len(rows) == 3
    assert rows[1][2] == "" and float(rows[2][2]) > 1.0
    for name in ("u_linf_l2", "v_disc_linf_h1", "summary"):
        assert (outs[0] / f"{name}.csv").read_bytes() == (outs[1] / f"{name}.csv").read_bytes()


def test_converge_failure_flushes_partial_tables(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("max_nl_iter = 1\n")
    status = main(["converge", "--config", str(cfg), "--m", "4,6", "--k", "1e-3", "--T", "2e-3",
                   "--out", str(tmp_path / "o")])
    assert status == 1
    assert read_csv(tmp_path / "o" / "u_linf_l2.csv")[0] == ["m", "u_linf_l2", "order"]


def test_usage_errors_exit_nonzero(tmp_path):
    for argv in (["explode"], ["run", "--T", "1e-3", "--k", "3e-4"], ["converge", "--m", "40"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "chemorepulsion", "stability", "--m", "4", "--k", "0.1",
                           "--T", "0.5", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("OK")
