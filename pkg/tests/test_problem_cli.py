import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from fehomog import cli, problem as pio
from fehomog.mandel import J2Plastic, LinearElastic
from fehomog.solvers import IndefiniteOperatorError
from fehomog.templates import balanced_moduli, build_template, coated_sphere, hashin_bulk


def _write(tmp_path, doc, name="p.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return p


def _explicit_doc(tmp_path, phases=None):
    phases = np.array([[0, 1, 0], [1, 1, 0], [0, 0, 1]]) if phases is None else phases
    pio.write_phase_map(tmp_path / "phases.raw", phases)
    return {"cell": {"dims": list(phases.shape), "lengths": [1.0, 1.0]},
            "stencil": "TwoTriangles", "physics": "elasticity",
            "phase_map": "phases.raw",
            "materials": {0: {"model": "linear_elastic", "K": 1.0, "G": 0.5},
                          1: {"model": "linear_elastic", "K": 10.0, "G": 5.0}},
            "loads": [[0.01, 0.0, 0.0]]}


def test_parse_explicit_problem(tmp_path):
    doc = _explicit_doc(tmp_path)
    doc["solver"] = {"eta_cg": 1e-7, "max_cg": 50}
    doc["reference"] = {"identity": 2.0}
    p = pio.load_problem(_write(tmp_path, doc))
    assert p.cell.dims == (3, 3) and p.physics == "elasticity"
    assert p.config.eta_cg == 1e-7 and p.config.max_cg == 50
    assert p.config.reference == "identity" and p.config.reference_scale == 2.0
    assert isinstance(p.catalog[1], LinearElastic)
    assert np.array_equal(p.phases, np.array([[0, 1, 0], [1, 1, 0], [0, 0, 1]]))


@pytest.mark.parametrize("edit, message", [
    (lambda d: d["materials"][0].update(K=-1.0), "materials.0.K: must be positive"),
    (lambda d: d["materials"][1].update(G=float("nan")), "materials.1.G: must be finite"),
    (lambda d: d.update(stencil="Hexagons"), "stencil"),
    (lambda d: d.update(stencil="TrilinearHex"), "stencil: TrilinearHex is 3D"),
    (lambda d: d.update(physics="acoustics"), "physics: unknown value"),
    (lambda d: d.update(loads=[[0.01, 0.0]]), "loads[0]: expected 3 components"),
    (lambda d: d.update(loads=[]), "loads"),
    (lambda d: d["materials"].pop(1), "materials: no entry for phase id(s) [1]"),
    (lambda d: d["materials"][0].update(model="hyperelastic"), "materials.0.model: unknown model"),
    (lambda d: d["materials"][0].update(nu=0.3), "materials.0: unknown key(s)"),
    (lambda d: d.update(reference="median"), "reference: unknown policy"),
    (lambda d: d.update(reference=[[1, 0], [0, 1]]), "reference: explicit matrix must be 3x3"),
    (lambda d: d.update(solver={"eta_cg": 0.0}), "solver"),
    (lambda d: d.update(solver={"tolerance": 1e-3}), "solver: unknown key(s)"),
    (lambda d: d.update(extra=1), "unknown top-level key(s)"),
    (lambda d: d["cell"].update(dims=[4, 4]), "phase_map: 9 bytes"),
    (lambda d: d.update(phase_map="missing.raw"), "phase_map: file"),
    (lambda d: d.update(physics="thermal", loads=[[1.0, 0.0]]), "materials.0"),
])
def test_validation_diagnostics(tmp_path, edit, message):
    doc = _explicit_doc(tmp_path)
    edit(doc)
    with pytest.raises(pio.ProblemError) as info:
        pio.load_problem(_write(tmp_path, doc))
    assert message in str(info.value)


def test_invalid_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("cell: [1, 2\n")
    with pytest.raises(pio.ProblemError, match="not valid YAML"):
        pio.load_problem(p)
    with pytest.raises(pio.ProblemError, match="not found"):
        pio.load_problem(tmp_path / "nope.yaml")


def test_template_override(tmp_path):
    doc = {"template": {"name": "random-two-phase", "n": 6},
           "materials": {0: {"model": "j2", "K": 2.0, "G": 1.0, "tau_y0": 0.01},
                         1: {"model": "linear_elastic", "K": 6.0, "G": 3.0}},
           "loads": [[0.01, 0, 0], [0.02, 0, 0]]}
    p = pio.load_problem(_write(tmp_path, doc), seed=3)
    assert p.cell.dims == (6, 6) and isinstance(p.catalog[0], J2Plastic)
    assert len(p.loads) == 2
    q = pio.load_problem(_write(tmp_path, doc), seed=3)
    r = pio.load_problem(_write(tmp_path, doc), seed=4)
    assert np.array_equal(p.phases, q.phases) and not np.array_equal(p.phases, r.phases)
    with pytest.raises(pio.ProblemError, match="template"):
        pio.parse_problem({"template": {"name": "honeycomb"}})


def test_phase_map_round_trip(tmp_path, rng):
    ph = rng.integers(0, 256, (5, 4, 3)).astype(np.uint8)
    pio.write_phase_map(tmp_path / "m.raw", ph)
    assert (tmp_path / "m.raw").stat().st_size == ph.size
    assert np.array_equal(pio.read_phase_map(tmp_path / "m.raw", (5, 4, 3)), ph)
    with pytest.raises(ValueError):
        pio.write_phase_map(tmp_path / "x.raw", np.array([[300]]))


def test_field_and_csv_round_trip(tmp_path, rng):
    a = rng.standard_normal((3, 2, 4, 5))
    pio.write_field(tmp_path / "f", a, "(m, q, x, y)", ["11", "22", "12"], note="x")
    b, side = pio.read_field(tmp_path / "f")
    assert np.array_equal(a, b) and side["components"] == ["11", "22", "12"]
    assert side["note"] == "x" and side["dtype"] == "<f8"
    rows = [{"a": float(v), "k": i} for i, v in enumerate(rng.standard_normal(10) / 3)]
    pio.write_csv(tmp_path / "r.csv", rows)
    back = pio.read_csv(tmp_path / "r.csv")
    assert [float(r["a"]) for r in back] == [r["a"] for r in rows]


def test_bundle_reaverage_bitwise(tmp_path):
    doc = {"template": {"name": "random-two-phase", "n": 8},
           "loads": [[0.01, 0, 0.002], [0.02, 0, 0.004]]}
    path = _write(tmp_path, doc)
    assert cli.main(["solve", "--problem", str(path), "--out", str(tmp_path / "o")]) == 0
    prob = pio.load_problem(path)
    rows = pio.read_csv(tmp_path / "o" / "averages.csv")
    again = pio.reaverage(tmp_path / "o", prob)
    assert len(again) == len(rows) == 2
    for r, a in zip(rows, again):
        for k, v in a.items():
            if k != "load_step":
                assert float(r[k]) == v
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["cause"] == "converged" and summary["newton_counts"] == [1, 1]
    u, side = pio.read_field(tmp_path / "o" / "step000_u")
    assert u.shape == (2, 1, 8, 8) and side["field"] == "fluctuation"
    assert len(pio.read_csv(tmp_path / "o" / "report.csv")) == 2


def test_thermal_bundle_names(tmp_path):
    path = _write(tmp_path, {"template": {"name": "square-inclusion", "n": 16}})
    assert cli.main(["solve", "--problem", str(path), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "step000_flux.bin").exists()
    row = pio.read_csv(tmp_path / "o" / "averages.csv")[0]
    assert set(row) >= {"gradient_1", "gradient_2", "flux_1", "flux_2"}
    assert abs(float(row["gradient_1"]) - 0.01) < 1e-12


def test_determinism(tmp_path):
    path = _write(tmp_path, {"template": {"name": "random-two-phase", "n": 8, "contrast": 50.0}})
    for out in ("a", "b"):
        assert cli.main(["solve", "--problem", str(path), "--out", str(tmp_path / out),
                         "--seed", "11"]) == 0
    for name in ("step000_u.bin", "step000_stress.bin", "averages.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_exit_codes(tmp_path, monkeypatch, capsys):
    bad = _explicit_doc(tmp_path)
    bad["materials"][0]["K"] = -2.0
    out = tmp_path / "bad_out"
    assert cli.main(["solve", "--problem", str(_write(tmp_path, bad, "bad.yaml")),
                     "--out", str(out)]) == 2
    assert not out.exists()
    assert "materials.0.K" in capsys.readouterr().err

    assert cli.main(["solve"]) == 2
    assert cli.main(["solve", "--problem", "x.yaml", "--threads", "0"]) == 2
    assert cli.main(["frobnicate"]) == 2

    plastic = {"template": {"name": "random-two-phase", "n": 8},
               "materials": {0: {"model": "j2", "K": 2.0, "G": 1.0, "tau_y0": 0.001},
                             1: {"model": "linear_elastic", "K": 6.0, "G": 3.0}},
               "loads": [[0.02, -0.02, 0.01]], "solver": {"max_newton": 1}}
    p = _write(tmp_path, plastic, "plastic.yaml")
    assert cli.main(["solve", "--problem", str(p), "--out", str(tmp_path / "nc")]) == 3
    assert "newton-cap" in capsys.readouterr().err

    def boom(*a, **k):
        raise IndefiniteOperatorError("non-positive curvature")
    monkeypatch.setattr(cli, "solve_load_program", boom)
    good = _write(tmp_path, _explicit_doc(tmp_path), "good.yaml")
    assert cli.main(["solve", "--problem", str(good), "--out", str(tmp_path / "x")]) == 4
    assert "numerical abort" in capsys.readouterr().err


def test_environment_defaults(tmp_path, monkeypatch):
    good = _write(tmp_path, _explicit_doc(tmp_path), "good.yaml")
    monkeypatch.setenv("HOMOG_PROBLEM", str(good))
    monkeypatch.setenv("HOMOG_OUT", str(tmp_path / "env"))
    monkeypatch.setenv("HOMOG_THREADS", "2")
    assert cli.main(["solve"]) == 0
    assert (tmp_path / "env" / "averages.csv").exists()
    # explicit flag wins
    assert cli.main(["solve", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "averages.csv").exists()
    monkeypatch.setenv("HOMOG_THREADS", "many")
    assert cli.main(["solve"]) == 2


def test_bounds_compare_probe(tmp_path, capsys):
    uni = _explicit_doc(tmp_path, np.zeros((3, 3), dtype=int))
    p = _write(tmp_path, uni, "uni.yaml")
    assert cli.main(["bounds", "--problem", str(p), "--out", str(tmp_path / "b")]) == 0
    cond = pio.read_csv(tmp_path / "b" / "condition.csv")[0]
    assert abs(float(cond["condition_estimate"]) - 1.0) < 1e-12
    two = _write(tmp_path, _explicit_doc(tmp_path), "two.yaml")
    assert cli.main(["compare", "--problem", str(two), "--out", str(tmp_path / "c")]) == 0
    summary = json.loads((tmp_path / "c" / "compare.json").read_text())
    assert summary["newton_equal"] and summary["max_cg_difference"] == 0
    assert cli.main(["probe-precond", "--problem", str(two), "--out", str(tmp_path / "p")]) == 0
    rows = pio.read_csv(tmp_path / "p" / "blocks.csv")
    assert len(rows) == 3 * 2
    assert sum(int(r["pseudo_inverse"]) for r in rows) == 1
    blocks, _ = pio.read_field(tmp_path / "p" / "reference_blocks_real")
    assert blocks.shape == (3, 2, 2, 2)


def test_compare_rejects_unequal_weights_cleanly(tmp_path):
    doc = _explicit_doc(tmp_path)
    doc["stencil"] = "BilinearQuad"
    p = _write(tmp_path, doc)
    # Gauss weights are equal, so this is accepted
    assert cli.main(["compare", "--problem", str(p), "--out", str(tmp_path / "c")]) == 0


def test_console_script(tmp_path):
    p = _write(tmp_path, _explicit_doc(tmp_path))
    r = subprocess.run([sys.executable, "-m", "fehomog.cli", "solve", "--problem", str(p),
                        "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr


def test_templates():
    K1, G1, K2, G2 = balanced_moduli(1e3)
    assert abs(K1 - 0.0013206033) < 1e-10 and abs(K2 - 1.3206033) < 1e-7
    assert abs(G2 - 0.7923620) < 1e-7
    assert abs(hashin_bulk(K1, K2, G2, 0.125) - 1.0) < 1e-13
    # a homogeneous coated sphere is trivially neutral
    assert abs(hashin_bulk(1.0, 1.0, 0.6, 0.3) - 1.0) < 1e-15
    p = coated_sphere(n=8)
    assert set(np.unique(p.phases)) == {0, 1, 2} and p.cell.dims == (8, 8, 8)
    sq = build_template("square-inclusion", n=16)
    assert sq.phases.sum() == 64
    rot = build_template("square-inclusion", n=16, rotated=True)
    assert 0 < rot.phases.sum() < 16 * 16
    with pytest.raises(ValueError, match="unknown template"):
        build_template("honeycomb")
