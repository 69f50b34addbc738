"""Problem files, validation and result bundles.

A problem file is a YAML mapping::

    cell: {dims: [64, 64], lengths: [1.0, 1.0]}
    stencil: TwoTriangles            # BilinearQuad | TwoTriangles |
                                     # FourTrianglesTwoNode | TrilinearHex
    physics: thermal                 # elasticity | thermal
    phase_map: phases.raw            # raw uint8, path relative to the file
    materials:
      0: {model: conductivity, kappa: 100.0}
      1: {model: conductivity, A: [[1.0e4, 0.0], [0.0, 1.0e4]]}
    reference: mean                  # mean | identity | {identity: 2.0} | matrix
    loads:
      - [0.01, 0.0]
    solver: {eta_newton: 1.0e-5, eta_cg: 1.0e-5, max_newton: 50, max_cg: 1000,
             reassembly_threshold: 0.1, newton_norm: strain}

Material models: ``linear_elastic`` (``K``, ``G`` or a Mandel matrix
``C``), ``conductivity`` (``kappa`` or matrix ``A``) and ``j2`` (``K``,
``G``, ``tau_y0``, optional ``H``).  Instead of ``phase_map`` (and
optionally ``cell``/``materials``) a built-in generator may be named::

    template: {name: coated-sphere, n: 32, contrast: 1000.0}

Explicit keys next to ``template`` override what it generates.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import operators
from .grid import CellSpec, GridLayout, StencilKind, build_grid, mandel_size
from .mandel import Conductivity, J2Plastic, LinearElastic, MaterialModel
from .solvers import MaterialMap, SolveConfig, SolveReport

__all__ = [
    "ProblemError",
    "Problem",
    "parse_problem",
    "load_problem",
    "read_phase_map",
    "write_phase_map",
    "write_field",
    "read_field",
    "write_csv",
    "read_csv",
    "write_bundle",
    "reaverage",
]


class ProblemError(ValueError):
    """Invalid problem description; the message names the offending field."""


@dataclass
class Problem:
    cell: CellSpec
    stencil: StencilKind
    physics: str
    phases: np.ndarray
    catalog: dict[int, MaterialModel]
    config: SolveConfig = field(default_factory=SolveConfig)
    name: str = "problem"

    def layout(self) -> GridLayout:
        return build_grid(self.cell, self.stencil, self.physics)

    def materials(self) -> MaterialMap:
        return MaterialMap(self.phases, self.catalog)

    @property
    def loads(self) -> list[np.ndarray]:
        return self.config.load_steps

    def with_loads(self, loads) -> "Problem":
        cfg = replace(self.config, load_steps=[np.asarray(e, dtype=float) for e in loads])
        return replace(self, config=cfg)

    def validate(self) -> "Problem":
        d = self.cell.dim
        if self.stencil.dim != d:
            raise ProblemError(f"stencil: {self.stencil.value} is {self.stencil.dim}D "
                               f"but the cell is {d}D")
        if self.physics not in ("elasticity", "thermal"):
            raise ProblemError(f"physics: unknown value {self.physics!r}")
        if self.phases.shape != self.cell.dims:
            raise ProblemError(f"phase_map: shape {self.phases.shape} does not match "
                               f"cell dims {self.cell.dims}")
        missing = sorted(set(np.unique(self.phases).tolist()) - set(self.catalog))
        if missing:
            raise ProblemError(f"materials: no entry for phase id(s) {missing}")
        m = mandel_size(d) if self.physics == "elasticity" else d
        for pid, model in self.catalog.items():
            size = _model_size(model)
            if size != m:
                raise ProblemError(f"materials.{pid}: model has {size} components, "
                                   f"{self.physics} in {d}D needs {m}")
            if self.physics == "thermal" and not isinstance(model, Conductivity):
                raise ProblemError(f"materials.{pid}: thermal problems need conductivity models")
        if not self.loads:
            raise ProblemError("loads: load program is empty")
        for k, e in enumerate(self.loads):
            if e.shape != (m,):
                raise ProblemError(f"loads[{k}]: expected {m} components, got {e.size}")
            if not np.all(np.isfinite(e)):
                raise ProblemError(f"loads[{k}]: non-finite entries")
        ref = self.config.reference
        if not isinstance(ref, str) and np.shape(ref) != (m, m):
            raise ProblemError(f"reference: explicit matrix must be {m}x{m}")
        return self


def _model_size(model) -> int:
    if isinstance(model, J2Plastic):
        return 3 if model.d == 2 else 6
    return model.C.shape[0]


def _number(value, path, positive=False, nonneg=False) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ProblemError(f"{path}: expected a number, got {value!r}") from None
    if not np.isfinite(x):
        raise ProblemError(f"{path}: must be finite")
    if positive and x <= 0:
        raise ProblemError(f"{path}: must be positive, got {x}")
    if nonneg and x < 0:
        raise ProblemError(f"{path}: must be non-negative, got {x}")
    return x


def _matrix(value, path) -> np.ndarray:
    try:
        M = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ProblemError(f"{path}: expected a numeric matrix") from None
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ProblemError(f"{path}: expected a square matrix, got shape {M.shape}")
    return M


def _model(spec, path, d) -> MaterialModel:
    if not isinstance(spec, dict) or "model" not in spec:
        raise ProblemError(f"{path}: expected a mapping with a 'model' key")
    kind = str(spec["model"]).lower()
    known = {"linear_elastic": {"model", "K", "G", "C"},
             "conductivity": {"model", "kappa", "A"},
             "j2": {"model", "K", "G", "tau_y0", "H"}}
    if kind not in known:
        raise ProblemError(f"{path}.model: unknown model {kind!r}; "
                           f"expected one of {sorted(known)}")
    extra = set(spec) - known[kind]
    if extra:
        raise ProblemError(f"{path}: unknown key(s) {sorted(extra)} for model {kind}")
    try:
        if kind == "linear_elastic":
            if "C" in spec:
                return LinearElastic(_matrix(spec["C"], f"{path}.C"))
            return LinearElastic.isotropic(_number(spec.get("K"), f"{path}.K", positive=True),
                                           _number(spec.get("G"), f"{path}.G", positive=True), d)
        if kind == "conductivity":
            if "A" in spec:
                return Conductivity(_matrix(spec["A"], f"{path}.A"))
            return Conductivity.isotropic(
                _number(spec.get("kappa"), f"{path}.kappa", positive=True), d)
        return J2Plastic(_number(spec.get("K"), f"{path}.K", positive=True),
                         _number(spec.get("G"), f"{path}.G", positive=True),
                         _number(spec.get("tau_y0"), f"{path}.tau_y0", positive=True),
                         _number(spec.get("H", 0.0), f"{path}.H", nonneg=True), d)
    except ProblemError:
        raise
    except ValueError as exc:
        raise ProblemError(f"{path}: {exc}") from None


def read_phase_map(path, dims) -> np.ndarray:
    """Headerless little-endian uint8 grid in C order."""
    path = Path(path)
    if not path.is_file():
        raise ProblemError(f"phase_map: file {str(path)!r} not found")
    raw = np.fromfile(path, dtype="<u1")
    n = int(np.prod(dims))
    if raw.size != n:
        raise ProblemError(f"phase_map: {raw.size} bytes, cell dims {tuple(dims)} need {n}")
    return raw.reshape(dims).astype(int)


def write_phase_map(path, phases) -> None:
    phases = np.asarray(phases)
    if phases.min() < 0 or phases.max() > 255:
        raise ValueError("phase ids must fit in an unsigned byte")
    phases.astype("<u1").tofile(path)


def _reference(value, m):
    if value is None or value == "mean":
        return "mean", 1.0
    if value == "identity":
        return "identity", 1.0
    if isinstance(value, dict) and set(value) == {"identity"}:
        return "identity", _number(value["identity"], "reference.identity", positive=True)
    if isinstance(value, str):
        raise ProblemError(f"reference: unknown policy {value!r}")
    M = _matrix(value, "reference")
    if M.shape != (m, m):
        raise ProblemError(f"reference: explicit matrix must be {m}x{m}, got {M.shape}")
    if not np.allclose(M, M.T) or np.linalg.eigvalsh(0.5 * (M + M.T)).min() <= 0:
        raise ProblemError("reference: explicit matrix must be symmetric positive definite")
    return M, 1.0


_SOLVER_KEYS = {"eta_newton": float, "eta_cg": float, "max_newton": int, "max_cg": int,
                "reassembly_threshold": float, "newton_norm": str}
_TOP_KEYS = {"cell", "stencil", "physics", "phase_map", "materials", "reference", "loads",
             "solver", "template", "name"}


def parse_problem(doc: dict, base_dir=".", seed: int | None = None) -> Problem:
    """Build and validate a :class:`Problem` from a parsed YAML mapping."""
    if not isinstance(doc, dict):
        raise ProblemError("problem file must contain a mapping at top level")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ProblemError(f"unknown top-level key(s) {sorted(unknown)}")
    base_dir = Path(base_dir)

    tpl = None
    if "template" in doc:
        from . import templates
        spec = doc["template"]
        spec = {"name": spec} if isinstance(spec, str) else dict(spec or {})
        name = spec.pop("name", None)
        if seed is not None and "seed" not in spec:
            spec["seed"] = seed
        try:
            tpl = templates.build_template(name, **spec)
        except (TypeError, ValueError) as exc:
            raise ProblemError(f"template: {exc}") from None

    if "cell" in doc:
        cell_spec = doc["cell"]
        if not isinstance(cell_spec, dict) or "dims" not in cell_spec:
            raise ProblemError("cell: expected a mapping with 'dims'")
        dims = cell_spec["dims"]
        lengths = cell_spec.get("lengths", [1.0] * len(dims))
        try:
            cell = CellSpec(tuple(int(n) for n in dims), tuple(float(x) for x in lengths))
        except (TypeError, ValueError) as exc:
            raise ProblemError(f"cell: {exc}") from None
    elif tpl is not None:
        cell = tpl.cell
    else:
        raise ProblemError("cell: missing")
    d = cell.dim

    if "stencil" in doc:
        try:
            stencil = StencilKind.parse(doc["stencil"])
        except ValueError as exc:
            raise ProblemError(f"stencil: {exc}") from None
    elif tpl is not None:
        stencil = tpl.stencil
    else:
        raise ProblemError("stencil: missing")

    physics = doc.get("physics", tpl.physics if tpl else "elasticity")
    if physics not in ("elasticity", "thermal"):
        raise ProblemError(f"physics: unknown value {physics!r}; expected elasticity or thermal")

    if "phase_map" in doc:
        phases = read_phase_map(base_dir / str(doc["phase_map"]), cell.dims)
    elif tpl is not None:
        phases = tpl.phases
    else:
        raise ProblemError("phase_map: missing")

    if "materials" in doc:
        mats = doc["materials"]
        if not isinstance(mats, dict) or not mats:
            raise ProblemError("materials: expected a non-empty mapping phase id -> model")
        catalog = {}
        for key, spec in mats.items():
            try:
                pid = int(key)
            except (TypeError, ValueError):
                raise ProblemError(f"materials: phase id {key!r} is not an integer") from None
            catalog[pid] = _model(spec, f"materials.{pid}", d)
    elif tpl is not None:
        catalog = tpl.catalog
    else:
        raise ProblemError("materials: missing")

    m = mandel_size(d) if physics == "elasticity" else d
    base_cfg = tpl.config if tpl is not None else SolveConfig()
    if "reference" in doc:
        ref, scale = _reference(doc["reference"], m)
    else:
        ref, scale = base_cfg.reference, base_cfg.reference_scale

    if "loads" in doc:
        loads_raw = doc["loads"]
        if not isinstance(loads_raw, list) or not loads_raw:
            raise ProblemError("loads: expected a non-empty list of load vectors")
        loads = []
        for k, e in enumerate(loads_raw):
            try:
                v = np.asarray(e, dtype=float).reshape(-1)
            except (TypeError, ValueError):
                raise ProblemError(f"loads[{k}]: not a numeric vector") from None
            if v.shape != (m,):
                raise ProblemError(f"loads[{k}]: expected {m} components for {physics} "
                                   f"in {d}D, got {v.size}")
            loads.append(v)
    else:
        loads = list(base_cfg.load_steps)

    solver = dict(doc.get("solver") or {})
    bad = set(solver) - set(_SOLVER_KEYS)
    if bad:
        raise ProblemError(f"solver: unknown key(s) {sorted(bad)}")
    kwargs = {k: getattr(base_cfg, k) for k in _SOLVER_KEYS}
    for k, v in solver.items():
        try:
            kwargs[k] = _SOLVER_KEYS[k](v)
        except (TypeError, ValueError):
            raise ProblemError(f"solver.{k}: invalid value {v!r}") from None
    try:
        cfg = SolveConfig(load_steps=loads, reference=ref, reference_scale=scale, **kwargs)
    except ValueError as exc:
        raise ProblemError(f"solver: {exc}") from None

    name = str(doc.get("name", tpl.name if tpl else "problem"))
    return Problem(cell, stencil, physics, phases, catalog, cfg, name).validate()


def load_problem(path, seed: int | None = None) -> Problem:
    path = Path(path)
    if not path.is_file():
        raise ProblemError(f"problem file {str(path)!r} not found")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ProblemError(f"problem file is not valid YAML: {exc}") from None
    return parse_problem(doc, base_dir=path.parent, seed=seed)


# --------------------------------------------------------------------------
# result bundles
# --------------------------------------------------------------------------

def write_field(path, arr, layout: str, components=None, **meta) -> None:
    """``<path>.bin`` (float64, little endian, C order) plus ``<path>.json``."""
    path = Path(path)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    arr.tofile(path.with_suffix(".bin"))
    side = {"dtype": "<f8", "order": "C", "shape": list(arr.shape), "layout": layout}
    if components is not None:
        side["components"] = list(components)
    side.update(meta)
    path.with_suffix(".json").write_text(json.dumps(side, indent=2) + "\n")


def read_field(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    arr = np.fromfile(path.with_suffix(".bin"), dtype=side["dtype"])
    return arr.reshape(side["shape"]), side


def write_csv(path, rows: list[dict]) -> None:
    """CSV with ``repr`` floats so that values reload exactly."""
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for k, v in row.items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def component_names(d: int, physics: str) -> list[str]:
    if physics == "thermal":
        return [str(i + 1) for i in range(d)]
    return {2: ["11", "22", "12"], 3: ["11", "22", "33", "23", "13", "12"]}[d]


def report_rows(report: SolveReport) -> list[dict]:
    return [{"load_step": s.load_step, "newton_iter": s.newton_iter,
             "cg_iterations": s.cg_iterations, "residual_initial": s.residual_initial,
             "residual_final": s.residual_final, "increment_ratio": s.increment_ratio,
             "reassembled": int(s.reassembled)} for s in report.steps]


def write_bundle(out_dir, problem: Problem, results, report: SolveReport) -> Path:
    """Dump fields, averages and the solve report of a load program."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout = problem.layout()
    names = component_names(layout.dim, layout.physics)
    grad, flux = ("gradient", "flux") if layout.physics == "thermal" else ("strain", "stress")
    rows = []
    for k, res in enumerate(results):
        write_field(out / f"step{k:03d}_u", res.u, "(component, node_type, *pixels)",
                    field="fluctuation", stencil=problem.stencil.value)
        for tag, arr in ((grad, res.eps), (flux, res.sigma)):
            write_field(out / f"step{k:03d}_{tag}", arr,
                        "(component, quad_point, *pixels)", names, field=tag,
                        stencil=problem.stencil.value)
        row = {"load_step": k}
        e = problem.loads[k]
        row.update({f"e_{c}": float(v) for c, v in zip(names, e)})
        row.update({f"{grad}_{c}": float(v)
                    for c, v in zip(names, operators.average(layout, res.eps))})
        row.update({f"{flux}_{c}": float(v)
                    for c, v in zip(names, operators.average(layout, res.sigma))})
        rows.append(row)
    write_csv(out / "averages.csv", rows)
    write_csv(out / "report.csv", report_rows(report))
    summary = {"name": problem.name, "cause": report.cause,
               "newton_counts": report.newton_counts, "total_cg": report.total_cg,
               "timings": report.timings, "dims": list(problem.cell.dims),
               "lengths": list(problem.cell.lengths), "stencil": problem.stencil.value,
               "physics": problem.physics}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return out


def reaverage(out_dir, problem: Problem) -> list[dict]:
    """Reload the quadrature dumps and recompute the volume averages."""
    out = Path(out_dir)
    layout = problem.layout()
    names = component_names(layout.dim, layout.physics)
    grad, flux = ("gradient", "flux") if layout.physics == "thermal" else ("strain", "stress")
    rows = []
    k = 0
    while os.path.exists(out / f"step{k:03d}_{flux}.bin"):
        row = {"load_step": k}
        for tag in (grad, flux):
            arr, _ = read_field(out / f"step{k:03d}_{tag}")
            row.update({f"{tag}_{c}": float(v)
                        for c, v in zip(names, operators.average(layout, arr))})
        rows.append(row)
        k += 1
    return rows
