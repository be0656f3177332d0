"""Command-line entry point: ``embercap {carve,optimize,spectrum,nv-demo,report}``.

Each command reads a JSON config (unknown keys are rejected; relative paths
resolve against the config file's directory) and writes schema-tagged outputs
into ``--out``.  Exit status: 0 success, 2 invalid config or input, 3 parse
error, 4 no convergence (outputs are still written), 5 internal error.  On
failure a JSON error record is printed to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, model_validator

from . import __version__
from .errors import ConvergenceError, EmbercapError, ParseError, ValidationError
from .field import SiteVector, read_density_file, write_density_file
from .lattice import (build_supercell, diamond_conventional, diamond_primitive, emit_xyz,
                      make_nv_defect, neighbor_graph, parse_structure)
from .manybody import (BAR, embed_one_body, excitation_energies, fci_solve, fixed,
                       format_table, order_states, parse_fcidump)
from .meanfield import parse_model
from .nvmodel import (build_nv_active_space, classify_states, nv_spectrum, parse_params,
                      reference_params)
from .oep import build_embedding_problem, optimize_vemb
from .partition import (auxiliary_fragment, cap_selection, dumps_report, partition_report,
                        resolve_seeds, select_cluster)
from .symmetry import symmetry_measure
from .workflow import embedded_cluster_spectrum

EXIT_OK, EXIT_VALIDATION, EXIT_PARSE, EXIT_CONVERGENCE, EXIT_INTERNAL = 0, 2, 3, 4, 5
ERROR_SCHEMA = "embercap.error.v1"
DIFF_SCHEMA = "embercap.spectrum-diff.v1"
DELTA_DIGITS = 10

log = logging.getLogger("embercap")


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------- config schemas

class BuildSpec(Strict):
    cell: Literal["conventional", "primitive"] = "conventional"
    lattice_constant: float = Field(3.5677, gt=0)
    reps: tuple[int, int, int] = (2, 2, 2)
    nv_defect: bool = True
    vacancy_site: int = 0
    substitution_site: Optional[int] = None  # default: first bonded neighbor


class PositionSeed(Strict):
    positions: list[tuple[float, float, float]]


class SelectorSeed(Strict):
    element: Optional[str] = None
    degree: Optional[int] = None


SeedValue = Union[list[int], SelectorSeed, PositionSeed]


class Growth(Strict):
    name: str
    neighbors_of: str
    element: Optional[str] = None
    min_shared: int = Field(1, ge=1)


class SymmetryCheck(Strict):
    group: Literal["C3v"] = "C3v"
    threshold: float = Field(1e-3, gt=0)


class CarveRun(Strict):
    label: Optional[str] = None
    structure: Optional[str] = None
    build: Optional[BuildSpec] = None
    bond_cutoff: float = Field(1.8, gt=0)
    seeds: dict[str, SeedValue]
    growth: list[Growth] = []
    charge: int = -1
    multiplicity: int = Field(3, ge=1)
    symmetry: Optional[SymmetryCheck] = SymmetryCheck()

    @model_validator(mode="after")
    def _source(self):
        if (self.structure is None) == (self.build is None):
            raise ValueError("give exactly one of 'structure' or 'build'")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        for name, s in self.seeds.items():
            if isinstance(s, list) and not s:
                raise ValueError(f"seed set {name!r} is empty")
            if isinstance(s, PositionSeed) and not s.positions:
                raise ValueError(f"seed set {name!r} lists no positions")
        return self


class CarveConfig(Strict):
    runs: list[CarveRun] = Field(min_length=1)


class OepOptions(Strict):
    tolerance: float = Field(1e-6, gt=0)
    max_iter: int = Field(500, ge=1)
    regularization_weight: float = Field(0.0, ge=0)
    gauge: Literal["mean-zero", "none"] = "mean-zero"
    memory: int = Field(10, ge=1)


class OptimizeConfig(Strict):
    model: str
    cluster_sites: list[int] = Field(min_length=1)
    capped: bool = True
    cap_onsite: float = 0.0
    cap_potential: Literal["sampled", "none"] = "sampled"
    cluster_spin: Optional[tuple[float, float]] = None
    oep: OepOptions = OepOptions()


class ActiveOptions(Strict):
    n_active: int = Field(4, ge=1)
    n_active_electrons: int = Field(4, ge=0)
    u: float = 1.0


class Sector(Strict):
    sz: float = 0.0
    n_states: int = Field(1, ge=1)


class ClusterSource(OptimizeConfig):
    active: ActiveOptions = ActiveOptions()
    embed: Literal["both", "embedded", "bare"] = "both"


class NvSource(Strict):
    params: str = "reference"
    enforce_symmetry: bool = True


class SpectrumConfig(Strict):
    integrals: Optional[str] = None
    potential: Optional[str] = None  # site potential file applied through orbital_map
    orbital_map: Optional[str] = None  # whitespace matrix, sites x orbitals
    nv_model: Optional[NvSource] = None
    cluster: Optional[ClusterSource] = None
    sectors: list[Sector] = [Sector()]
    onsite_shift: float = 0.0
    threshold: float = Field(0.05, gt=0, lt=1)

    @model_validator(mode="after")
    def _one_source(self):
        given = [x for x in (self.integrals, self.nv_model, self.cluster) if x is not None]
        if len(given) != 1:
            raise ValueError("give exactly one of 'integrals', 'nv_model' or 'cluster'")
        if (self.potential is None) != (self.orbital_map is None):
            raise ValueError("'potential' and 'orbital_map' go together")
        if self.potential is not None and self.integrals is None:
            raise ValueError("'potential' applies to an 'integrals' source only")
        return self


class NvDemoConfig(Strict):
    params: str = "reference"
    threshold: float = Field(0.05, gt=0, lt=1)
    onsite_shift: float = 0.0


# ---------------------------------------------------------------- helpers

def _load_config(path, schema):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {str(path)!r} not found")
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, str(path)) from None
    if schema is CarveConfig and isinstance(raw, dict) and "runs" not in raw:
        raw = {"runs": [raw]}
    try:
        cfg = schema.model_validate(raw)
    except PydanticError as exc:
        msgs = "; ".join(f"{'.'.join(str(x) for x in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ValidationError(f"{path}: {msgs}") from None
    return cfg, path.parent


def _resolve(base, rel, what):
    p = Path(rel)
    p = p if p.is_absolute() else base / p
    if not p.is_file():
        raise ValidationError(f"{what} file {str(p)!r} not found")
    return p


def _write(path, text):
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    log.info("wrote %s", path)


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _read_text(path):
    return Path(path).read_text()


# ---------------------------------------------------------------- carve

def _cell_for(run, base):
    if run.structure is not None:
        p = _resolve(base, run.structure, "structure")
        try:
            return parse_structure(_read_text(p))
        except ParseError as exc:
            raise ParseError(exc.message, exc.lineno, str(p)) from None
    b = run.build
    prim = diamond_conventional(b.lattice_constant) if b.cell == "conventional" \
        else diamond_primitive(b.lattice_constant)
    cell = build_supercell(prim, b.reps)
    if b.nv_defect:
        g = neighbor_graph(cell, run.bond_cutoff)
        sub = b.substitution_site
        if sub is None:
            sub = g.neighbors(b.vacancy_site)[0]
        cell = make_nv_defect(cell, b.vacancy_site, sub, graph=g)
    return cell


def _seeds_for(run, cell, graph, tol):
    spec = {}
    for name, s in run.seeds.items():
        if isinstance(s, PositionSeed):
            idx = []
            inv = np.linalg.inv(cell.lattice)
            for r in s.positions:
                d = (cell.cart - np.asarray(r)) @ inv
                d -= np.round(d) * np.array(cell.pbc)
                dist = np.linalg.norm(d @ cell.lattice, axis=1)
                hits = np.flatnonzero(dist <= tol)
                if len(hits) != 1:
                    raise ValidationError(
                        f"seed position {list(r)} matches {len(hits)} sites within {tol} A")
                idx.append(int(hits[0]))
            spec[name] = idx
        elif isinstance(s, SelectorSeed):
            spec[name] = s.model_dump(exclude_none=True)
        else:
            spec[name] = list(s)
    seeds = resolve_seeds(cell, graph, spec)
    empty = [k for k, v in seeds.items() if not v]
    if empty:
        raise ValidationError(f"seed set(s) {empty} select no atoms")
    return seeds


def carve_one(run, base, seed_tolerance=0.1):
    cell = _cell_for(run, base)
    graph = neighbor_graph(cell, run.bond_cutoff)
    seeds = _seeds_for(run, cell, graph, seed_tolerance)
    sel = select_cluster(cell, graph, seeds, [g.model_dump() for g in run.growth])
    cl, env = cap_selection(cell, graph, sel, (run.charge, run.multiplicity))
    aux = auxiliary_fragment(cl, env, graph)
    csm = None
    if run.symmetry is not None:
        csm = symmetry_measure(cl, run.symmetry.group)
    report = partition_report(cl, env, aux, csm,
                              run.symmetry.threshold if run.symmetry else 1e-3, run.label)
    report["source"] = {"formula": cell.formula, "n_sites": len(cell)}
    return report, cl, env, aux


def _aux_xyz(aux):
    comps = {i: k for k, c in enumerate(aux.connected_components) for i in c}
    return emit_xyz([a[0] for a in aux.atoms], [a[1] for a in aux.atoms],
                    comment=f"{aux.formula} auxiliary",
                    extra_columns={"origin": [a[3] for a in aux.atoms],
                                   "component": [str(comps[i]) for i in range(len(aux.atoms))]})


def cmd_carve(args):
    cfg, base = _load_config(args.config, CarveConfig)
    out = Path(args.out)
    reports = []
    for k, run in enumerate(cfg.runs):
        log.info("carving run %d (%s)", k, run.label or "unlabeled")
        report, cl, env, aux = carve_one(run, base, args.seed_tolerance)
        sub = out if len(cfg.runs) == 1 else out / (run.label or f"run{k}")
        _write(sub / "partition.json", dumps_report(report))
        _write(sub / "cluster.xyz", cl.to_xyz())
        _write(sub / "environment.xyz", env.to_xyz())
        _write(sub / "auxiliary.xyz", _aux_xyz(aux))
        reports.append(report)
        print(f"{run.label or k}: cluster {report['cluster']['formula']}  environment "
              f"{report['environment']['formula']}  auxiliary {report['auxiliary']['formula']} "
              f"({report['auxiliary']['n_components']} components)"
              + (f"  CSM {report['symmetry']['csm']:.3g}" if "symmetry" in report else ""))
    if len(cfg.runs) > 1:
        _write(out / "batch.json", _dumps({"schema": "embercap.partition-batch.v1",
                                            "runs": reports}))
    return EXIT_OK


# ---------------------------------------------------------------- optimize

def _load_model(base, rel):
    p = _resolve(base, rel, "model")
    return parse_model(_read_text(p), str(p))


def _problem(cfg, base):
    model = _load_model(base, cfg.model)
    return build_embedding_problem(model, cfg.cluster_sites, capped=cfg.capped,
                                   cap_onsite=cfg.cap_onsite, cap_potential=cfg.cap_potential,
                                   cluster_spin=cfg.cluster_spin)


def _optimize(problem, opts):
    return optimize_vemb(problem, tolerance=opts.tolerance, max_iter=opts.max_iter,
                         regularization_weight=opts.regularization_weight, gauge=opts.gauge,
                         memory=opts.memory)


def cmd_optimize(args):
    cfg, base = _load_config(args.config, OptimizeConfig)
    problem = _problem(cfg, base)
    res = _optimize(problem, cfg.oep)
    out = Path(args.out)
    _write(out / "oep.json", res.to_json())
    _write(out / "vemb.field", write_density_file(res.potential(), "potential"))
    _write(out / "trace.tsv", res.trace_table())
    print(f"{res.status}: W = {res.w_value:.12g}, residual_max = {res.residual_max:.3e}, "
          f"{res.iterations} iterations")
    return EXIT_OK if res.converged else EXIT_CONVERGENCE


# ---------------------------------------------------------------- spectrum

def _rounded(x):
    # + 0.0 folds a noise-negative zero into 0.0
    return round(x, DELTA_DIGITS) + 0.0


def _spectrum_doc(report, threshold, source):
    doc = report.to_dict(threshold)
    for st in doc["states"]:
        st["delta_e"] = _rounded(st["delta_e"])
    doc["source"] = source
    return doc


def _delta_table(report):
    lines = ["index\tlabel\tsz\tS2\tdelta_e"]
    for k, s in enumerate(report.states):
        lines.append(f"{k}\t{s.label or '-'}\t{s.sz:g}\t{fixed(s.s_squared, 6)}\t"
                     f"{fixed(report.delta_e[k], DELTA_DIGITS)}")
    return "\n".join(lines) + "\n"


def _solve_sectors(space, sectors):
    states = []
    for sec in sectors:
        states += fci_solve(space, sec.sz, sec.n_states)
    return excitation_energies(order_states(states))


def _nv_params(base, spec, enforce=True):
    if spec == "reference":
        return reference_params()
    p = _resolve(base, spec, "parameter")
    return parse_params(_read_text(p), str(p), enforce=enforce)


def _shift(space, c):
    return space.shifted(c) if c else space


def _emit_spectrum(out, name, report, threshold, source):
    _write(out / f"{name}.json", _dumps(_spectrum_doc(report, threshold, source)))
    _write(out / f"{name}.tsv", _delta_table(report))
    _write(out / f"{name}.txt", format_table(report, threshold))


def cmd_spectrum(args):
    cfg, base = _load_config(args.config, SpectrumConfig)
    out = Path(args.out)
    if cfg.integrals is not None:
        p = _resolve(base, cfg.integrals, "integrals")
        space = parse_fcidump(_read_text(p), str(p))
        if cfg.potential is not None:
            vp = _resolve(base, cfg.potential, "potential")
            v = read_density_file(_read_text(vp), str(vp))
            if not isinstance(v, SiteVector):
                raise ValidationError("spectrum potentials must be site vectors")
            mp = _resolve(base, cfg.orbital_map, "orbital map")
            try:
                cmat = np.loadtxt(mp, ndmin=2)
            except ValueError as exc:
                raise ParseError(f"bad orbital map: {exc}", None, str(mp)) from None
            space = embed_one_body(space, v, cmat)
        rep = _solve_sectors(_shift(space, cfg.onsite_shift), cfg.sectors)
        _emit_spectrum(out, "spectrum", rep, cfg.threshold, {"integrals": str(cfg.integrals)})
        print(format_table(rep, cfg.threshold), end="")
        return EXIT_OK
    if cfg.nv_model is not None:
        params = _nv_params(base, cfg.nv_model.params, cfg.nv_model.enforce_symmetry)
        space = _shift(build_nv_active_space(params, enforce=cfg.nv_model.enforce_symmetry),
                       cfg.onsite_shift)
        rep = _solve_sectors(space, cfg.sectors)
        _emit_spectrum(out, "spectrum", rep, cfg.threshold, {"nv_model": cfg.nv_model.params})
        print(format_table(rep, cfg.threshold), end="")
        return EXIT_OK
    cl = cfg.cluster
    problem = _problem(cl, base)
    kw = dict(n_active=cl.active.n_active, n_active_electrons=cl.active.n_active_electrons,
              u=cl.active.u, n_states=max(s.n_states for s in cfg.sectors))
    status = EXIT_OK
    reports = {}
    if cl.embed in ("both", "embedded"):
        res = _optimize(problem, cl.oep)
        _write(out / "oep.json", res.to_json())
        _write(out / "vemb.field", write_density_file(res.potential(), "potential"))
        if not res.converged:
            status = EXIT_CONVERGENCE
        reports["embedded"] = _cluster_report(problem, res, cfg, kw)
    if cl.embed in ("both", "bare"):
        reports["bare"] = _cluster_report(problem, None, cfg, kw)
    for name, rep in reports.items():
        _emit_spectrum(out, f"spectrum_{name}", rep, cfg.threshold,
                       {"cluster_model": cl.model, "embedding": name})
    if len(reports) == 2:
        e, b = reports["embedded"], reports["bare"]
        rows = [{"index": k + 1,
                 "embedded": _rounded(x), "bare": _rounded(y), "difference": _rounded(x - y)}
                for k, (x, y) in enumerate(zip(e.excitations, b.excitations))]
        _write(out / "diff.json", _dumps({"schema": DIFF_SCHEMA, "excitations": rows}))
        for r in rows:
            print(f"dE(0->{r['index']}): embedded {r['embedded']:.8f}  bare {r['bare']:.8f}  "
                  f"diff {r['difference']:+.2e}")
    return status


def _cluster_report(problem, res, cfg, kw):
    states = []
    for sec in cfg.sectors:
        kw_s = dict(kw, sz=sec.sz, n_states=sec.n_states)
        states += list(embedded_cluster_spectrum(problem, res, **kw_s).report.states)
    return excitation_energies(order_states(states))


# ---------------------------------------------------------------- nv-demo

def cmd_nv_demo(args):
    if args.config:
        cfg, base = _load_config(args.config, NvDemoConfig)
    else:
        cfg, base = NvDemoConfig(), Path.cwd()
    params = _nv_params(base, cfg.params)
    space = _shift(build_nv_active_space(params), cfg.onsite_shift)
    rep = classify_states(nv_spectrum(space), cfg.threshold)
    out = Path(args.out)
    kets = [f"|{k}⟩" for k in ("211", "121", "112", "202", "220", "022",
                                 f"21{BAR}1", f"211{BAR}")]
    table = format_table(rep, cfg.threshold, kets=kets)
    _emit_spectrum(out, "nv_spectrum", rep, cfg.threshold, {"nv_model": cfg.params})
    _write(out / "nv_table.txt", table)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------- report

def _summarize(doc):
    schema = doc.get("schema", "")
    if schema.startswith("embercap.partition-batch"):
        return "\n".join(_summarize(r) for r in doc["runs"])
    if schema.startswith("embercap.partition"):
        s = f"{doc.get('label') or 'partition'}: {doc['cluster']['formula']} / " \
            f"{doc['environment']['formula']} / {doc['auxiliary']['formula']} " \
            f"({doc['auxiliary']['n_components']} auxiliary components)"
        if "symmetry" in doc:
            s += f"; CSM({doc['symmetry']['group']}) = {doc['symmetry']['csm']:.3g}"
        return s
    if schema.startswith("embercap.oep"):
        return (f"OEP {doc['status']}: W = {doc['w_value']:.12g}, residual_max = "
                f"{doc['residual_max']:.3e}, {doc['iterations']} iterations")
    if schema.startswith("embercap.spectrum-diff"):
        return "\n".join(f"dE(0->{r['index']}): embedded {r['embedded']:.8f} bare {r['bare']:.8f}"
                         for r in doc["excitations"])
    if schema.startswith("embercap.spectrum"):
        lines = []
        for st in doc["states"]:
            top = ", ".join(f"{c['ket']} {c['c']:+.3f}" for c in st["configurations"][:3])
            lines.append(f"{st['index']:>3} {st['label'] or '-':<10} dE {st['delta_e']:.8f} "
                         f"S^2 {st['s_squared']:.3f}  {top}")
        return "\n".join(lines)
    raise ValidationError(f"unrecognized report schema {schema!r}")


def cmd_report(args):
    paths = list(args.paths)
    if args.config:
        paths.append(args.config)
    if not paths:
        raise ValidationError("report needs at least one JSON file")
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise ValidationError(f"report file {str(p)!r} not found")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, str(p)) from None
        print(f"== {p}")
        print(_summarize(doc))
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser():
    ap = argparse.ArgumentParser(prog="embercap", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"embercap {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--out", default="embercap-out", help="output directory")
        p.add_argument("--seed-tolerance", type=float, default=0.1,
                       help="distance (A) for matching seed positions to sites")
        p.add_argument("--verbose", action="store_true", help="log progress to stderr")

    common(sub.add_parser("carve", help="carve, cap and check a cluster"))
    common(sub.add_parser("optimize", help="optimize the embedding potential"))
    common(sub.add_parser("spectrum", help="active-space FCI spectrum"))
    common(sub.add_parser("nv-demo", help="labeled NV model spectrum"), config_required=False)
    rp = sub.add_parser("report", help="summarize JSON outputs")
    common(rp, config_required=False)
    rp.add_argument("paths", nargs="*", help="JSON outputs to summarize")
    return ap


COMMANDS = {"carve": cmd_carve, "optimize": cmd_optimize, "spectrum": cmd_spectrum,
            "nv-demo": cmd_nv_demo, "report": cmd_report}


def _error(kind, exc, code):
    rec = {"schema": ERROR_SCHEMA, "error": kind, "message": str(exc), "exit_status": code}
    if isinstance(exc, ParseError):
        rec["line"] = exc.lineno
        rec["source"] = exc.source
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ParseError as exc:
        return _error("parse", exc, EXIT_PARSE)
    except ValidationError as exc:
        return _error("validation", exc, EXIT_VALIDATION)
    except ConvergenceError as exc:
        return _error("convergence", exc, EXIT_CONVERGENCE)
    except EmbercapError as exc:
        return _error("error", exc, EXIT_INTERNAL)
    except Exception as exc:  # noqa: BLE001 - last-resort structured record
        log.debug("internal error", exc_info=True)
        return _error("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
