"""``mega-sim``: configuration-driven experiment runner.

Exit codes: 0 success (including a non-converged MEGA loop), 2 invalid
configuration or domain error, 3 resource limits, 4 numerical or fit failure.
"""
from __future__ import annotations

import argparse
import copy
import datetime
import hashlib
import io
import json
import logging
import os
import sys
import time

import jsonschema
import numpy as np
import yaml

from . import __version__
from .corr import (
    PoleList,
    auto_grid,
    broaden,
    correlator_poles,
    correlator_time,
    extend_negative_times,
    fourier_tail_fit,
    ldos,
    match_poles,
)
from .diag import (
    SubsystemSpec,
    eth_scatter,
    monotonicity_violations,
    reduced_density_matrix,
    state_trace_distance,
    trace_distance,
)
from .eig import all_sectors, cached_full_spectrum, neighbours, sectors_with_n
from .ensemble import (
    ConstantSchedule,
    ExpSchedule,
    ThermalParams,
    dephase,
    dephase_ensemble,
    eigenstate,
    gibbs,
    mega_ensemble,
    microcanonical_window,
    neel_state,
    ramp_prepare,
    spin_band_top,
)
from .errors import DomainError, MegaError, ResourceError
from .fit import FitConfig, canonical_energy, energy_matched_beta, fit_beta_density, fit_beta_mu, mega_run
from .fock import build_sector_basis
from .model import ModelParams, build_hamiltonian, build_observable

log = logging.getLogger("mega_sim")

EXIT_OK, EXIT_CONFIG, EXIT_RESOURCE, EXIT_NUMERIC = 0, 2, 3, 4
EXPERIMENTS = ["spectrum", "ldos", "greens", "density_corr", "mega", "eth_scatter",
               "trace_distance", "gibbs_fit"]

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int0 = {"type": "integer", "minimum": 0}
_pair = {"type": "array", "items": _int0, "minItems": 2, "maxItems": 2}
_sectors = {"oneOf": [{"const": "all"},
                      {"type": "array", "items": _pair, "minItems": 1},
                      {"type": "object", "properties": {"n": _int0, "neighbours": {"type": "boolean"}},
                       "required": ["n"], "additionalProperties": False}]}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "mega-sim experiment",
    "type": "object",
    "required": ["model", "experiment"],
    "additionalProperties": False,
    "properties": {
        "description": {"type": "string"},
        "experiment": {"enum": EXPERIMENTS},
        "output": {"type": "string"},
        "model": {
            "type": "object", "required": ["L"], "additionalProperties": False,
            "properties": {"L": {"type": "integer", "minimum": 2, "maximum": 16}, "U": _num, "t": _pos,
                           "t_prime": _num, "u_prime": _num, "boundary": {"enum": ["periodic", "open"]}},
        },
        "sectors": _sectors,
        "source": {
            "type": "object", "required": ["type"], "additionalProperties": False,
            "properties": {
                "type": {"enum": ["gibbs", "window", "ramp", "eigenstate"]},
                "beta": {"type": "number", "minimum": 0}, "mu": _num, "temperature": _pos,
                "kind": {"enum": ["canonical", "grand_canonical"]}, "n": _int0,
                "sectors": {"type": "array", "items": _pair, "minItems": 1},
                "emin": _num, "emax": _num,
                "initial": {"type": "array", "items": {"enum": ["up_first", "down_first"]}, "minItems": 1},
                "tau": {"type": "number", "minimum": 0}, "tol": _pos,
                "schedule": {
                    "type": "object", "required": ["kind"], "additionalProperties": False,
                    "properties": {"kind": {"enum": ["exp", "constant"]}, "a": _num, "b": _pos, "c": _num,
                                   "value": _num}},
                "weighting": {"enum": ["uniform", "boltzmann"]}, "beta_hat": _num,
                "sector": _pair, "index": _int0,
            },
            "allOf": [
                {"if": {"properties": {"type": {"const": "gibbs"}}}, "then": {"required": ["beta"]}},
                {"if": {"properties": {"type": {"const": "window"}}}, "then": {"required": ["emin", "emax"]}},
                {"if": {"properties": {"type": {"const": "ramp"}}}, "then": {"required": ["initial"]}},
                {"if": {"properties": {"type": {"const": "eigenstate"}}},
                 "then": {"oneOf": [{"required": ["sector", "index"]}, {"required": ["n", "temperature"]}]}},
            ],
        },
        "reference": {"enum": ["none", "gibbs_matched"]},
        "correlator": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "i": _int0, "j": _int0, "spin": {"enum": ["up", "down"]},
                "family": {"enum": ["greens", "density"]},
                "eta": _pos, "kernel": {"enum": ["gaussian", "lorentzian"]},
                "grid": {"type": "object", "required": ["min", "max", "step"], "additionalProperties": False,
                         "properties": {"min": _num, "max": _num, "step": _pos}},
                "times": {"type": "object", "required": ["dt", "horizon"], "additionalProperties": False,
                          "properties": {"dt": _pos, "horizon": _pos}},
                "tail_model": {"enum": ["exponential", "power_law"]},
                "fit_window": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
                "fit_path": {"enum": ["poles", "broadened"]},
            },
        },
        "fit": {
            "type": "object", "additionalProperties": False,
            "properties": {"epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                           "weighting": {"enum": ["uniform", "min_magnitude"]},
                           "convergence_threshold": _pos},
        },
        "observables": {
            "type": "array", "minItems": 1,
            "items": {"oneOf": [
                {"enum": ["double_occupancy_avg", "total_number", "H"]},
                {"type": "object", "required": ["kind"], "additionalProperties": False,
                 "properties": {"kind": {"enum": ["double_occupancy_avg", "local_density", "total_number",
                                                  "momentum_occupation", "density_N"]},
                                "site": _int0, "spin": {"enum": ["up", "down"]},
                                "k": {"type": "integer"}, "name": {"type": "string"}}}]},
        },
        "subsystems": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "spin_band": {"type": "boolean"},
    },
}


class ConfigError(DomainError):
    def __init__(self, message, line=None, source="<config>"):
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


# ------------------------------------------------------------------ loading

def _node_at(node, path):
    """YAML node addressed by a jsonschema path, stopping at the deepest match."""
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == str(key)), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
    return node


def _key_line(node, key):
    if isinstance(node, yaml.MappingNode):
        for k, _ in node.value:
            if k.value == key:
                return k.start_mark.line + 1
    return node.start_mark.line + 1


def load_config(path: str):
    """Parse, schema-validate and semantically check a config; returns ``(cfg, root_node)``."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        root = yaml.compose(text)
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(err, 'problem', err)}",
                          mark.line + 1 if mark else None, path) from None
    if root is None or not isinstance(cfg, dict):
        raise ConfigError("configuration must be a mapping", 1, path)
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = errors[0]
        node = _node_at(root, list(err.absolute_path))
        loc = ".".join(map(str, err.absolute_path)) or "<root>"
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            line = _key_line(node, extra[0]) if extra else node.start_mark.line + 1
            raise ConfigError(f"{loc}: unknown key(s) {extra}", line, path)
        raise ConfigError(f"{loc}: {err.message}", node.start_mark.line + 1, path)
    _semantic_checks(cfg, root, path)
    return cfg, root


def _semantic_checks(cfg, root, path):
    def fail(msg, *keys):
        raise ConfigError(msg, _node_at(root, list(keys)).start_mark.line + 1, path)

    L = cfg["model"]["L"]
    exp = cfg["experiment"]
    src = cfg.get("source")
    needs_source = exp in ("ldos", "greens", "density_corr", "mega", "trace_distance", "gibbs_fit")
    if needs_source and src is None:
        fail(f"experiment {exp!r} needs a source", "experiment")
    if src is not None:
        allowed = {"gibbs": {"beta", "mu", "kind", "n", "sectors"},
                   "window": {"emin", "emax", "n", "sectors"},
                   "ramp": {"initial", "tau", "tol", "schedule", "weighting", "beta_hat"},
                   "eigenstate": {"sector", "index", "n", "temperature"}}[src["type"]]
        extra = sorted(set(src) - allowed - {"type"})
        if extra:
            raise ConfigError(f"source: keys {extra} do not apply to a {src['type']} source",
                              _key_line(_node_at(root, ["source"]), extra[0]), path)
        if src["type"] == "gibbs" and src.get("kind", "grand_canonical") == "canonical" \
                and "n" not in src and "sectors" not in src:
            fail("canonical source needs n or sectors", "source")
        if src["type"] == "window":
            if src["emin"] > src["emax"]:
                fail("window has emin > emax", "source", "emin")
            if "n" not in src and "sectors" not in src:
                fail("window source needs n or sectors", "source")
        if src["type"] == "ramp" and L % 2:
            fail("ramp sources start from Néel states and need even L", "model", "L")
        if exp == "mega" and src["type"] not in ("ramp", "window"):
            fail("mega needs a ramp or window source", "source", "type")
        for key in ("sectors",):
            for k, (u, d) in enumerate(src.get(key, [])):
                if u > L or d > L:
                    fail(f"sector ({u}, {d}) invalid for L={L}", "source", key, k)
        if "n" in src and src["n"] > 2 * L:
            fail(f"particle number {src['n']} exceeds 2L", "source", "n")
    corr = cfg.get("correlator", {})
    for key in ("i", "j"):
        if corr.get(key, 0) >= L:
            fail(f"site {corr[key]} outside [0, {L})", "correlator", key)
    if "grid" in corr and corr["grid"]["min"] >= corr["grid"]["max"]:
        fail("grid min must be below max", "correlator", "grid")
    if exp in ("greens", "density_corr") and "times" not in corr:
        fail(f"experiment {exp!r} needs correlator.times", "correlator")
    for k, s in enumerate(cfg.get("subsystems", [])):
        if s > L:
            fail(f"subsystem size {s} exceeds L={L}", "subsystems", k)


# ---------------------------------------------------------------- planning

def model_params(cfg) -> ModelParams:
    return ModelParams(**cfg["model"])


def _source_sectors(cfg, L):
    src = cfg["source"]
    kind = src["type"]
    if kind == "gibbs":
        if src.get("kind", "grand_canonical") == "grand_canonical":
            return all_sectors(L)
        return [tuple(s) for s in src["sectors"]] if "sectors" in src else sectors_with_n(L, src["n"])
    if kind in ("window", "eigenstate"):
        if "sectors" in src:
            return [tuple(s) for s in src["sectors"]]
        if "sector" in src:
            return [tuple(src["sector"])]
        return sectors_with_n(L, src["n"])
    return [(L // 2, L // 2)]


def plan_sectors(cfg) -> list:
    L = cfg["model"]["L"]
    exp = cfg["experiment"]
    if exp in ("spectrum", "eth_scatter"):
        sel = cfg.get("sectors", "all")
        if isinstance(sel, list):
            return sorted({tuple(s) for s in sel})
        if isinstance(sel, dict):
            base = sectors_with_n(L, sel["n"])
            return sorted({s for lab in base for s in neighbours(lab, L)}) if sel.get("neighbours") else base
        return all_sectors(L)
    labels = set(_source_sectors(cfg, L))
    if cfg.get("reference", "none") == "gibbs_matched" or exp in ("trace_distance", "mega"):
        for n in {u + d for u, d in labels}:
            labels.update(sectors_with_n(L, n))
    if _family(cfg) == "greens" and exp != "trace_distance":
        labels = {s for lab in labels for s in neighbours(lab, L)}
    return sorted(labels)


def _family(cfg) -> str:
    if cfg["experiment"] == "density_corr":
        return "density"
    if cfg["experiment"] in ("ldos", "greens"):
        return "greens"
    return cfg.get("correlator", {}).get("family", "greens")


def gershgorin_bounds(params: ModelParams, label) -> tuple[float, float]:
    H = build_hamiltonian(params, build_sector_basis(params.L, *label)).matrix
    d = H.diagonal().real
    r = np.asarray(abs(H).sum(axis=1)).ravel() - np.abs(d)
    return float((d - r).min()), float((d + r).max())


def _precheck_window(cfg, root, path):
    src = cfg.get("source")
    if not src or src["type"] != "window":
        return
    params = model_params(cfg)
    bounds = [gershgorin_bounds(params, lab) for lab in _source_sectors(cfg, params.L)]
    lo, hi = min(b[0] for b in bounds), max(b[1] for b in bounds)
    if src["emax"] < lo or src["emin"] > hi:
        raise ConfigError(f"energy window [{src['emin']}, {src['emax']}] misses the spectral bounds "
                          f"[{lo:.6g}, {hi:.6g}] of the selected sectors",
                          _node_at(root, ["source", "emin"]).start_mark.line + 1, path)


# ------------------------------------------------------------------ sources

def _fit_config(cfg) -> FitConfig:
    return FitConfig(**cfg.get("fit", {}))


def _ramp_states(cfg, params):
    src = cfg["source"]
    sch = src.get("schedule", {"kind": "exp"})
    schedule = (ConstantSchedule(sch.get("value", params.U)) if sch["kind"] == "constant"
                else ExpSchedule(sch.get("a", 490.0), sch.get("b", 5.0), sch.get("c", params.U)))
    return [ramp_prepare(neel_state(params.L, p), params, schedule, tau=src.get("tau", 50.0),
                         tol=src.get("tol", 1e-8)) for p in src["initial"]]


def _nearest_eigenstate(spectra, labels, energy):
    best = min(((abs(spectra[l].energies - energy).min(), l) for l in labels), key=lambda x: x[0])
    lab = best[1]
    return eigenstate(spectra, lab, int(np.argmin(abs(spectra[lab].energies - energy))))


def build_source(cfg, spectra, info: dict):
    """Stationary state described by ``cfg['source']``; details go into ``info``."""
    src = cfg["source"]
    params = spectra.params
    kind = src["type"]
    if kind == "gibbs":
        tp = ThermalParams(beta=src["beta"], mu=src.get("mu", 0.0), kind=src.get("kind", "grand_canonical"),
                           n=src.get("n"), sectors=tuple(map(tuple, src["sectors"])) if "sectors" in src else None)
        return gibbs(spectra, tp)
    if kind == "window":
        state = microcanonical_window(spectra, src["emin"], src["emax"], _source_sectors(cfg, params.L))
        info["window_states"] = int(sum(np.count_nonzero(w) for w in state.weights.values()))
        return state
    if kind == "eigenstate":
        if "sector" in src:
            psi = eigenstate(spectra, src["sector"], src["index"])
        else:
            labels = sectors_with_n(params.L, src["n"])
            target = canonical_energy(spectra, labels, 1.0 / src["temperature"])
            info["target_energy"] = target
            psi = _nearest_eigenstate(spectra, labels, target)
        return dephase(psi, spectra[psi.sector])
    states = _ramp_states(cfg, params)
    info["ramp_steps"] = [s.meta.get("steps") for s in states]
    ens = mega_ensemble(states, src.get("weighting", "uniform"), src.get("beta_hat"), spectra)
    return dephase_ensemble(ens, spectra)


def matched_gibbs(state, spectra, info: dict):
    ns = {u + d for u, d in state.labels()}
    if len(ns) != 1:
        raise DomainError("energy matching needs a source of fixed particle number")
    n = ns.pop()
    e = state.energy(spectra)
    m = energy_matched_beta(spectra, e, n=n)
    info.update(source_energy=e, matched_beta=m.beta, matched_saturated=m.saturated)
    return gibbs(spectra, ThermalParams(beta=m.beta, kind="canonical", n=n))


# ------------------------------------------------------------------ output

def _fmt(x) -> str:
    return "%.17g" % x


def csv_text(header, columns) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in zip(*columns):
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


# -------------------------------------------------------------- experiments

def _grid(corr):
    g = corr.get("grid")
    if g is None:
        return None
    n = int(round((g["max"] - g["min"]) / g["step"])) + 1
    return np.linspace(g["min"], g["max"], n)


def _poles(state, spectra, corr, family):
    i, j, spin = corr.get("i", 0), corr.get("j", corr.get("i", 0)), corr.get("spin", "up")
    return (correlator_poles(state, spectra, "lesser", i, j, spin, family=family),
            correlator_poles(state, spectra, "greater", i, j, spin, family=family))


def run_spectrum(cfg, spectra, files, results):
    rows = [(u, d, k, e) for (u, d) in spectra.labels() for k, e in enumerate(spectra[(u, d)].energies)]
    files["spectrum.csv"] = "n_up,n_dn,index,E\n" + "".join(f"{u},{d},{k},{_fmt(e)}\n" for u, d, k, e in rows)
    results["ground_energy"] = spectra.ground_energy()
    results["total_dim"] = spectra.total_dim


def run_ldos(cfg, spectra, files, results):
    corr = cfg.get("correlator", {})
    eta, kern = corr.get("eta", 0.1), corr.get("kernel", "gaussian")
    state = build_source(cfg, spectra, results)
    corr = {**corr, "j": corr.get("i", 0)}
    lo, gr = _poles(state, spectra, corr, "greens")
    grid = _grid(corr)
    ref = matched_gibbs(state, spectra, results) if cfg.get("reference") == "gibbs_matched" else None
    if grid is None:
        oms = [lo.omegas, gr.omegas]
        if ref is not None:
            oms += [p.omegas for p in _poles(ref, spectra, corr, "greens")]
        grid = auto_grid(np.concatenate(oms), eta)
    A = ldos(gr, lo, eta, kern, grid)
    cols, head = [grid, A.values.real], ["omega", "A"]
    if ref is not None:
        rl, rg = _poles(ref, spectra, corr, "greens")
        cols.append(ldos(rg, rl, eta, kern, grid).values.real)
        head.append("A_reference")
    files["ldos.csv"] = csv_text(head, cols)
    results["ldos_integral"] = float(np.trapezoid(A.values.real, grid))
    results["lesser_only_discrepancy"] = A.meta["lesser_only_discrepancy"]


def run_correlator(cfg, spectra, files, results):
    family = _family(cfg)
    corr = cfg["correlator"]
    i, j, spin = corr.get("i", 0), corr.get("j", corr.get("i", 0)), corr.get("spin", "up")
    eta, kern = corr.get("eta", 0.1), corr.get("kernel", "gaussian")
    times = np.arange(0, corr["times"]["horizon"] + 0.5 * corr["times"]["dt"], corr["times"]["dt"])
    state = build_source(cfg, spectra, results)
    sources = {"": state}
    if cfg.get("reference") == "gibbs_matched":
        sources["reference_"] = matched_gibbs(state, spectra, results)
    head, cols = ["t"], [times]
    shead, scols, grid = ["omega"], [], _grid(corr)
    pole_sets = {p: _poles(s, spectra, corr, family) for p, s in sources.items()}
    if grid is None:
        grid = auto_grid(np.concatenate([x.omegas for pair in pole_sets.values() for x in pair]), eta)
    scols.append(grid)
    for prefix, s in sources.items():
        for kind in ("lesser", "greater"):
            ser = correlator_time(s, spectra, kind, i, j, spin, times, family=family)
            head += [f"{prefix}{kind}_re", f"{prefix}{kind}_im"]
            cols += [ser.values.real, ser.values.imag]
        for p in pole_sets[prefix]:
            sp = broaden(p, eta, kern, grid).physical()
            shead += [f"{prefix}{p.kind}_re", f"{prefix}{p.kind}_im"]
            scols += [sp.real, sp.imag]
    if corr.get("tail_model"):
        ser = extend_negative_times(correlator_time(state, spectra, "lesser", i, j, spin, times, family=family))
        ft = fourier_tail_fit(ser, grid, corr["tail_model"], corr.get("fit_window", 0.2), damping_eta=eta)
        shead += ["time_path_lesser_re", "time_path_lesser_im"]
        scols += [ft.physical().real, ft.physical().imag]
        results["tail"] = {k: v for k, v in ft.meta.items() if isinstance(v, (int, float, bool, str))}
    stem = "greens" if family == "greens" else "density"
    files[f"{stem}_time.csv"] = csv_text(head, cols)
    files[f"{stem}_spectrum.csv"] = csv_text(shead, scols)


def run_gibbs_fit(cfg, spectra, files, results):
    family = _family(cfg)
    corr = cfg.get("correlator", {})
    state = build_source(cfg, spectra, results)
    lo, gr = _poles(state, spectra, corr, family)
    if corr.get("fit_path", "poles") == "broadened":
        eta, kern = corr.get("eta", 0.1), corr.get("kernel", "gaussian")
        grid = _grid(corr)
        if grid is None:
            grid = auto_grid(np.concatenate([lo.omegas, gr.omegas]), eta)
        lo, gr = broaden(lo, eta, kern, grid), broaden(gr, eta, kern, grid)
        om, pl, pg = grid, lo.physical(), gr.physical()
    else:
        om, wl, wg = match_poles(lo, gr)
        pl = PoleList("lesser", family, lo.i, lo.j, lo.spin, om, wl).physical()
        pg = PoleList("greater", family, gr.i, gr.j, gr.spin, om, wg).physical()
    fit = (fit_beta_mu if family == "greens" else fit_beta_density)(lo, gr, _fit_config(cfg))
    results["fit"] = fit.to_dict()
    files["ratio.csv"] = csv_text(["omega", "lesser_re", "lesser_im", "greater_re", "greater_im"],
                                  [om, pl.real, pl.imag, pg.real, pg.imag])


def run_mega(cfg, spectra, files, results):
    src = cfg["source"]
    params = spectra.params
    corr = cfg.get("correlator", {})
    family = corr.get("family", "greens")
    if src["type"] == "ramp":
        states = _ramp_states(cfg, params)
        results["ramp_steps"] = [s.meta.get("steps") for s in states]
    else:
        labels = _source_sectors(cfg, params.L)
        states = [eigenstate(spectra, lab, int(k)) for lab in labels
                  for k in np.nonzero((spectra[lab].energies >= src["emin"])
                                      & (spectra[lab].energies <= src["emax"]))[0]]
        if not states:
            raise DomainError(f"no eigenstates in [{src['emin']}, {src['emax']}]")
    res = mega_run(states, spectra, _fit_config(cfg), family=family,
                   site=corr.get("i", 0), spin=corr.get("spin", "up"))
    files["mega_history.json"] = res.to_json() + "\n"
    results["status"] = res.status
    results["iterations"] = len(res.history)
    results["final"] = res.history[-1]
    try:
        matched_gibbs(res.ensemble, spectra, results)
    except DomainError as err:
        results["matched_beta_error"] = str(err)


def _observable_spec(item):
    if isinstance(item, str):
        return item, item
    kw = {k: item[k] for k in ("site", "spin", "k") if k in item}
    name = item.get("name") or "_".join([item["kind"]] + [f"{k}{v}" for k, v in sorted(kw.items())])
    return name, (lambda basis, kind=item["kind"], kw=kw: build_observable(kind, basis, **kw))


def run_eth_scatter(cfg, spectra, files, results):
    specs = [_observable_spec(o) for o in cfg.get("observables", ["double_occupancy_avg"])]
    tab = eth_scatter(spectra, [s for _, s in specs], names=[n for n, _ in specs])
    files["eth_scatter.csv"] = tab.to_csv()
    results["rows"] = int(tab.energies.size)
    if cfg.get("spin_band"):
        top = spin_band_top(tab.energies, spectra.params.U)
        band = tab.energies <= top
        results["spin_band_top"] = top
        results["spin_band_violations"] = {n: monotonicity_violations(tab.energies[band], tab.values[band, k])
                                           for k, n in enumerate(tab.names)}


def run_trace_distance(cfg, spectra, files, results):
    state = build_source(cfg, spectra, results)
    ref = matched_gibbs(state, spectra, results)
    L = spectra.params.L
    sizes = sorted(cfg.get("subsystems", list(range(1, min(L, 6) + 1))))
    ds = []
    for s in sizes:
        if s == L:
            ds.append(state_trace_distance(state, ref, spectra))
        else:
            sub = SubsystemSpec(0, s)
            ds.append(trace_distance(reduced_density_matrix(state, spectra, sub),
                                     reduced_density_matrix(ref, spectra, sub)))
    files["trace_distance.csv"] = "subsystem_size,D\n" + "".join(f"{s},{_fmt(d)}\n" for s, d in zip(sizes, ds))
    results["full_distance"] = state_trace_distance(state, ref, spectra)


RUNNERS = {"spectrum": run_spectrum, "ldos": run_ldos, "greens": run_correlator,
           "density_corr": run_correlator, "gibbs_fit": run_gibbs_fit, "mega": run_mega,
           "eth_scatter": run_eth_scatter, "trace_distance": run_trace_distance}


def default_cache_dir() -> str:
    return os.environ.get("MEGA_SIM_CACHE") or os.path.join(os.path.expanduser("~"), ".cache", "mega_sim")


def execute(cfg, root, path, output=None, cache_dir=None, threads=1) -> dict:
    """Run one experiment and write its artifacts; returns the manifest."""
    t0 = time.perf_counter()
    _precheck_window(cfg, root, path)
    params = model_params(cfg)
    labels = plan_sectors(cfg)
    spectra, key, hit = cached_full_spectrum(params, labels, cache_dir, threads=threads)
    files: dict = {}
    results: dict = {}
    RUNNERS[cfg["experiment"]](cfg, spectra, files, results)
    out = output or cfg.get("output") or os.path.join("runs", os.path.splitext(os.path.basename(path))[0])
    os.makedirs(out, exist_ok=True)
    for name, text in files.items():
        with open(os.path.join(out, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    manifest = {
        "config": copy.deepcopy(cfg), "config_file": os.path.abspath(path),
        "code_version": __version__, "spectra_cache": key, "cache_hit": hit,
        "sectors": [list(l) for l in labels],
        "status": results.pop("status", "ok"), "results": results,
        "outputs": {n: hashlib.sha256(t.encode()).hexdigest() for n, t in sorted(files.items())},
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "wall_time_s": time.perf_counter() - t0,
    }
    manifest = _jsonable(manifest)
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mega-sim", description="Configuration-driven experiment runner.",
                                epilog=__doc__.split("\n\n", 1)[1].strip())
    p.add_argument("--version", action="version", version=f"mega-sim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", help="experiment config (YAML)")
    r.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for sector diagonalisation")
    r.add_argument("--cache-dir", default=None,
                   help="spectrum cache (default $MEGA_SIM_CACHE or ~/.cache/mega_sim)")
    r.add_argument("--output", default=None, help="output directory (overrides the config)")
    v = sub.add_parser("validate", help="check a config against the schema")
    v.add_argument("config")
    sub.add_parser("schema", help="print the config JSON schema")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "schema":
        print(json.dumps(SCHEMA, indent=1))
        return EXIT_OK
    try:
        cfg, root = load_config(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok")
            return EXIT_OK
        manifest = execute(cfg, root, args.config, args.output, args.cache_dir or default_cache_dir(),
                           max(1, args.threads))
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ResourceError as err:
        print(f"resource error: {err}", file=sys.stderr)
        return EXIT_RESOURCE
    except MegaError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"status": manifest["status"], "results": manifest["results"]}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
