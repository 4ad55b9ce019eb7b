"""Command-line pipeline: collect, synth, trigger, simulate, boa, repro."""
from __future__ import annotations

import argparse
import copy
import json
import sys
import time
import warnings
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import boa, experiment, synthesis, trigger
from .errors import (ConfigError, DegenerateRegion, EtcError, ExperimentDiverged, InternalInfeasible,
                     PreconditionError, RunawayEvents, SimulationDiverged, SynthesisInfeasible, UndefinedResult)
from .model import FunctionLibrary, GroundTruthSystem, RegionBox
from .simulate import SimConfig, min_inter_event, simulate, threshold_violation

EXIT_OK, EXIT_GENERIC, EXIT_EXPERIMENT, EXIT_SYNTHESIS, EXIT_SIMULATION, EXIT_CONFIG = 0, 1, 2, 3, 4, 64
PRESETS = ("poly_khalil", "inverted_pendulum")
METHODS = {"lin": synthesis.LINEARIZATION, "contr": synthesis.CONTRACTIVE,
           "linearization": synthesis.LINEARIZATION, "contractive": synthesis.CONTRACTIVE}
KINDS = {"state": trigger.ERROR_STATE, "library": trigger.ERROR_LIBRARY}

_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_pair = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
SCHEMA = {
    "type": "object",
    "properties": {
        "preset": {"enum": list(PRESETS)},
        "name": {"type": "string"},
        "output": {"type": "string"},
        "system": {
            "type": "object",
            "properties": {
                "A": _matrix, "B": _matrix, "physical": {"type": "object"},
                "library": {
                    "type": "object",
                    "properties": {"n": {"type": "integer", "minimum": 1}, "terms": {"type": "array"},
                                   "allow_linear_q": {"type": "boolean"}},
                    "required": ["n", "terms"],
                },
            },
            "required": ["A", "B", "library"],
        },
        "experiment": {
            "type": "object",
            "properties": {
                "duration": {"type": "number", "exclusiveMinimum": 0},
                "sample_period": {"type": "number", "exclusiveMinimum": 0},
                "input_range": {"type": "array"},
                "x0_range": {"type": "array"},
                "rng_seed": {"type": "integer", "minimum": 0},
                "integrator_step": {"type": ["number", "null"]},
            },
            "required": ["duration", "sample_period", "input_range", "x0_range"],
        },
        "synthesis": {
            "type": "object",
            "properties": {
                "method": {"enum": list(METHODS)},
                "Omega": {"anyOf": [_matrix, {"type": "null"}]},
                "region": {"type": "object", "properties": {
                    "lower": {"type": "array"}, "upper": {"type": "array"},
                    "resolution": {"type": "integer", "minimum": 2}}, "required": ["lower", "upper"]},
                "rq": {"type": "object", "properties": {"mode": {"enum": ["auto", "manual"]},
                                                        "gram": _matrix}, "required": ["mode"]},
            },
            "required": ["method", "region"],
        },
        "trigger": {
            "type": "object",
            "properties": {"kind": {"enum": list(KINDS)}, "eta": {"type": "number", "exclusiveMinimum": 0},
                           "sigma_cap": {"type": "number", "exclusiveMinimum": 0}},
        },
        "simulation": {
            "type": "object",
            "properties": {"x0": _matrix, "t_final": {"type": "number", "exclusiveMinimum": 0},
                           "integrator_step": {"type": "number", "exclusiveMinimum": 0},
                           "event_tol": {"type": "number", "exclusiveMinimum": 0},
                           "record_dt": {"type": "number", "exclusiveMinimum": 0}},
        },
        "boa": {"type": "object", "properties": {"gamma_hi": {"type": ["number", "null"]},
                                                 "plot_radius": {"type": "number"}}},
        "repro": {"type": "object", "properties": {"gas_samples": {"type": "integer", "minimum": 0},
                                                   "gas_box": _pair, "gas_t_final": {"type": "number"}}},
        "reference": {"type": "object"},
    },
    "required": ["system", "experiment", "synthesis"],
}


# -- configuration ----------------------------------------------------------------

def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("etcdata.presets").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def resolve_config(raw: dict) -> dict:
    """Merge a preset (if named) under the given keys and validate against the schema."""
    cfg = _merge(load_preset(raw["preset"]), raw) if "preset" in raw else copy.deepcopy(raw)
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from None
    return cfg


def read_config(path) -> dict:
    p = Path(path)
    if not p.exists() and p.stem in PRESETS:
        return resolve_config({"preset": p.stem})
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve_config(raw)


def build_system(cfg: dict) -> GroundTruthSystem:
    s = cfg["system"]
    try:
        lib = FunctionLibrary.from_config(s["library"], cfg.get("name", ""))
        return GroundTruthSystem(np.asarray(s["A"], float), np.asarray(s["B"], float), lib, cfg.get("name", ""))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"config field system: {exc}") from None


def experiment_config(cfg: dict, seed: int | None = None) -> experiment.ExperimentConfig:
    e = dict(cfg["experiment"])
    if seed is not None:
        e["rng_seed"] = seed
    try:
        return experiment.ExperimentConfig(
            e["duration"], e["sample_period"], tuple(map(tuple, np.atleast_2d(e["input_range"]).tolist())),
            tuple(map(tuple, np.atleast_2d(e["x0_range"]).tolist())), int(e.get("rng_seed", 0)),
            e.get("integrator_step"))
    except ValueError as exc:
        raise ConfigError(f"config field experiment: {exc}") from None


def region_of(cfg: dict) -> RegionBox:
    r = cfg["synthesis"]["region"]
    try:
        return RegionBox(np.asarray(r["lower"], float), np.asarray(r["upper"], float), int(r.get("resolution", 201)))
    except ValueError as exc:
        raise ConfigError(f"config field synthesis/region: {exc}") from None


def rq_of(cfg: dict, lib: FunctionLibrary, region: RegionBox) -> np.ndarray:
    rq = cfg["synthesis"].get("rq", {"mode": "auto"})
    if rq["mode"] == "auto":
        return synthesis.estimate_rq(lib, region)
    if "gram" not in rq:
        raise ConfigError("config field synthesis/rq: manual mode needs 'gram'")
    return synthesis.sqrt_psd(np.asarray(rq["gram"], float))


# -- stages -------------------------------------------------------------------------

def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def stage_collect(cfg: dict, out: Path, seed: int | None = None):
    sys_ = build_system(cfg)
    D = experiment.collect_data(sys_, experiment_config(cfg, seed))
    experiment.save_bundle(D, out / "data")
    return D


def stage_synth(cfg: dict, D, out: Path, method: str | None = None):
    sys_ = build_system(cfg)
    lib, region = sys_.library, region_of(cfg)
    method = METHODS[method or cfg["synthesis"]["method"]]
    Om = cfg["synthesis"].get("Omega")
    Om = None if Om is None else np.asarray(Om, float)
    rich = experiment.check_richness(D)
    if not rich["full_rank"]:
        raise PreconditionError("data not rich enough: [U0; Z0] lacks full row rank; try another seed")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if method == synthesis.CONTRACTIVE:
            ctrl = synthesis.design_contractive(D, Om, rq_of(cfg, lib, region), region, library=lib)
        else:
            ctrl = synthesis.design_linearization(D, Om, library=lib)
            ctrl.region = region
    report = synthesis.verify_closed_loop(ctrl, D, lib, region)
    report["min_singular_value"] = rich["singular_values"][D.m + D.s - 1]
    ctrl.save(out / "controller.json")
    _write_json(out / "synthesis_report.json", report)
    return ctrl, report


def stage_trigger(cfg: dict, ctrl, D, out: Path, kind: str | None = None):
    t = cfg.get("trigger", {})
    kind = KINDS[kind or t.get("kind", "state")]
    lib, region = build_system(cfg).library, region_of(cfg)
    cap = float(t.get("sigma_cap", 10.0))
    if kind == trigger.ERROR_STATE:
        pol = trigger.design_error_state(ctrl, D, cap, lib=lib, region=region)
    else:
        pol = trigger.design_error_library(ctrl, D, float(t.get("eta", 0.1)), cap, lib=lib, region=region)
    tag = "state" if kind == trigger.ERROR_STATE else "library"
    pol.save(out / f"policy_{tag}.json")
    return pol


def sim_configs(cfg: dict, x0s=None, t_final=None) -> list[SimConfig]:
    s = cfg.get("simulation", {})
    x0s = s.get("x0", []) if x0s is None else x0s
    return [SimConfig(tuple(x0), t_final or s.get("t_final", 10.0), s.get("integrator_step", 1e-3),
                      s.get("event_tol", 1e-12), record_dt=s.get("record_dt", 1e-2)) for x0 in x0s]


def _run_one(sys_, ctrl, pol, c):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return simulate(sys_, ctrl, pol, c)


def stage_simulate(cfg: dict, ctrl, pol, out: Path, x0s=None, t_final=None, tag=None) -> dict:
    sys_ = build_system(cfg)
    tag = tag or ("state" if pol.kind == trigger.ERROR_STATE else "library")
    d = out / "sim"
    d.mkdir(parents=True, exist_ok=True)
    runs = []
    for i, c in enumerate(sim_configs(cfg, x0s, t_final)):
        tr = _run_one(sys_, ctrl, pol, c)
        tr.to_csv(d / f"trace_{tag}_{i}.csv")
        ev = tr.events
        np.savetxt(d / f"intervals_{tag}_{i}.csv", np.column_stack([ev[:-1], np.diff(ev)]) if len(ev) > 1
                   else np.zeros((0, 2)), delimiter=",", header="t_k,inter_event", comments="", fmt="%.17g")
        s = tr.summary()
        try:
            s["min_inter_event"] = min_inter_event(tr)
            s["miet_bound_holds"] = bool(pol.tau is None or s["min_inter_event"] >= pol.tau)
            s["miet_ratio"] = None if pol.tau is None else s["min_inter_event"] / pol.tau
        except UndefinedResult:
            s["min_inter_event"], s["miet_bound_holds"], s["miet_ratio"] = None, True, None
        runs.append(s)
    mins = [r["min_inter_event"] for r in runs if r["min_inter_event"] is not None]
    summary = {"kind": pol.kind, "sigma": pol.sigma, "tau": pol.tau, "runs": runs,
               "min_inter_event": min(mins) if mins else None,
               "miet_bound_holds": all(r["miet_bound_holds"] for r in runs)}
    _write_json(d / f"summary_{tag}.json", summary)
    return summary


def stage_boa(cfg: dict, ctrl, D, pol, out: Path) -> dict:
    lib, region = build_system(cfg).library, region_of(cfg)
    b = cfg.get("boa", {})
    box_hi = boa.default_gamma_hi(ctrl.S, region)
    g_hi = b.get("gamma_hi") or box_hi
    X = boa.box(region)
    if pol.kind == trigger.ERROR_STATE:
        sets = {"V": boa.v_state(ctrl, lib), "W": boa.intersection(boa.v_state(ctrl, lib), X),
                "Z": boa.z_set(ctrl, D, lib)}
    else:
        V = boa.v_library(ctrl, lib, pol.eta)
        sets = {"V": V, "W": boa.intersection(V, X)}
    result = {"kind": pol.kind, "gamma_hi": g_hi, "S": ctrl.S.tolist(), "gamma": {},
              "box_in_V": bool(boa.set_inclusion_check(X, sets["V"], region, 101))}
    tag = "state" if pol.kind == trigger.ERROR_STATE else "library"
    for name, pred in sets.items():
        hi = min(g_hi, box_hi) if name == "W" else g_hi
        try:
            g = boa.largest_sublevel(ctrl.S, pred, hi)
        except DegenerateRegion:
            g = None
        result["gamma"][name] = g
        if g is not None and ctrl.n == 2:
            boa.write_polylines(out / "boa", ctrl.S, g, pred, float(b.get("plot_radius", 1.0)), f"{tag}_{name}")
    _write_json(out / "boa" / f"boa_{tag}.json", result)
    return result


# -- repro ---------------------------------------------------------------------------

def _fmt(v, p=4) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    return f"{v:.{p}g}"


def repro(cfg: dict, out: Path, seed: int | None = None) -> Path:
    """Full pipeline for one preset; writes artifacts and ``report.md`` under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    sys_ = build_system(cfg)
    ref = cfg.get("reference", {})
    try:
        D = stage_collect(cfg, out, seed)
    except ExperimentDiverged as exc:
        raise _Stage(EXIT_EXPERIMENT, "collect", exc) from exc
    try:
        ctrl, rep = stage_synth(cfg, D, out)
        pols = {k: stage_trigger(cfg, ctrl, D, out, k) for k in ("state", "library")}
    except (SynthesisInfeasible, PreconditionError, InternalInfeasible) as exc:
        raise _Stage(EXIT_SYNTHESIS, "synth/trigger", exc) from exc
    truth_G = np.abs(D.X1 @ ctrl.G - (sys_.A + sys_.B @ ctrl.K)).max()
    truth_L = np.abs(D.X1 @ ctrl.L - sys_.B @ ctrl.K).max()
    try:
        sims = {k: stage_simulate(cfg, ctrl, p, out) for k, p in pols.items()}
        gas = None
        rc = cfg.get("repro", {})
        if rc.get("gas_samples", 0):
            lo, hi = rc.get("gas_box", [-2, 2])
            x0s = np.random.default_rng(0 if seed is None else seed).uniform(lo, hi, (rc["gas_samples"], sys_.n))
            gas = stage_simulate(cfg, ctrl, pols["state"], out, x0s.tolist(), rc.get("gas_t_final"), "gas")
    except (SimulationDiverged, RunawayEvents) as exc:
        raise _Stage(EXIT_SIMULATION, "simulate", exc) from exc
    try:
        boas = {k: stage_boa(cfg, ctrl, D, p, out) for k, p in pols.items()}
    except EtcError as exc:
        raise _Stage(EXIT_GENERIC, "boa", exc) from exc

    ps, pl = pols["state"], pols["library"]
    L = [f"# Reproduction report: {cfg.get('name', 'custom')}", ""]
    L += ["Numbers depend on the random data realization; the reference column holds the preset reference values",
          "and only the order of magnitude (and the stated inequalities) is expected to agree.", ""]
    L += ["## Data", "", f"- samples T = {D.T}, seed = {D.meta.get('seed')}",
          f"- data hash `{experiment.data_hash(D)}`",
          f"- smallest singular value of [U0; Z0]: {_fmt(rep['min_singular_value'])}", ""]
    L += ["## Controller", "", f"- method: {ctrl.method}",
          f"- K = {np.array2string(ctrl.K.ravel(), precision=4, suppress_small=True)}"
          + (f" (reference {ref['K']})" if "K" in ref else ""),
          f"- S = {np.array2string(ctrl.S, precision=4, suppress_small=True).replace(chr(10), ' ')}"
          + (f" (reference {ref['S']})" if "S" in ref else ""),
          f"- beta = {_fmt(ctrl.beta)}; Theta = "
          f"{np.array2string(ctrl.Theta, precision=4, suppress_small=True).replace(chr(10), ' ')}"
          + (f" (reference {ref['Theta']})" if "Theta" in ref else ""),
          f"- max Re eig(X1 G1) = {_fmt(rep['max_real_eig_X1G1'])}; program residual = {_fmt(rep['program_residual'])}",
          f"- |X1 G - (A + BK)| = {_fmt(truth_G)}; |X1 L - BK| = {_fmt(truth_L)}", ""]
    L += ["## Triggering", "", "| policy | mu | sigma | tau | reference mu | reference sigma | reference tau |",
          "|---|---|---|---|---|---|---|"]
    for k, p in pols.items():
        r = ref.get(k, {})
        L.append(f"| {k} | {_fmt(p.mu)} | {_fmt(p.sigma)} | {_fmt(p.tau)} | {_fmt(r.get('mu'))} | "
                 f"{_fmt(r.get('sigma'))} | {_fmt(r.get('tau'))} |")
    ell, om = ps.constants["ell"], pl.constants["omega"]
    L += ["", f"- ell = {_fmt(ell)}, omega = {_fmt(om)}; ell >= omega: {_fmt(ell >= om)}", ""]
    L += ["## Simulation", "", "| policy | runs | min inter-event | tau | ratio | bound holds | max final abs(x) "
          "| reference observed min |", "|---|---|---|---|---|---|---|---|"]
    for k, s in sims.items():
        mie = s["min_inter_event"]
        fin = max(r["final_norm"] for r in s["runs"]) if s["runs"] else None
        L.append(f"| {k} | {len(s['runs'])} | {_fmt(mie)} | {_fmt(s['tau'])} | "
                 f"{_fmt(None if mie is None else mie / s['tau'])} | {_fmt(s['miet_bound_holds'])} | {_fmt(fin)} | "
                 f"{_fmt(ref.get(k, {}).get('observed_min'))} |")
    if gas is not None:
        conv = [r["final_norm"] < 1e-2 for r in gas["runs"]]
        L += ["", f"- global convergence evidence: {sum(conv)}/{len(conv)} random initial states in "
                  f"{rc.get('gas_box')}^{sys_.n} reach abs(x) < 1e-2 by t = {_fmt(rc.get('gas_t_final'))}"]
    L += ["", "## Basin of attraction", "", "| policy | set | gamma* | reference |", "|---|---|---|---|"]
    for k, b in boas.items():
        for name, g in b["gamma"].items():
            r = ref.get(k, {}).get("gamma") if (k, name) in (("state", "Z"), ("library", "V")) else None
            L.append(f"| {k} | {name} | {_fmt(g)} | {_fmt(r)} |")
    gz, gl = boas["state"]["gamma"].get("Z"), boas["library"]["gamma"].get("V")
    if gz and gl:
        L += ["", f"- error-library estimate / error-state estimate = {_fmt(gl / gz)} (< 1 expected)"]
    L.append("")
    (out / "report.md").write_text("\n".join(L))
    return out / "report.md"


class _Stage(Exception):
    def __init__(self, code, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.code = code


# -- entry point ---------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="etcdata", description="Data-driven event-triggered control pipeline")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("collect", "synth", "trigger", "simulate", "boa", "repro"):
        p = sub.add_parser(verb)
        p.add_argument("--config", help="JSON config file or preset name")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the experiment seed")
        if verb in ("synth",):
            p.add_argument("--method", choices=["lin", "contr"], default=None)
        if verb in ("trigger", "simulate", "boa"):
            p.add_argument("--trigger", choices=["state", "library"], default=None)
        if verb == "repro":
            p.add_argument("preset", nargs="?", choices=PRESETS)
    return ap


def _config_for(args) -> dict:
    if getattr(args, "preset", None):
        cfg = resolve_config({"preset": args.preset})
    elif args.config:
        cfg = read_config(args.config)
    else:
        raise ConfigError("--config is required")
    return cfg


def _load_data(out: Path):
    if not (out / "data" / "manifest.json").exists():
        raise ConfigError(f"no data bundle under {out / 'data'}; run 'collect' first")
    return experiment.load_bundle(out / "data")


def _load(out: Path, what: str, kind: str | None = None):
    path = out / ("controller.json" if what == "controller" else f"policy_{kind}.json")
    if not path.exists():
        raise ConfigError(f"missing {path}; run the earlier stage first")
    try:
        return synthesis.Controller.load(path) if what == "controller" else trigger.TriggerPolicy.load(path)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config_for(args)
        out = Path(args.out or cfg.get("output") or "out")
        out.mkdir(parents=True, exist_ok=True)
        v = args.verb
        if v == "collect":
            D = stage_collect(cfg, out, args.seed)
            print(f"wrote {out / 'data'} (T={D.T})")
        elif v == "synth":
            ctrl, rep = stage_synth(cfg, _load_data(out), out, args.method)
            print(f"K = {ctrl.K.ravel().tolist()}; max Re eig = {rep['max_real_eig_X1G1']:.4g}")
        elif v == "trigger":
            pol = stage_trigger(cfg, _load(out, "controller"), _load_data(out), out, args.trigger)
            print(f"{pol.kind}: mu = {pol.mu:.4g}, sigma = {pol.sigma:.4g}, tau = {pol.tau:.4g}")
        elif v == "simulate":
            kind = args.trigger or cfg.get("trigger", {}).get("kind", "state")
            s = stage_simulate(cfg, _load(out, "controller"), _load(out, "policy", kind), out)
            print(f"{len(s['runs'])} runs; min inter-event {s['min_inter_event']}; tau {s['tau']}")
        elif v == "boa":
            kind = args.trigger or cfg.get("trigger", {}).get("kind", "state")
            r = stage_boa(cfg, _load(out, "controller"), _load_data(out), _load(out, "policy", kind), out)
            print(json.dumps(r["gamma"]))
        elif v == "repro":
            t0 = time.perf_counter()
            path = repro(cfg, out, args.seed)
            print(f"wrote {path} in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
        return EXIT_OK
    except _Stage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentDiverged as exc:
        print(f"experiment error: {exc}", file=sys.stderr)
        return EXIT_EXPERIMENT
    except (SynthesisInfeasible, PreconditionError, InternalInfeasible) as exc:
        print(f"synthesis error: {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS
    except (SimulationDiverged, RunawayEvents) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except EtcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERIC


if __name__ == "__main__":
    sys.exit(main())
