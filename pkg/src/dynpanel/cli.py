"""Command-line front end.

Subcommands ``prepare``, ``fit``, ``simulate``, ``did`` and ``grid`` read an
optional JSON config, write CSV results plus a ``manifest.json`` into
``--out``, and exit with 0 on success, 2 on invalid data, 3 on estimation
failure, 4 on a bad config and 5 on simulation failure.

All randomness comes from ``--seed``; each module receives
``sha256("<seed>:<module>")`` truncated to 63 bits, so results do not depend
on the order in which modules draw.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .debias import fit
from .did import (
    EventStudySpec,
    aggregate_dynamic,
    csdid_att,
    event_study_fit,
    generate_step_panel,
    simultaneous_bands,
    write_att_csv,
)
from .errors import (
    ConfigError,
    DataError,
    DynPanelError,
    EstimationError,
    SimulationError,
)
from .fe import ESTIMATORS, RegressionSpec
from .panel import Schema, aggregate_districts, load_csv, load_districts
from .pipeline import (
    Columns,
    GridRow,
    SensitivityGrid,
    Variant,
    build_case_spec,
    build_death_spec,
    format_table,
    run_grid,
    stars,
)
from .sird import SynthPanelConfig, generate_synth_panel

EXIT_OK, EXIT_DATA, EXIT_ESTIMATION, EXIT_CONFIG, EXIT_SIMULATION, EXIT_OTHER = 0, 2, 3, 4, 5, 1


def module_seed(seed: int, module: str) -> int:
    """Seed for one module derived from the run seed."""
    digest = hashlib.sha256(f"{seed}:{module}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Record of one run: inputs with hashes, outputs with hashes, seed."""

    command: str
    config: str | None
    seed: int
    timestamp: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc)
                           .isoformat(timespec="seconds"))
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def add_input(self, path):
        self.inputs[str(path)] = _sha256(path)

    def add_output(self, path):
        self.outputs[str(path)] = _sha256(path)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# -- config helpers --------------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _config_call(what, fn, *args, **kw):
    """Call a constructor, turning argument errors into ConfigError."""
    try:
        return fn(*args, **kw)
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, DynPanelError):
            raise
        raise ConfigError(f"invalid {what}: {exc}") from None


def _resolve(base: Path | None, p) -> Path:
    p = Path(p)
    if base is not None and not p.is_absolute():
        return base / p
    return p


def _schema(d) -> Schema:
    d = dict(d or {})
    for k in ("values", "attrs"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return _config_call("schema", Schema, **d)


def load_data(cfg: dict, seed: int, manifest: RunManifest, base: Path | None):
    """Dataset named by the ``data`` section of a config.

    ``{"path": ..., "schema": {...}}`` reads a CSV; ``{"synthetic": {...}}``
    simulates a SIRD panel; ``{"step": {...}}`` builds an opening-step panel.
    """
    data = cfg.get("data")
    if data is None:
        raise ConfigError("config needs a 'data' section")
    if "path" in data:
        path = _resolve(base, data["path"])
        if not path.exists():
            raise ConfigError(f"data file not found: {path}")
        manifest.add_input(path)
        return load_csv(path, _schema(data.get("schema")))
    if "synthetic" in data:
        sc = _config_call("synthetic config", SynthPanelConfig.from_dict, data["synthetic"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return generate_synth_panel(sc, module_seed(seed, "sird"))[0]
    if "step" in data:
        return _config_call("step panel", generate_step_panel,
                            seed=module_seed(seed, "did-data"), **data["step"])
    raise ConfigError("data section needs one of 'path', 'synthetic' or 'step'")


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _spec_from_config(cfg: dict) -> RegressionSpec:
    if "spec" in cfg:
        return _config_call("spec", RegressionSpec.from_dict, cfg["spec"])
    b = dict(cfg.get("builder", {"kind": "case"}))
    kind = b.pop("kind", "case")
    variant = _config_call("variant", Variant, **b.pop("variant", {"id": "1",
                                                                    "description": "baseline"}))
    columns = _config_call("columns", Columns.from_dict, b.pop("columns", None))
    builder = {"case": build_case_spec, "death": build_death_spec}.get(kind)
    if builder is None:
        raise ConfigError(f"unknown builder kind {kind!r}")
    return _config_call("builder", builder, variant, columns=columns, **b)


# -- subcommands --------------------------------------------------------------------

def cmd_prepare(args, cfg, manifest, out: Path, base) -> None:
    if "panel" not in cfg:
        raise ConfigError("prepare needs a 'panel' path")
    panel_path = _resolve(base, cfg["panel"])
    if not panel_path.exists():
        raise ConfigError(f"panel file not found: {panel_path}")
    manifest.add_input(panel_path)
    ds = load_csv(panel_path, _schema(cfg.get("schema")))
    if "districts" in cfg:
        dpath = _resolve(base, cfg["districts"])
        if not dpath.exists():
            raise ConfigError(f"district file not found: {dpath}")
        manifest.add_input(dpath)
        agg = aggregate_districts(load_districts(dpath), ds.dates,
                                  cfg.get("drop_threshold", 0.5))
        ds = agg.merge_into(ds)
        rows = list(agg.report_rows())
        report = out / "district_report.csv"
        _write_rows(report, list(rows[0]) if rows else ["county"],
                    [list(r.values()) for r in rows])
        manifest.add_output(report)
        dropped = [r["county"] for r in rows if r["dropped_mode"] or r["dropped_mask"]]
        if dropped:
            print(f"dropped from mode/mask analysis: {', '.join(dropped)}")
    target = out / "panel.csv"
    ds.to_csv(target, cluster_attr=cfg.get("schema", {}).get("cluster"))
    manifest.add_output(target)
    print(f"wrote {target} ({ds.n_units} units x {ds.n_dates} dates)")


def cmd_fit(args, cfg, manifest, out: Path, base) -> None:
    ds = load_data(cfg, args.seed, manifest, base)
    spec = _spec_from_config(cfg)
    estimator = args.estimator or cfg.get("estimator", spec.estimator)
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}")
    spec = spec.with_estimator(estimator, rng_seed=module_seed(args.seed, "debias"),
                               jackknife=int(cfg.get("jackknife", spec.jackknife)))
    res = fit(ds, spec)
    ci = res.conf_int(0.95)
    rows = [(t, res.coefficients[k], res.se[k], res.t_stat[k], res.p_value[k], ci[k, 0],
             ci[k, 1], stars(res.p_value[k])) for k, t in enumerate(res.term_names)]
    target = out / "coefficients.csv"
    _write_rows(target, ["term", "estimate", "se", "t", "p_value", "ci_lo", "ci_hi", "stars"],
                rows)
    table = format_table({spec.name or estimator: res})
    (out / "coefficients.txt").write_text(
        table + f"\nobservations={res.nobs} clusters={res.n_clusters}\n")
    (out / "spec.json").write_text(spec.to_json() + "\n")
    for name in ("coefficients.csv", "coefficients.txt", "spec.json"):
        manifest.add_output(out / name)
    print(table)


def cmd_simulate(args, cfg, manifest, out: Path, base) -> None:
    sc = _config_call("synthetic config", SynthPanelConfig.from_dict, cfg.get("synthetic", {}))
    seed = module_seed(args.seed, "sird")
    ds, truth = generate_synth_panel(sc, seed)
    panel = out / "panel.csv"
    ds.to_csv(panel, cluster_attr="state")
    sidecar = out / "truth.json"
    sidecar.write_text(json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest.add_output(panel)
    manifest.add_output(sidecar)
    print(f"wrote {panel} and {sidecar}")


def cmd_did(args, cfg, manifest, out: Path, base) -> None:
    if "data" not in cfg:
        cfg = dict(cfg, data={"step": {}})
    ds = load_data(cfg, args.seed, manifest, base)
    if "event_study" not in cfg and "csdid" not in cfg:
        cfg = dict(cfg, event_study={"outcome": "y"}, csdid={"outcome": "y"})
    if "event_study" in cfg:
        spec = _config_call("event_study", EventStudySpec, **cfg["event_study"])
        es = event_study_fit(ds, spec)
        frame = es.to_frame()
        target = out / "event_study.csv"
        _write_rows(target, list(frame.columns), frame.itertuples(index=False))
        manifest.add_output(target)
        print(frame.to_string(index=False))
    if "csdid" in cfg:
        cs_cfg = dict(cfg["csdid"])
        B = int(cs_cfg.pop("B", 1000))
        level = float(cs_cfg.pop("level", 0.95))
        if "outcome" not in cs_cfg:
            raise ConfigError("csdid section needs an 'outcome'")
        result = csdid_att(ds, cs_cfg.pop("outcome"), cs_cfg.pop("start", "open_date"),
                           period=cs_cfg.pop("period", "week"),
                           on_missing=cs_cfg.pop("on_missing", "skip"))
        bands = simultaneous_bands(result.atts, level, B, module_seed(args.seed, "did"))
        target = out / "att.csv"
        write_att_csv(target, result, bands)
        dyn = aggregate_dynamic(result)
        dbands = simultaneous_bands(dyn, level, B, module_seed(args.seed, "did-dynamic"))
        dyn_path = out / "dynamic.csv"
        _write_rows(dyn_path, ["event_time", "att", "se", "band_lo", "band_hi"],
                    [(d.event_time, d.att, d.se, dbands.lo[k], dbands.hi[k])
                     for k, d in enumerate(dyn)])
        manifest.add_output(target)
        manifest.add_output(dyn_path)


def cmd_grid(args, cfg, manifest, out: Path, base) -> None:
    if "data" not in cfg:
        cfg = dict(cfg, data={"synthetic": DEFAULT_GRID_SYNTH})
    ds = load_data(cfg, args.seed, manifest, base)
    g = dict(cfg.get("grid", {}))
    if "columns" in g:
        g["columns"] = _config_call("columns", Columns.from_dict, g["columns"])
    if "variants" in g:
        g["variants"] = tuple(_config_call("variant", Variant, **v) for v in g["variants"])
    grid = _config_call("grid", SensitivityGrid, rng_seed=module_seed(args.seed, "debias"), **g)
    estimators = tuple(cfg.get("estimators", ("fe", "bc")))
    if args.estimator:
        estimators = (args.estimator,)
    rows = run_grid(ds, grid, estimators=estimators, level=float(cfg.get("level", 0.90)),
                    jobs=args.jobs)
    target = out / "grid.csv"
    _write_rows(target, GridRow.FIELDS, [r.as_tuple() for r in rows])
    manifest.add_output(target)
    n_failed = len({(r.variant, r.estimator) for r in rows if r.status == "failed"})
    print(f"wrote {target}: {len(rows)} rows, {n_failed} failed fits")


DEFAULT_GRID_SYNTH = {
    "n_units": 120,
    "n_states": 12,
    "days": 150,
    "policies": {"k12_visits": 0.05, "college_visits": 0.0, "mask_mandate": 0.0,
                 "ban_gathering": 0.0, "stay_home": 0.0},
    "episode_length": [21, 56],
    "covariates": ["restaurant_visits", "bar_visits", "recreation_visits", "church_visits",
                   "fulltime_visits", "parttime_visits", "home_share"],
}

COMMANDS = {"prepare": cmd_prepare, "fit": cmd_fit, "simulate": cmd_simulate,
            "did": cmd_did, "grid": cmd_grid}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynpanel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", default=None, help="JSON config file")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--estimator", choices=ESTIMATORS, default=None)
        s.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        base = Path(args.config).resolve().parent if args.config else None
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, args.config, args.seed)
        if args.config:
            manifest.add_input(args.config)
        COMMANDS[args.command](args, cfg, manifest, out, base)
        manifest.write(out)
        return EXIT_OK
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationError as exc:
        print(f"estimation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except DynPanelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
