"""Command-line surface: fit, predict, ablate, noise-sweep, bench, synth,
export-belief-map.

Exit codes: 0 success, 1 internal error, 2 usage or I/O problem. The
FPFUSE_THREADS environment variable caps worker parallelism (the current
implementation is single-threaded, which satisfies any cap of at least 1).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import pipeline as pl
from .datamodel import (Bounds, SynthSpec, load_radio_map, save_radio_map,
                        synth_radio_map)
from .fuse import write_belief_csv, write_belief_pgm

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


def max_threads(default: int = 1) -> int:
    raw = os.environ.get("FPFUSE_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return default


class UsageError(ValueError):
    pass


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _config_overrides(args) -> dict:
    if getattr(args, "config", None):
        return _load_json(args.config)
    return {}


def _synth_spec_from(overrides: dict, seed) -> SynthSpec:
    kwargs = dict(overrides.get("synth", {}))
    if "bounds" in kwargs:
        kwargs["bounds"] = Bounds(*kwargs["bounds"])
    if seed is not None:
        kwargs["seed"] = seed
    return SynthSpec(**kwargs)


def _ingest(args, overrides: dict):
    if getattr(args, "data", None):
        path = Path(args.data)
        if not path.is_file():
            raise UsageError(f"stage 'ingest': dataset {path} is not readable")
        try:
            return load_radio_map(path)
        except OSError as exc:
            raise UsageError(f"stage 'ingest': {exc}") from exc
    return synth_radio_map(_synth_spec_from(overrides, args.seed))


def _filter_spec(overrides: dict) -> ev.FilterSpec:
    return ev.FilterSpec(**overrides.get("filter", {}))


def _noise_specs(overrides: dict) -> tuple:
    specs = overrides.get("noise")
    if not specs:
        return (ev.NoiseSpec(),)
    return tuple(ev.NoiseSpec(**s) for s in specs)


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    overrides = _config_overrides(args)
    spec = _synth_spec_from(overrides, args.seed)
    rmap = synth_radio_map(spec)
    out = _out_dir(args) / (args.name or f"synth_{spec.seed}.csv")
    save_radio_map(rmap, out)
    print(f"wrote {out} ({rmap.n_samples} samples, d={rmap.d})")
    return EXIT_OK


def cmd_fit(args) -> int:
    overrides = _config_overrides(args)
    data = _ingest(args, overrides)
    pcfg_kwargs = dict(overrides.get("pipeline", {}))
    if "filter" in pcfg_kwargs:
        pcfg_kwargs["filter"] = ev.FilterSpec(**pcfg_kwargs["filter"])
    if pcfg_kwargs.get("grids"):
        grids = pcfg_kwargs["grids"]
        pcfg_kwargs["grids"] = ev.SearchGrids(
            **{key: tuple(v) for key, v in grids.items()})
    for key in ("ratios", "alpha_grid"):
        if key in pcfg_kwargs:
            pcfg_kwargs[key] = tuple(pcfg_kwargs[key])
    if args.seed is not None:
        pcfg_kwargs["seed"] = args.seed
    cfg = pl.PipelineConfig(**pcfg_kwargs)
    artifact = pl.fit_pipeline(data, cfg)
    out = _out_dir(args) / (args.name or "artifact.json")
    pl.save_artifact(artifact, out)
    print(f"wrote {out}")
    return EXIT_OK


def _parse_scan(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(";", ",").split(",")])
    except ValueError as exc:
        raise UsageError(f"bad --scan vector: {exc}") from exc


def cmd_predict(args) -> int:
    artifact = pl.load_artifact(args.artifact)
    session = pl.PredictorSession(artifact)
    scans = []
    if args.scan:
        scans.append(_parse_scan(args.scan))
    if args.scans:
        with open(args.scans) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    scans.append(_parse_scan(line))
    if not scans:
        raise UsageError("predict needs --scan or --scans")
    for i, scan in enumerate(scans):
        if not args.stream and i > 0:
            session = pl.PredictorSession(artifact)
        res = session.predict(scan, fusion_mode=args.fusion,
                              convex_lambda=args.convex_lambda,
                              keep_bba=bool(args.belief_map))
        print(json.dumps({"x": res.position.x, "y": res.position.y,
                          "confidence": res.fused_confidence}))
        if args.belief_map:
            bba = res.bba
            if bba is None:  # non-DST fusion still exports the DST map
                res = pl.PredictorSession(artifact).predict(
                    scan, fusion_mode="dst", keep_bba=True)
                bba = res.bba
            write_belief_pgm(bba, artifact.grid, args.belief_map)
            write_belief_csv(bba, artifact.grid,
                             str(args.belief_map) + ".csv")
    return EXIT_OK


def _write_report(report: ev.EvalReport, out: Path, stem: str) -> None:
    with open(out / f"{stem}.json", "w") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=1)
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(report.csv_rows())


def _ablation_config(args, overrides: dict, noise) -> ev.AblationConfig:
    kwargs = dict(overrides.get("ablation", {}))
    kwargs["filter"] = _filter_spec(overrides)
    kwargs["noise"] = noise
    if "ratios" in kwargs:
        kwargs["ratios"] = tuple(kwargs["ratios"])
    if "alpha_grid" in kwargs:
        kwargs["alpha_grid"] = tuple(kwargs["alpha_grid"])
    if args.seed is not None:
        kwargs["base_seed"] = args.seed
    if getattr(args, "splits", None):
        kwargs["n_splits"] = args.splits
    return ev.AblationConfig(**kwargs)


def cmd_ablate(args) -> int:
    overrides = _config_overrides(args)
    data = _ingest(args, overrides)
    cfg = _ablation_config(args, overrides, _noise_specs(overrides))
    report = ev.run_ablation_ladder(data, cfg)
    out = _out_dir(args)
    _write_report(report, out, "ablation")
    for v in report.variants:
        means = {c: round(report.mean_rmse(v, c), 4) for c in report.conditions}
        print(f"{v}: {means}")
    return EXIT_OK


def cmd_noise_sweep(args) -> int:
    overrides = _config_overrides(args)
    data = _ingest(args, overrides)
    specs = overrides.get("noise")
    if specs:
        noise = tuple(ev.NoiseSpec(**s) for s in specs)
    else:
        noise = tuple(
            [ev.NoiseSpec("gauss_jitter", eta=e, seed=123)
             for e in (0.05, 0.10, 0.20)]
            + [ev.NoiseSpec("bursty", p=p, kappa=k, seed=123)
               for p in (0.02, 0.05) for k in (2.0, 3.0)]
            + [ev.NoiseSpec("dbm_10pct", level=0.10, seed=123)])
    cfg = _ablation_config(args, overrides, noise)
    report = ev.run_ablation_ladder(data, cfg)
    _write_report(report, _out_dir(args), "noise_sweep")
    print(f"{len(report.variants)} variants x {len(report.conditions)} conditions")
    return EXIT_OK


def cmd_bench(args) -> int:
    artifact = pl.load_artifact(args.artifact)
    report = pl.bench_pipeline(artifact, n_queries=args.queries,
                               seed=args.seed or 0)
    out = _out_dir(args) / "bench.json"
    with open(out, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    for stage, ns in report["stages_ns"].items():
        print(f"{stage}: {ns / 1e3:.1f} us median")
    print(f"pf/kf ratio: {report['pf_vs_kf_ratio']:.1f}")
    for name, slope in report["scaling"].items():
        print(f"slope[{name}]: {slope:.3f}")
    return EXIT_OK


def cmd_export_belief_map(args) -> int:
    artifact = pl.load_artifact(args.artifact)
    scan = _parse_scan(args.scan)
    out = _out_dir(args)
    pgm = out / (args.name or "belief.pgm")
    cell, pos = pl.export_belief_map(artifact, scan, pgm,
                                     csv_path=str(pgm) + ".csv")
    print(json.dumps({"pgm": str(pgm), "argmax_cell": cell,
                      "x": pos.x, "y": pos.y}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fpfuse",
        description="Hybrid Wi-Fi/BLE fingerprint localization pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data_source=False):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", help="JSON file with config overrides")
        sp.add_argument("--out", help="output directory (default: cwd)")
        if data_source:
            sp.add_argument("--data", help="survey CSV path")

    sp = sub.add_parser("synth", help="generate a synthetic survey CSV")
    common(sp)
    sp.add_argument("--name", help="output file name")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("fit", help="calibrate a pipeline artifact")
    common(sp, data_source=True)
    sp.add_argument("--name", help="artifact file name")
    sp.set_defaults(fn=cmd_fit)

    sp = sub.add_parser("predict", help="locate one or more raw scans")
    common(sp)
    sp.add_argument("--artifact", required=True)
    sp.add_argument("--scan", help="comma-separated raw dBm vector; "
                    "use the --scan=-60,-55,... form (leading dash)")
    sp.add_argument("--scans", help="file with one scan per line")
    sp.add_argument("--stream", action="store_true",
                    help="keep filter state across scans")
    sp.add_argument("--fusion", choices=pl.FUSION_MODES, default=None)
    sp.add_argument("--lambda", dest="convex_lambda", type=float, default=None)
    sp.add_argument("--belief-map", help="write the fused belief map (PGM)")
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("ablate", help="run the four-variant ablation ladder")
    common(sp, data_source=True)
    sp.add_argument("--splits", type=int, default=None)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("noise-sweep", help="sweep the noise grids")
    common(sp, data_source=True)
    sp.add_argument("--splits", type=int, default=None)
    sp.set_defaults(fn=cmd_noise_sweep)

    sp = sub.add_parser("bench", help="latency benchmark and scaling slopes")
    common(sp)
    sp.add_argument("--artifact", required=True)
    sp.add_argument("--queries", type=int, default=50)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("export-belief-map", help="belief map for one scan")
    common(sp)
    sp.add_argument("--artifact", required=True)
    sp.add_argument("--scan", required=True)
    sp.add_argument("--name")
    sp.set_defaults(fn=cmd_export_belief_map)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pl.StageError as exc:
        cause = exc.cause
        code = EXIT_USAGE if isinstance(cause, OSError) else EXIT_INTERNAL
        print(f"error: {exc}", file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
