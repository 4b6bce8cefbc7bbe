"""Command line entry point: ``mixavg run`` and ``mixavg presets``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from importlib import resources

from . import __version__, seeding
from .config import load_config, parse_config_text
from .errors import MixavgError
from .experiments import RUNNERS, jsonable

SPLITTER = "splitmix64 fold of (master_seed, *keys) seeding numpy PCG64"


def preset_dir():
    return resources.files("mixavg") / "presets"


def list_presets() -> dict:
    """Preset name -> (anchor comment, text)."""
    out = {}
    for entry in sorted(preset_dir().iterdir(), key=lambda p: p.name):
        if not entry.name.endswith(".cfg"):
            continue
        text = entry.read_text()
        anchor = next((ln.split(":", 1)[1].strip() for ln in text.splitlines()
                       if ln.lower().startswith("# anchor:")), "")
        out[entry.name[:-4]] = (anchor, text)
    return out


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def run_config(cfg, out, threads=1, log=print) -> int:
    """Run every requested experiment; returns the exit code."""
    os.makedirs(out, exist_ok=True)
    names = list(RUNNERS) if cfg.experiment == "all" else [cfg.experiment]
    stage_seeds = {n: seeding.mix(cfg.seed, n) for n in names}
    manifest = {
        "config_hash": cfg.config_hash(),
        "config_source": os.path.basename(cfg.source),
        "version": __version__,
        "seed": cfg.seed,
        "seed_splitting": SPLITTER,
        "stage_seeds": stage_seeds,
        "experiments": names,
        "status": "running",
        "verdicts": {},
        "wall_time_s": {},
    }
    mpath = os.path.join(out, "manifest.json")
    _write_json(mpath, manifest)
    failed = False
    for name in names:
        sub = os.path.join(out, name) if len(names) > 1 else out
        os.makedirs(sub, exist_ok=True)
        t0 = time.perf_counter()
        try:
            report = RUNNERS[name](cfg, stage_seeds[name], sub, threads)
        except MixavgError as exc:
            manifest["status"] = "error"
            manifest["error"] = f"{name}: {type(exc).__name__}: {exc}"
            _write_json(mpath, manifest)
            raise
        manifest["wall_time_s"][name] = round(time.perf_counter() - t0, 3)
        report.update({"experiment": name, "config_hash": manifest["config_hash"], "seed": stage_seeds[name]})
        _write_json(os.path.join(sub, f"report_{name}.json"), report)
        manifest["verdicts"][name] = {v["name"]: v["passed"] for v in report["verdicts"]}
        for v in report["verdicts"]:
            log(f"[{'PASS' if v['passed'] else 'FAIL'}] {name}.{v['name']}: {v['value']} {v['comparison']} {v['threshold']}")
            failed |= not v["passed"]
        _write_json(mpath, manifest)
    manifest["status"] = "verdict_failed" if failed else "passed"
    _write_json(mpath, manifest)
    return 2 if failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="mixavg", description="Averaging experiments for mixing sequences and networks.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiments named in a config")
    r.add_argument("config", nargs="?", help="path to a .cfg file")
    r.add_argument("--preset", help="bundled preset name (see `mixavg presets`)")
    r.add_argument("--out", help="output directory (overrides [run] output)")
    r.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    r.add_argument("--threads", type=int, default=1)
    sub.add_parser("presets", help="list bundled presets")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        for name, (anchor, _) in list_presets().items():
            print(f"{name:12s} {anchor}")
        return 0
    try:
        if bool(args.config) == bool(args.preset):
            raise MixavgError("give exactly one of a config path or --preset")
        if args.preset:
            presets = list_presets()
            if args.preset not in presets:
                raise MixavgError(f"unknown preset {args.preset!r}; available: {', '.join(presets)}")
            cfg = parse_config_text(presets[args.preset][1], f"{args.preset}.cfg")
        else:
            cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        out = args.out or cfg.output or os.path.join("runs", f"{cfg.experiment}_{cfg.config_hash()}")
        return run_config(cfg, out, max(1, args.threads))
    except (MixavgError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
