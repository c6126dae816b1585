"""Command-line entry point: ``wdmqnet {plan,simulate,analyze,curves,keyrate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analytic
from .coincidence import (
    AnalysisConfig, CampaignError, NoLinkDetected, Run, campaign_metrics, cross_correlate,
    secure_key_rate, write_metrics, qber_from_fidelity,
)
from .config import ConfigError, RunConfig, load_config, parse_float_list, parse_int_list
from .eventsim import SimulationConfigError, simulate, simulate_pulsed
from .netplan import InsufficientChannelsError, MultiplexPlan, PlanError
from .quantum import AnalyzerSetting
from .timetags import TagFileError, TimeTagStream, UnsortedStreamError, read_csv, write_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHANNELS = 3
EXIT_PARSE = 4

log = logging.getLogger("wdmqnet")


def _run_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _out(cfg: RunConfig | None, args) -> Path:
    if args.out is not None:
        return Path(args.out)
    if cfg is not None:
        return cfg.output_dir
    return Path("out")


def cmd_plan(cfg: RunConfig, out: Path) -> MultiplexPlan:
    plan = cfg.plan()
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(plan.to_json() + "\n")
    table = plan.table(cfg.grid)
    (out / "plan.txt").write_text(table + "\n")
    print(table)
    return plan


def _settings_label(settings, users) -> str:
    return "".join(settings[u].label() for u in users)


def cmd_simulate(cfg: RunConfig, out: Path, seed: int, blind: bool) -> dict:
    plan = cfg.plan()
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(plan.to_json() + "\n")
    states = cfg.link_states(plan)
    gates = cfg.gates(plan)
    runs = []
    for k, settings in enumerate(cfg.settings):
        label = _settings_label(settings, plan.users)
        run_dir = out / f"run{k:02d}_{label}"
        run_dir.mkdir(exist_ok=True)
        rs = _run_seed(seed, k)
        if gates is None:
            res = simulate(plan, states, cfg.source, cfg.links, cfg.detectors, settings, cfg.duration, rs)
        else:
            res = simulate_pulsed(plan, states, cfg.source, cfg.links, cfg.detectors, settings, cfg.duration, rs, gates)
        files = {}
        for u in plan.users:
            f = run_dir / f"{u}.csv"
            write_csv(res[u], f, blind=blind)
            files[u] = str(f.relative_to(out))
        runs.append({
            "dir": run_dir.name,
            "label": label,
            "seed": rs,
            "settings": {u: settings[u].label() for u in plan.users},
            "files": files,
            "emitted_pairs": res.emitted_pairs,
        })
        log.info("run %s: %s", run_dir.name, {u: len(res[u]) for u in plan.users})
    manifest = {
        "seed": seed,
        "duration_s": cfg.duration,
        "blind": blind,
        "source": {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(cfg.source).items()},
        "detectors": {u: asdict(d) for u, d in cfg.detectors.items()},
        "links": {
            "transmittance": {str(c): t for c, t in cfg.links.transmittance.items()},
            "delay_s": {str(c): t for c, t in cfg.links.delay.items()},
            "default_transmittance": cfg.links.default_transmittance,
        },
        "state_fidelity": cfg.state_fidelity,
        "runs": runs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_runs(run_root: Path, plan: MultiplexPlan) -> list[Run]:
    """Read a directory described by ``manifest.json`` into analysis runs."""
    mpath = run_root / "manifest.json"
    if not mpath.exists():
        raise TagFileError(f"no manifest.json in {run_root}")
    manifest = json.loads(mpath.read_text())
    labels = [plan.topology.edge_name(e) for e in plan.edges()]
    runs = []
    for r in manifest["runs"]:
        settings = {u: AnalyzerSetting.parse(s) for u, s in r["settings"].items()}
        streams = {}
        for u, rel in r["files"].items():
            parsed = read_csv(run_root / rel, link_labels=labels)
            if len(parsed) > 1 or (parsed and u not in parsed):
                raise TagFileError(f"{rel}: expected tags of detector {u!r} only, found {sorted(parsed)}")
            streams[u] = parsed[u] if u in parsed else TimeTagStream.empty(u, labelled=False)
        missing = set(plan.users) - set(streams)
        if missing:
            raise TagFileError(f"run {r.get('dir')}: no tag file for {sorted(missing)}")
        runs.append(Run(settings, streams, float(r.get("duration_s", manifest["duration_s"]))))
    return runs


def cmd_analyze(cfg: AnalysisConfig, plan: MultiplexPlan, run_root: Path, out: Path) -> dict:
    runs = load_runs(run_root, plan)
    metrics = campaign_metrics(runs, plan, cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, out / "metrics.json", out / "metrics.csv")
    for e in plan.edges():
        a, b = plan.endpoints(e)
        hist = None
        for r in runs:
            h = cross_correlate(r.streams[a], r.streams[b], cfg)
            hist = h if hist is None else hist + h
        hist.to_csv(out / f"hist_{plan.topology.edge_name(e)}.csv")
    print(f"{'link':<16}{'delay_ps':>10}{'C':>9}{'V_HV':>8}{'V_DA':>8}{'F_raw':>8}{'F_corr':>8}{'QBER':>8}{'raw Hz':>9}{'sec Hz':>9}")
    for m in metrics.values():
        print(f"{m.edge:<16}{m.delay_ps:>10}{m.total_coincidences:>9}{m.v_hv:>8.3f}{m.v_da:>8.3f}"
              f"{m.fidelity_raw:>8.3f}{m.fidelity_corrected:>8.3f}{m.qber:>8.4f}{m.raw_key_rate_hz:>9.2f}"
              f"{m.secure_key_rate_hz:>9.2f}")
    return metrics


def cmd_curves(curves: dict, out: Path) -> list[Path]:
    n_list = parse_int_list(curves.get("n_users", "2-9"))
    taus = [t * 1e-12 for t in parse_float_list(curves.get("coincidence_windows_ps", "1000, 100"))]
    P = float(curves.get("pair_rate_hz", 1.7e6))
    D = float(curves.get("dark_rate_hz", 500.0))
    if "eta" in curves:
        etas = sorted(parse_float_list(curves["eta"]))
    else:
        etas = analytic.default_eta_grid(
            int(curves.get("points", 121)),
            float(curves.get("loss_min_db", 0.0)),
            float(curves.get("loss_max_db", 60.0)),
        )
    m = int(curves["detector_split"]) if "detector_split" in curves else None
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for tau in taus:
        for n in n_list:
            pts = analytic.fidelity_curve(n, tau, P, D, etas, m=m if m is None else min(m, n - 1))
            f = out / f"curve_N{n}_tau{round(tau * 1e12)}ps.csv"
            analytic.write_curve_csv(pts, f)
            written.append(f)
    print(f"wrote {len(written)} curve files to {out}")
    return written


def cmd_keyrate(raw: float, qber: float | None, fidelity: float | None, ec_efficiency: float) -> float:
    if qber is None:
        if fidelity is None:
            raise ConfigError("keyrate needs a QBER or a fidelity")
        qber = qber_from_fidelity(fidelity)
    rate = secure_key_rate(raw, qber, ec_efficiency)
    print(f"raw {raw:g} Hz  QBER {qber:.4f}  ->  secure {rate:.4g} Hz")
    return rate


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", default=argparse.SUPPRESS, help="run configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides config)")
    common.add_argument("--out", "-o", default=argparse.SUPPRESS, help="output directory (overrides config)")
    common.add_argument("--blind", action="store_true", default=argparse.SUPPRESS,
                        help="omit ground-truth origin labels from tag files")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="wdmqnet", parents=[common],
                                description="Plan, simulate and analyse wavelength-multiplexed entanglement networks.")
    sub = p.add_subparsers(dest="cmd", required=True)
    sub.add_parser("plan", parents=[common], help="allocate channel pairs to links")
    sub.add_parser("simulate", parents=[common], help="generate time-tag files for every configured run")
    a = sub.add_parser("analyze", parents=[common], help="compute link metrics from tag files")
    a.add_argument("runs", nargs="?", help="directory with manifest.json (default: output directory)")
    sub.add_parser("curves", parents=[common], help="write fidelity/QBER vs efficiency curves")
    k = sub.add_parser("keyrate", parents=[common], help="asymptotic secure key rate")
    k.add_argument("--raw-hz", type=float)
    k.add_argument("--qber", type=float)
    k.add_argument("--fidelity", type=float)
    k.add_argument("--ec-efficiency", type=float)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("blind", False), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else None
        if args.cmd == "plan":
            _need(cfg)
            cmd_plan(cfg, _out(cfg, args))
        elif args.cmd == "simulate":
            _need(cfg)
            seed = args.seed if args.seed is not None else cfg.seed
            if seed is None:
                raise ConfigError("simulate needs a seed (--seed or [run] seed)")
            cmd_simulate(cfg, _out(cfg, args), seed, args.blind or cfg.blind)
        elif args.cmd == "analyze":
            _need(cfg)
            out = _out(cfg, args)
            run_root = Path(args.runs) if args.runs else out
            cmd_analyze(cfg.analysis, cfg.plan(), run_root, out)
        elif args.cmd == "curves":
            cmd_curves(cfg.curves if cfg else {}, _out(cfg, args))
        elif args.cmd == "keyrate":
            kr = cfg.keyrate if cfg else {}
            raw = args.raw_hz if args.raw_hz is not None else kr.get("raw_rate_hz")
            if raw is None:
                raise ConfigError("keyrate needs --raw-hz or [keyrate] raw_rate_hz")
            qber = args.qber if args.qber is not None else (float(kr["qber"]) if "qber" in kr else None)
            fid = args.fidelity if args.fidelity is not None else (float(kr["fidelity"]) if "fidelity" in kr else None)
            ec = args.ec_efficiency if args.ec_efficiency is not None else float(kr.get("ec_efficiency", 1.0))
            cmd_keyrate(float(raw), qber, fid, ec)
    except InsufficientChannelsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHANNELS
    except (TagFileError, UnsortedStreamError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, PlanError, SimulationConfigError, CampaignError, NoLinkDetected, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _need(cfg):
    if cfg is None:
        raise ConfigError("this command needs --config")


if __name__ == "__main__":
    sys.exit(main())
