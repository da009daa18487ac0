"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 synchronization failure,
4 association infeasible.  The worker count for back-projection comes from
``--workers`` or the ``COHISAC_WORKERS`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_SYNC, EXIT_ASSOC = 0, 2, 3, 4

log = logging.getLogger("cohisac")


def _front(cfg):
    from .channel import delay_window, estimate_cir, synthesize_channel
    from .clocks import sample_clocks
    from .pipeline import max_range

    sc, pc = cfg.scenario, cfg.pipeline
    clocks = sample_clocks(sc.clock_params, sc.waveform.slow_time_count, len(sc.devices))
    window = delay_window(sc, max_range(sc, pc.aoi(sc), pc.range_margin), pc.oversample)
    return estimate_cir(synthesize_channel(sc, clocks), pc.oversample, window)


def cmd_simulate(cfg, args):
    cir = _front(cfg)
    cir.dump(args.out)
    log.info("wrote CIR %s to %s", cir.values.shape, args.out)
    return EXIT_OK


def cmd_sync_report(cfg, args):
    from .sync import estimate_sync, write_sync_report

    cir = _front(cfg)
    sync = estimate_sync(cir, cfg.scenario, first_peak=cfg.pipeline.first_peak)
    write_sync_report(args.out, sync)
    log.info("wrote sync report for %d pairs to %s", len(sync.los_tof), args.out)
    return EXIT_OK


def cmd_image(cfg, args):
    from .imaging import ComplexImage, backproject_pair, combined_image, render_png, save_image
    from .sync import compensate, estimate_sync

    sc, pc = cfg.scenario, cfg.pipeline
    cir = _front(cfg)
    dcir = compensate(cir, estimate_sync(cir, sc, first_peak=pc.first_peak),
                      remove_los=pc.remove_los and sc.include_los)
    grid = pc.aoi(sc).grid(pc.pixel_size)
    bp = pc.bp(sc)
    if args.pair:
        stack = backproject_pair(dcir, sc.devices, tuple(args.pair), grid, cfg=bp)
    else:
        stack = combined_image(dcir, sc.devices, grid, cfg=bp)
    if args.k is not None:
        img = ComplexImage(grid, stack.values[args.k], dict(stack.meta, k=args.k))
    else:
        img = ComplexImage(grid, np.abs(stack.values).sum(axis=0), dict(stack.meta, integration="magnitude"))
    save_image(args.out, img, with_complex=args.k is not None)
    if args.png:
        render_png(args.png, img.values)
    return EXIT_OK


def cmd_saf(cfg, args):
    from .imaging import PixelGrid, compute_saf, render_png, save_image, ComplexImage

    sc, pc = cfg.scenario, cfg.pipeline
    ref = np.asarray(args.point if args.point else sc.focus, dtype=float)
    grid = PixelGrid.centered(ref, args.half_x, args.half_y, args.pixel)
    saf = compute_saf(sc.devices, sc.waveform, grid, ref, focus=sc.focus,
                      oversample=pc.oversample, interp=pc.interp)
    extra = {"rho_x_m": saf.mainlobe_rho_x, "rho_y_m": saf.mainlobe_rho_y}
    save_image(args.out, ComplexImage(grid, saf.values, {"kind": "saf"}), extra=extra)
    if args.png:
        render_png(args.png, saf.values)
    print(json.dumps(extra))
    return EXIT_OK


def cmd_pipeline(cfg, args):
    from .association import write_association_csv
    from .detection import write_spectra_csv
    from .imaging import render_png, save_image
    from .pipeline import front_end, report_dict, run_dpc, run_isafs, run_smi, evaluate

    sc, pc = cfg.scenario, cfg.pipeline
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fe = front_end(sc, pc)
    runners = {"dpc": run_dpc, "smi": run_smi, "isafs": run_isafs}
    reports = {}
    for m in pc.methods:
        rep = runners[m](fe)
        if sc.targets:
            rep.metrics = evaluate(rep, sc.targets)
        rep.metrics["small_cfo_ok"] = fe.cfo_ok
        reports[m] = rep
    write_spectra_csv(out / "doppler_spectra.csv", fe.spectra)
    dpc = reports.get("dpc")
    if dpc is not None:
        for q, img in dpc.images.items():
            save_image(out / f"target_{q}.f32", img, with_complex=True)
            if args.png:
                render_png(out / f"target_{q}.png", img.values)
        if dpc.association is not None:
            write_association_csv(out / "association.csv", dpc.association)
    report = report_dict(reports, sc, pc)
    (out / "report.json").write_text(json.dumps(report, indent=2, default=str))
    print(json.dumps({m: r["metrics"] for m, r in report["methods"].items()}, default=str))
    if dpc is not None and dpc.failed_stage == "association":
        log.error("association failed: %s", dpc.error)
        return EXIT_ASSOC
    return EXIT_OK


def cmd_montecarlo(cfg, args):
    from dataclasses import replace

    from .pipeline import monte_carlo, summarize, swap_rate

    spec = cfg.montecarlo
    if args.trials is not None:
        spec = replace(spec, trials=args.trials)
    if args.snr is not None:
        spec = replace(spec, snr_db=tuple(args.snr))
    pc = cfg.pipeline if cfg.source.get("grid", {}).get("aoi_center_m") else replace(
        cfg.pipeline, aoi_center=spec.x1)

    def progress(snr, trial, rows):
        log.info("snr %+.1f dB trial %d: %s", snr, trial,
                 ", ".join(f"{r['method']}={r['loc_rmse_m'] * 100:.2f}cm" for r in rows))

    rows = monte_carlo(spec, pc, csv_path=args.out, progress=progress)
    summary = {m: {**summarize(rows, m), **({"swap_rate": swap_rate(rows, m)} if m == "dpc" else {})}
               for m in pc.methods}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_render(args):
    from .imaging import load_image, render_png

    mag, _ = load_image(args.image)
    render_png(args.out, mag, floor_db=args.floor_db)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cohisac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="scenario config (JSON)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--workers", type=int, default=None, help="back-projection threads")
        return sp

    sp = with_config("simulate", "synthesize and estimate the CIR, dump it")
    sp.add_argument("--out", required=True)
    sp = with_config("sync-report", "per-pair LOS delay/phase CSV")
    sp.add_argument("--out", required=True)
    sp = with_config("image", "multistatic (or one pair's) image on the AoI grid")
    sp.add_argument("--out", required=True)
    sp.add_argument("--pair", type=int, nargs=2, metavar=("TX", "RX"))
    sp.add_argument("--k", type=int, default=None, help="single slow-time slice (default: magnitude sum)")
    sp.add_argument("--png")
    sp = with_config("saf", "spatial ambiguity function and its mainlobe widths")
    sp.add_argument("--out", required=True)
    sp.add_argument("--point", type=float, nargs=2)
    sp.add_argument("--half-x", type=float, default=0.05)
    sp.add_argument("--half-y", type=float, default=0.3)
    sp.add_argument("--pixel", type=float, default=0.001)
    sp.add_argument("--png")
    sp = with_config("pipeline", "full processing plus baselines on one scenario")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--png", action="store_true")
    sp = with_config("montecarlo", "randomized two-target trials, CSV output")
    sp.add_argument("--out", required=True)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--snr", type=float, nargs="+")
    sp = sub.add_parser("render", help="float32 image -> PNG")
    sp.add_argument("image")
    sp.add_argument("--out", required=True)
    sp.add_argument("--floor-db", type=float, default=-40.0)
    return p


COMMANDS = {"simulate": cmd_simulate, "sync-report": cmd_sync_report, "image": cmd_image,
            "saf": cmd_saf, "pipeline": cmd_pipeline, "montecarlo": cmd_montecarlo}


def main(argv=None) -> int:
    from .association import AssociationInfeasible
    from .config import ConfigError, load_config
    from .pipeline import StageError
    from .sync import SyncFailure

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "render":
        return cmd_render(args)
    if args.workers is not None:
        os.environ["COHISAC_WORKERS"] = str(args.workers)
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (SyncFailure, StageError) as exc:
        if isinstance(exc, StageError) and not isinstance(exc.cause, SyncFailure):
            raise
        log.error("synchronization failed: %s", exc)
        return EXIT_SYNC
    except AssociationInfeasible as exc:
        log.error("association infeasible: %s", exc)
        return EXIT_ASSOC


if __name__ == "__main__":
    sys.exit(main())
