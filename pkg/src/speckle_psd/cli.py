"""Command line pipeline: simulate, autocorrelate, invert, batch tools.

Frames are raw little-endian float32 with JSON headers; profiles and
distributions are two-column CSV with JSON sidecars.  Every command is
deterministic given its --seed.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autocorr import (
    AveragingPlan,
    autocorrelate,
    ensemble_average,
    load_profile,
    normalize_profile,
    save_profile,
    sliding_windows,
)
from .correction import CalibrationPair, CorrectionModel, fit_correction
from .forward import ForwardConfig, forward
from .inverse import EstimatorConfig, estimate, make_synthetic_dataset, timelapse
from .psd import load_psd, save_cumulative, save_psd
from .surface import OpticsConfig, load_frame, save_frame, simulate_frames


def _optics_from_args(args) -> OpticsConfig:
    return OpticsConfig.from_practical_units(
        lambda_nm=args.lambda_nm,
        f3_mm=args.f3_mm,
        D_mm=args.d_mm,
        object_samples=args.object_samples,
        extent_over_beam=args.extent_over_beam,
    )


def _add_optics_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda-nm", type=float, default=532.0)
    p.add_argument("--f3-mm", type=float, default=250.0)
    p.add_argument("--d-mm", type=float, default=4.8)
    p.add_argument("--object-samples", type=int, default=4096)
    p.add_argument("--extent-over-beam", type=float, default=8.0)


def cmd_simulate(args) -> int:
    cfg = _optics_from_args(args)
    psd = load_psd(args.psd)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for frame in simulate_frames(
        psd, cfg, args.frames, args.seed,
        fluctuation_fraction=args.fluctuation, texture_samples=args.texture,
    ):
        save_frame(frame, cfg, out / f"frame_{frame.frame_index:06d}.f32", seed=args.seed)
    print(f"wrote {args.frames} frames to {out}")
    return 0


def _optics_from_header(header: dict, n_samples: int) -> OpticsConfig:
    lam = header["wavelength_nm"] * 1e-3
    f3 = header["f3_mm"] * 1e3
    extent = lam * f3 / header["detector_pitch_um"]
    return OpticsConfig(
        wavelength_um=lam,
        focal_length_um=f3,
        beam_diameter_um=header["D_mm"] * 1e3,
        object_samples=n_samples,
        object_extent_um=extent,
    )


def cmd_autocorr(args) -> int:
    frame_paths = sorted(Path(args.frames).glob("*.f32"))
    if not frame_paths:
        print(f"no .f32 frames under {args.frames}", file=sys.stderr)
        return 1
    first, header = load_frame(frame_paths[0])
    cfg = _optics_from_header(header, first.intensity.size)

    def profiles():
        for path in frame_paths:
            frame, _ = load_frame(path)
            yield autocorrelate(frame, cfg, subtract_background=args.subtract_background)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.window <= 1 and args.step <= 1:
        averaged = [ensemble_average(profiles())]
    else:
        plan = AveragingPlan(window=args.window, step=args.step)
        averaged = list(sliding_windows(profiles(), plan))
    for i, prof in enumerate(averaged):
        if args.normalize:
            prof = normalize_profile(prof)
        save_profile(prof, out / f"profile_{i:04d}.csv", cfg, normalized=args.normalize)
    print(f"wrote {len(averaged)} averaged profiles to {out}")
    return 0


def cmd_forward(args) -> int:
    psd = load_psd(args.psd)
    spec = json.loads(Path(args.config).read_text())
    optics = OpticsConfig.from_practical_units(
        lambda_nm=spec.get("lambda_nm", 532.0),
        f3_mm=spec.get("f3_mm", 250.0),
        D_mm=spec.get("D_mm", 4.8),
    )
    u = np.linspace(0.0, spec["u_max_per_um"], int(spec["n_u_samples"]))
    prof = forward(psd, ForwardConfig(optics, u))
    save_profile(prof, args.out, optics, normalized=True)
    print(f"wrote forward profile to {args.out}")
    return 0


def cmd_fit_correction(args) -> int:
    pairs_dir = Path(args.pairs)
    calc_paths = sorted(pairs_dir.glob("calc_*.csv"))
    pairs = []
    for calc_path in calc_paths:
        meas_path = pairs_dir / calc_path.name.replace("calc_", "meas_")
        if meas_path.exists():
            pairs.append(CalibrationPair(load_profile(calc_path), load_profile(meas_path)))
    if len(pairs) < 4:
        print(f"found {len(pairs)} calc_/meas_ pairs under {pairs_dir}; need >= 4", file=sys.stderr)
        return 1
    model, loss = fit_correction(pairs, epochs=args.epochs, lr=args.lr)
    model.save(args.out)
    print(f"fitted correction model on {len(pairs)} pairs, final NPCC {loss:.4f} -> {args.out}")
    return 0


def cmd_estimate(args) -> int:
    measured = load_profile(args.profile)
    model = CorrectionModel.load(args.model) if args.model else None
    cfg = EstimatorConfig()
    result = estimate(measured, model, cfg)
    save_cumulative(result.cumulative, args.out)
    if args.psd_out:
        save_psd(result.psd, args.psd_out)
    status = "converged" if result.converged else "max-iters"
    print(f"estimate: loss {result.loss:.3e} after {result.iterations} iters ({status})")
    return 0


def cmd_dataset(args) -> int:
    model = CorrectionModel.load(args.model) if args.model else None
    ds = make_synthetic_dataset(args.n, model, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, entry in enumerate(ds.entries):
        save_psd(entry.psd, out / f"psd_{i:05d}.csv")
        save_profile(entry.profile, out / f"profile_{i:05d}.csv")
        manifest.append({"index": i, "seed": entry.seed})
    (out / "manifest.json").write_text(json.dumps({"n": args.n, "seed": args.seed, "entries": manifest}, indent=1))
    print(f"wrote {args.n} synthetic entries to {out}")
    return 0


def cmd_timelapse(args) -> int:
    paths = sorted(Path(args.profiles).glob("*.csv"))
    paths = [p for p in paths if not p.name.endswith(".json")]
    if not paths:
        print(f"no profile CSVs under {args.profiles}", file=sys.stderr)
        return 1
    model = CorrectionModel.load(args.model) if args.model else None
    stream = (load_profile(p) for p in paths)
    with open(args.out, "w", newline="") as f:
        f.write("frame_index,r_um,density\n")
        for index, _, psd in timelapse(stream, EstimatorConfig(), model):
            for r, d in zip(psd.grid.radii_um, psd.density):
                f.write(f"{index},{r:.6g},{d:.6g}\n")
    print(f"wrote PSD map for {len(paths)} profiles to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speckle-psd",
                                     description="speckle simulation and PSD estimation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate speckle frames for a PSD")
    p.add_argument("--psd", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--fluctuation", type=float, default=0.01)
    p.add_argument("--texture", type=int, default=1)
    _add_optics_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("autocorr", help="autocorrelate frames and average windows")
    p.add_argument("--frames", required=True)
    p.add_argument("--window", type=int, default=200)
    p.add_argument("--step", type=int, default=40)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--subtract-background", action="store_true")
    p.set_defaults(func=cmd_autocorr)

    p = sub.add_parser("forward", help="closed-form profile for a PSD")
    p.add_argument("--psd", required=True)
    p.add_argument("--config", required=True, help="JSON with lambda_nm, f3_mm, D_mm, n_u_samples, u_max_per_um")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("fit-correction", help="fit the correction model on calc/meas pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--lr", type=float, default=1e-2)
    p.set_defaults(func=cmd_fit_correction)

    p = sub.add_parser("estimate", help="invert a measured profile to a cumulative curve")
    p.add_argument("--profile", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--psd-out", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("dataset", help="generate a synthetic single-peak dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("timelapse", help="track a PSD through an ordered profile stream")
    p.add_argument("--profiles", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_timelapse)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
