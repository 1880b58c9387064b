"""Command-line entry point: ``cellrecon {simulate,train,reconstruct,evaluate,ablate}``.

Each subcommand validates its inputs, writes outputs atomically and exits with
status 1 and a one-line ``error:`` message on failure.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import io as cio
from .presets import PRESETS, preset
from .recon import GridSpec, line_fit_error, pearson, pose_error, psnr, query_volume, vnn_reconstruct
from .simulator import (PHANTOM_WIRE_BOX, Scene, Speckle, blurred_reference, corrupt_poses, noise_preset, render_sweep,
                        sweep_interior_box)
from .training import AblationFlags, train

log = logging.getLogger("cellrecon")

ABLATIONS = ("cell_model", "pose_refinement", "pose_regularization", "volume_regularization")


class CliError(Exception):
    pass


def _floats(text: str, n: int, what: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise CliError(f"{what}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise CliError(f"{what}: expected {n} comma-separated numbers, got {len(vals)}")
    return vals


def _box(text: str | None, default=None):
    if text is None:
        return default
    v = _floats(text, 6, "--wire-box")
    return v[:3], v[3:]


def _resolve_config(args) -> cio.RunConfig:
    cfg = preset(args.preset, seed=args.seed)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        cfg = _merge(cfg, path.read_text(), str(path))
    cfg.train = replace(cfg.train, seed=args.seed)
    cfg.noise = replace(cfg.noise, seed=args.seed)
    return cfg


def _merge(base: cio.RunConfig, text: str, source: str) -> cio.RunConfig:
    """Apply the sections present in ``text`` on top of ``base``; a scene given
    in ``text`` replaces the base scene as a whole."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    cp.read_string(cio.run_config_to_ini(base))
    user = configparser.ConfigParser(interpolation=None, default_section="__none__")
    user.optionxform = str
    try:
        user.read_string(text, source=source)
    except configparser.Error as e:
        raise CliError(str(e).splitlines()[0]) from None
    if any(s == "scene" or s.startswith(("wire:", "box:")) for s in user.sections()):
        for s in [s for s in cp.sections() if s == "scene" or s.startswith(("wire:", "box:"))]:
            cp.remove_section(s)
    for s in user.sections():
        if not cp.has_section(s):
            cp.add_section(s)
        for k, v in user[s].items():
            cp[s][k] = v
    buf = io.StringIO()
    cp.write(buf)
    return cio.parse_run_config(buf.getvalue(), source)


def _set_threads(n: int) -> None:
    torch.set_num_threads(max(1, n))


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> None:
    cfg = _resolve_config(args)
    if args.n_frames or args.size:
        s = cfg.sweep
        n = args.n_frames or s.n_frames
        size = args.size or s.width
        fov = s.d_pixel * s.width
        cfg.sweep = replace(s, n_frames=n, width=size, height=size, d_pixel=fov / size,
                            step=s.step * s.n_frames / n)
    if args.speckle is not None:
        sp = Speckle(args.speckle, 1.0, args.seed) if args.speckle > 0 else None
        cfg.scene = Scene(cfg.scene.primitives, cfg.scene.background, sp)
    if args.noise_preset:
        cfg.noise = noise_preset(args.noise_preset, args.seed)
    seq = render_sweep(cfg.scene, cfg.sweep, np.random.default_rng(args.seed))
    seq = seq.with_poses(corrupt_poses(seq.poses, cfg.noise))
    out = Path(args.out)
    cio.write_bundle(out, seq)
    cio.save_run_config(out / "run_config.ini", cfg)
    lo, hi = sweep_interior_box(seq)
    grid = GridSpec.covering(lo, hi, cfg.recon.spacing)
    ref = blurred_reference(cfg.scene, grid, seq.true_poses[0].rotation[:, 2], cfg.sweep.slice_thickness,
                            cfg.sweep.sigma)
    cio.write_volume(out / "reference.raw", ref)
    err = pose_error(seq.poses, seq.true_poses)
    print(f"wrote {seq.n_frames} frames of {seq.shape[1]}x{seq.shape[0]} to {out} "
          f"(pose error {err[0]:.3f} mm / {err[1]:.3f} deg)")


def _train_bundle(seq, cfg: cio.RunConfig, out: Path, progress: bool):
    res = train(seq, cfg.train, progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = _pixel_bounds(seq)
    cio.save_checkpoint(out / "checkpoint.bin", res.field, res.pose_params, cfg.train,
                        extra={"pixel_bounds": [list(lo), list(hi)]})
    cio.write_poses(out / "refined_poses.csv", res.poses)
    cio.write_trace(out / "loss_trace.csv", res.trace)
    cio.save_run_config(out / "run_config.ini", cfg)
    return res


def _pixel_bounds(seq) -> tuple[np.ndarray, np.ndarray]:
    local = seq.local_pixel_grid()
    H, W = seq.shape
    corners = local[[0, W - 1, (H - 1) * W, H * W - 1]]
    pts = np.concatenate([p.apply(corners) for p in seq.poses])
    return pts.min(0), pts.max(0)


def cmd_train(args) -> None:
    cfg = _resolve_config(args)
    overrides = {}
    if args.epochs:
        overrides["epochs"] = args.epochs
    if args.ablate:
        bad = [a for a in args.ablate if a not in ABLATIONS]
        if bad:
            raise CliError(f"unknown ablation {bad[0]!r}; choose from {', '.join(ABLATIONS)}")
        overrides["flags"] = AblationFlags.without(*args.ablate)
    if overrides:
        cfg.train = replace(cfg.train, **overrides)
    seq = cio.read_bundle(args.bundle)
    res = _train_bundle(seq, cfg, Path(args.out), args.verbose)
    msg = f"trained {len(res.trace)} epochs: l_i {res.initial_intensity_loss:.5f} -> {res.final_intensity_loss:.5f}"
    if seq.true_poses is not None:
        e0 = pose_error(seq.poses, seq.true_poses)
        e1 = pose_error(res.poses, seq.true_poses)
        msg += f"; pose error {e0[0]:.3f} -> {e1[0]:.3f} mm, {e0[1]:.3f} -> {e1[1]:.3f} deg"
    print(msg)


def _grid_for(args, default_bounds) -> GridSpec:
    if args.grid_like:
        if args.bounds:
            raise CliError("--grid-like and --bounds are exclusive")
        return cio.read_volume(args.grid_like).grid
    lo, hi = _box(args.bounds) if args.bounds else default_bounds
    return GridSpec.covering(lo, hi, args.spacing)


def cmd_reconstruct(args) -> None:
    if bool(args.checkpoint) == bool(args.bundle):
        raise CliError("give exactly one of --checkpoint or --bundle")
    if args.checkpoint:
        field, _, header = cio.load_checkpoint(args.checkpoint)
        enc = field.encoding_config
        default = header.get("extra", {}).get("pixel_bounds") or (enc.domain_min, enc.domain_max)
        grid = _grid_for(args, default)
        vol = query_volume(field, grid)
        note = "field"
    else:
        seq = cio.read_bundle(args.bundle, poses_path=args.poses)
        grid = _grid_for(args, _pixel_bounds(seq))
        vol, fill = vnn_reconstruct(seq, grid)
        note = f"VNN, {100 * fill:.1f}% voxels filled"
    cio.write_volume(args.out, vol)
    print(f"wrote {'x'.join(map(str, grid.dims))} volume to {args.out} ({note})")


def cmd_evaluate(args) -> None:
    metrics: dict = {}
    if args.volume:
        vol = cio.read_volume(args.volume)
        box = _box(args.wire_box, PHANTOM_WIRE_BOX)
        try:
            metrics["lfe_mm"] = line_fit_error(vol, box=box).lfe
        except ValueError as e:
            raise CliError(f"line fit failed: {e}") from None
        if args.reference:
            ref = cio.read_volume(args.reference)
            a, b = _common(vol, ref)
            metrics["psnr_db"] = psnr(a, b)
            metrics["pearson_r"] = pearson(a, b)
    if args.poses:
        if not args.true_poses:
            raise CliError("--poses needs --true-poses")
        t, r = pose_error(cio.read_poses(args.poses), cio.read_poses(args.true_poses))
        metrics["translation_error_mm"] = t
        metrics["rotation_error_deg"] = r
    if not metrics:
        raise CliError("nothing to evaluate: give --volume and/or --poses")
    if args.out:
        cio.write_metrics(args.out, metrics)
    for k, v in metrics.items():
        print(f"{k} {v:.6g}")


def _common(vol, ref):
    """Voxel arrays of two volumes over the reference grid, which must lie on
    the volume's lattice."""
    g, h = vol.grid, ref.grid
    if not np.allclose(g.spacing, h.spacing):
        raise CliError("volume and reference have different spacing")
    off = (np.asarray(h.origin) - np.asarray(g.origin)) / np.asarray(g.spacing)
    k = np.rint(off).astype(int)
    if not np.allclose(off, k, atol=1e-6) or np.any(k < 0) or np.any(k + np.asarray(h.dims) > np.asarray(g.dims)):
        raise CliError("reference grid is not contained in the volume grid on the same lattice; "
                       "reconstruct with --grid-like REFERENCE")
    sl = tuple(slice(k[i], k[i] + h.dims[i]) for i in range(3))
    return vol.data[sl], ref.data


def cmd_ablate(args) -> None:
    cfg = _resolve_config(args)
    if args.epochs:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    seq = cio.read_bundle(args.bundle)
    ref_path = Path(args.reference) if args.reference else Path(args.bundle) / "reference.raw"
    ref = cio.read_volume(ref_path) if ref_path.exists() else None
    box = _box(args.wire_box, PHANTOM_WIRE_BOX)
    sets = [s.strip() for s in args.flags.split(",")]
    rows = []
    out = Path(args.out)
    for s in sets:
        names = [] if s in ("", "none", "full") else s.split("+")
        bad = [n for n in names if n not in ABLATIONS]
        if bad:
            raise CliError(f"unknown ablation {bad[0]!r}; choose from {', '.join(ABLATIONS)}")
        label = "full" if not names else "without_" + "+".join(names)
        run = replace(cfg.train, flags=AblationFlags.without(*names))
        sub = cio.RunConfig(run, cfg.sweep, cfg.noise, cfg.recon, cfg.scene)
        res = _train_bundle(seq, sub, out / label, args.verbose)
        row = {"configuration": label}
        wire_grid = GridSpec.covering(*box, cfg.recon.spacing)
        row["lfe_mm"] = line_fit_error(query_volume(res.field, wire_grid), box=box).lfe
        if ref is not None:
            v = query_volume(res.field, ref.grid)
            row["psnr_db"] = psnr(v, ref)
            row["pearson_r"] = pearson(v, ref)
        if seq.true_poses is not None:
            row["translation_error_mm"], row["rotation_error_deg"] = pose_error(res.poses, seq.true_poses)
        rows.append(row)
        print("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()), flush=True)
    keys = list(rows[0])
    lines = [",".join(keys)] + [",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys)
                                for r in rows]
    cio.atomic_write(out / "ablation.csv", "\n".join(lines) + "\n")
    print(f"wrote {out / 'ablation.csv'}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellrecon", description="Implicit volume reconstruction with pose refinement "
                                "for tracked freehand ultrasound sweeps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    p.add_argument("--threads", type=int, default=1, help="torch worker threads (results are bit-identical "
                   "for equal thread counts)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=0, help="governs every random choice")
        if config:
            sp.add_argument("--preset", default="small", choices=sorted(PRESETS))
            sp.add_argument("--config", help="INI file overriding the preset, section by section")

    s = sub.add_parser("simulate", help="render a synthetic sweep into a bundle")
    common(s)
    s.add_argument("--noise-preset", choices=["none", "light", "heavy"], help="override the [noise] section")
    s.add_argument("--n-frames", type=int)
    s.add_argument("--size", type=int, help="frame width and height in pixels (field of view is kept)")
    s.add_argument("--speckle", type=float, help="speckle amplitude, 0 disables")
    s.add_argument("--out", required=True, help="bundle directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit the field and refine poses")
    t.add_argument("bundle")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--ablate", action="append", metavar="FLAG", help=f"disable one of {', '.join(ABLATIONS)}")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="sample a trained field, or run the VNN baseline, on a grid")
    r.add_argument("--checkpoint")
    r.add_argument("--bundle")
    r.add_argument("--poses", help="pose CSV to use with --bundle instead of the tracked poses")
    r.add_argument("--spacing", type=float, default=0.2, help="voxel size in mm")
    r.add_argument("--bounds", help="x0,y0,z0,x1,y1,z1 in mm (default: the frames' extent)")
    r.add_argument("--grid-like", metavar="VOLUME", help="reuse the grid of an existing volume, e.g. a reference")
    r.add_argument("--out", required=True, help="volume file (a .json sidecar is written next to it)")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="line fitting error, PSNR, Pearson r and pose error")
    e.add_argument("--volume")
    e.add_argument("--reference", help="reference volume on a sub-grid of --volume")
    e.add_argument("--wire-box", help="x0,y0,z0,x1,y1,z1 box holding only the wire (default: phantom wire box)")
    e.add_argument("--poses")
    e.add_argument("--true-poses")
    e.add_argument("--out", help="metrics CSV (a .txt copy is written next to it)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train one model per flag set and tabulate LFE / PSNR")
    a.add_argument("bundle")
    common(a)
    a.add_argument("--flags", default="full," + ",".join(ABLATIONS),
                   help="comma-separated flag sets; join several flags with '+'; 'full' disables nothing")
    a.add_argument("--epochs", type=int)
    a.add_argument("--reference", help="reference volume (default: reference.raw inside the bundle)")
    a.add_argument("--wire-box")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _set_threads(args.threads)
    try:
        args.func(args)
    except (CliError, cio.FormatError, ValueError, FileNotFoundError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
