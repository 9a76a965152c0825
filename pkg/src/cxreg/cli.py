"""Command-line interface.

Subcommands: ``phantom``, ``register``, ``metrics``, ``diff``, ``qc`` and
``stats``.  Outputs go to ``--out`` (default: ``$CXREG_OUTPUT_DIR`` or the
current directory).  Exit status is 0 on success, 2 for invalid input and 3
for numerical failure; errors are reported on stderr as

    cxreg:error:<exit code>:<ErrorType>: <message>
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import io
from .diffviz import difference_pipeline
from .grid import warp_image, warp_mask_hard
from .metrics import full_report
from .phantom import (AffineScaleRotate, DiaphragmRaise, HeartEnlargement,
                      OpacityBlob, PhantomParams, SmoothRandomField, Translation,
                      deform_phantom, generate_phantom, phantom_pair)
from .qc import QcThresholds, qc_mask
from .registration import RegistrationConfig, register_multistage
from .stats import compare_models

OUTPUT_ENV = "CXREG_OUTPUT_DIR"
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

# CLI flag -> RegistrationConfig field
_REG_FLAGS = {
    "mode": "mode", "stage1_size": "stage1_size", "stage2_size": "stage2_size",
    "lr": "lr", "lambda_seg": "lambda_seg", "lambda_r1": "lambda_r_stage1",
    "lambda_r2": "lambda_r_stage2", "iters1": "iters_stage1",
    "iters2": "iters_stage2", "seed": "seed",
}


@dataclass
class JobConfig:
    """Everything a subcommand run depends on, in a JSON-serializable form."""

    subcommand: str
    inputs: dict = dc_field(default_factory=dict)
    output_dir: str = "."
    registration: dict | None = None
    qc: dict | None = None
    options: dict = dc_field(default_factory=dict)

    def to_text(self):
        return io.dumps_report(asdict(self))

    @classmethod
    def from_text(cls, text):
        return cls(**json.loads(text))


def _out_dir(args):
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _reg_config(args) -> RegistrationConfig:
    base = {}
    if args.config:
        base = RegistrationConfig.from_dict(json.loads(Path(args.config).read_text())).to_dict()
    for flag, name in _REG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            base[name] = v
    return RegistrationConfig.from_dict(base)


# --- phantom ----------------------------------------------------------------

def _deformation(args):
    kind = args.deformation
    if kind == "translation":
        return Translation(args.dx, args.dy)
    if kind == "affine":
        return AffineScaleRotate(args.scale, args.angle)
    if kind == "smooth":
        return SmoothRandomField(args.amplitude, args.smoothness, args.seed)
    if kind == "heart":
        return HeartEnlargement(args.factor)
    if kind == "diaphragm":
        return DiaphragmRaise(args.px)
    if kind == "blob":
        return OpacityBlob((args.blob_x, args.blob_y), args.blob_radius, args.blob_intensity)
    raise ValueError(f"unknown deformation {kind!r}")


def _write_phantom(out, prefix, ph, bits):
    io.write_image(out / f"{prefix}.png", ph.image, bits)
    io.write_mask(out / f"{prefix}_ribs.png", ph.ribs)
    io.write_mask(out / f"{prefix}_lungs.png", ph.lungs)
    io.write_mask(out / f"{prefix}_ribcage.png", ph.ribcage)


def cmd_phantom(args):
    out = _out_dir(args)
    if args.deformation == "pair":
        pair = phantom_pair(args.seed, args.size, args.amplitude)
        moving, fixed, g = pair.moving, pair.fixed, pair.gt_field
    else:
        moving = generate_phantom(PhantomParams(size=args.size, seed=args.seed))
        fixed, g = deform_phantom(moving, _deformation(args))
    _write_phantom(out, "moving", moving, args.bits)
    _write_phantom(out, "fixed", fixed, args.bits)
    io.write_field(out / "gt_field.dfld", g)
    job = JobConfig("phantom", {}, str(out), options={
        k: v for k, v in vars(args).items() if k not in ("func", "out")})
    io.write_report(out / "phantom.json", asdict(job))
    return EXIT_OK


# --- register ---------------------------------------------------------------

def cmd_register(args):
    cfg = _reg_config(args)
    out = _out_dir(args)
    m = io.read_image(args.moving)
    f = io.read_image(args.fixed)
    s_m = io.read_mask(args.moving_mask) if args.moving_mask else None
    s_f = io.read_mask(args.fixed_mask) if args.fixed_mask else None
    if cfg.mode.value == "unsup":
        s_m = s_f = None
    res = register_multistage(m, f, s_m, s_f, cfg)
    io.write_field(out / "field.dfld", res.field_native)
    io.write_image(out / "warped.png", res.warped, args.bits)
    job = JobConfig("register", {"moving": args.moving, "fixed": args.fixed,
                                 "moving_mask": args.moving_mask,
                                 "fixed_mask": args.fixed_mask},
                    str(out), registration=cfg.to_dict())
    io.write_report(out / "trace.json", {
        "job": asdict(job),
        "stage1_len": res.stage1_trace_len,
        "loss_trace": [b.as_dict() for b in res.loss_trace],
        "diagnostics": res.diagnostics,
    })
    return EXIT_OK


# --- metrics ----------------------------------------------------------------

def _opt_mask(path):
    return io.read_mask(path) if path else None


def cmd_metrics(args):
    out = _out_dir(args)
    fixed = io.read_image(args.fixed)
    field = io.read_field(args.field)
    warped = io.read_image(args.warped) if args.warped else warp_image(io.read_image(args.moving), field)
    masks = {}
    for name in ("ribs", "lungs"):
        mov = _opt_mask(getattr(args, f"moving_{name}"))
        fix = _opt_mask(getattr(args, f"fixed_{name}"))
        if (mov is None) != (fix is None):
            raise ValueError(f"--moving-{name} and --fixed-{name} go together")
        masks[name] = (None, None) if mov is None else (warp_mask_hard(mov, field), fix)
    provenance = {"fixed": args.fixed, "field": args.field,
                  "warped": args.warped, "moving": args.moving}
    rep = full_report(warped, fixed, field, *masks["ribs"], *masks["lungs"],
                      provenance=provenance)
    io.write_report(out / (args.name or "metrics.json"), rep.to_dict())
    return EXIT_OK


# --- diff -------------------------------------------------------------------

def cmd_diff(args):
    out = _out_dir(args)
    fixed = io.read_image(args.fixed)
    if args.warped:
        warped = io.read_image(args.warped)
    elif args.moving and args.field:
        warped = warp_image(io.read_image(args.moving), io.read_field(args.field))
    else:
        raise ValueError("give --warped or both --moving and --field")
    ribcage = io.read_mask(args.ribcage) > 0
    d = difference_pipeline(fixed, warped, ribcage, margin=args.margin)
    io.write_rgb(out / "diff.png", d.rgb)
    meta = {"clip_bounds": list(d.clip_bounds), "vmax": d.vmax, "margin": args.margin}
    if args.signed16:
        codes, scale = d.encode_16bit()
        io.write_signed16(out / "diff_signed.png", codes, scale)
        meta["signed16_scale"] = scale
    io.write_report(out / "diff.json", meta)
    return EXIT_OK


# --- qc ---------------------------------------------------------------------

def _mask_files(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix.lower() == ".png"))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such mask file or directory: {p}")
    if not files:
        raise ValueError("no mask files given")
    return files


def _qc_one(job):
    path, t = job
    return qc_mask(io.read_mask(path), QcThresholds(**t), source=str(path)).to_dict()


def cmd_qc(args):
    out = _out_dir(args)
    t = asdict(QcThresholds(args.t_q1, args.t_q3, args.t_q4))
    jobs = [(str(f), t) for f in _mask_files(args.masks)]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as ex:
            reports = list(ex.map(_qc_one, jobs))
    else:
        reports = [_qc_one(j) for j in jobs]
    failing = []
    for rep in reports:
        stem = Path(rep["source"]).stem
        io.write_report(out / f"{stem}.qc.json", rep)
        if not rep["passed"]:
            first = next(p for p in rep["pairs"] if not p["passed"])
            failing.append({"file": rep["source"], "first_failing_label": rep["first_failing_label"],
                            "failed_rules": [r for r in ("q1", "q2", "q3", "q4") if not first[r]]})
    io.write_report(out / "triage.json", {"n_files": len(reports), "n_failing": len(failing),
                                          "failing": failing, "thresholds": t})
    return EXIT_OK


# --- stats ------------------------------------------------------------------

def _load_reports(path):
    p = Path(path)
    if p.is_dir():
        return [io.read_report(q) for q in sorted(p.glob("*.json"))]
    data = io.read_report(p)
    return data if isinstance(data, list) else [data]


def cmd_stats(args):
    out = _out_dir(args)
    reports = {}
    for spec in args.reports:
        name, sep, path = spec.partition("=")
        if not sep:
            raise ValueError(f"expected MODEL=PATH, got {spec!r}")
        reports[name] = _load_reports(path)
    summary = compare_models(reports, args.metric, args.alpha, args.friedman_alpha)
    io.write_report(out / (args.name or "stats.json"), summary.to_dict())
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _add_common(p):
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or .)")


def build_parser():
    ap = argparse.ArgumentParser(prog="cxreg", description="Chest X-ray deformable registration")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic phantom pair")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    p.add_argument("--deformation", default="pair",
                   choices=("pair", "translation", "affine", "smooth", "heart", "diaphragm", "blob"))
    p.add_argument("--amplitude", type=float, default=4.0)
    p.add_argument("--smoothness", type=int, default=4)
    p.add_argument("--dx", type=float, default=3.0)
    p.add_argument("--dy", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--factor", type=float, default=1.2)
    p.add_argument("--px", type=float, default=8.0)
    p.add_argument("--blob-x", type=float, default=0.35)
    p.add_argument("--blob-y", type=float, default=0.5)
    p.add_argument("--blob-radius", type=float, default=0.05)
    p.add_argument("--blob-intensity", type=float, default=0.3)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="register a moving image onto a fixed image")
    _add_common(p)
    p.add_argument("moving")
    p.add_argument("fixed")
    p.add_argument("--moving-mask")
    p.add_argument("--fixed-mask")
    p.add_argument("--config", help="JSON registration config; flags override it")
    p.add_argument("--mode", choices=("unsup", "lung", "ribcage", "ribpairs"))
    p.add_argument("--stage1-size", type=int)
    p.add_argument("--stage2-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-seg", type=float)
    p.add_argument("--lambda-r1", type=float)
    p.add_argument("--lambda-r2", type=float)
    p.add_argument("--iters1", type=int)
    p.add_argument("--iters2", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("metrics", help="evaluate a registration")
    _add_common(p)
    p.add_argument("--fixed", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--warped")
    p.add_argument("--moving")
    for name in ("ribs", "lungs"):
        p.add_argument(f"--moving-{name}")
        p.add_argument(f"--fixed-{name}")
    p.add_argument("--name", help="report file name (default metrics.json)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("diff", help="render a difference image")
    _add_common(p)
    p.add_argument("--fixed", required=True)
    p.add_argument("--warped")
    p.add_argument("--moving")
    p.add_argument("--field")
    p.add_argument("--ribcage", required=True, help="rib cage (or rib pair) mask of the fixed image")
    p.add_argument("--margin", type=int, default=20)
    p.add_argument("--signed16", action="store_true", help="also write the signed 16-bit map")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("qc", help="quality-check rib pair masks")
    _add_common(p)
    p.add_argument("masks", nargs="+", help="mask files or directories")
    p.add_argument("--t-q1", type=int, default=300)
    p.add_argument("--t-q3", type=float, default=30.0)
    p.add_argument("--t-q4", type=int, default=50)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("stats", help="significance tests across models")
    _add_common(p)
    p.add_argument("reports", nargs="+", help="MODEL=PATH (report file or directory)")
    p.add_argument("--metric", default="dcr")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--friedman-alpha", type=float, default=0.005)
    p.add_argument("--name", help="summary file name (default stats.json)")
    p.set_defaults(func=cmd_stats)
    return ap


def _fail(code, exc):
    msg = str(exc).replace("\n", " ")
    print(f"cxreg:error:{code}:{type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(all="ignore"):
            return args.func(args)
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (ValueError, KeyError, TypeError, OSError) as exc:
        return _fail(EXIT_INPUT, exc)


if __name__ == "__main__":
    sys.exit(main())
