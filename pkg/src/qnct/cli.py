"""Command line interface.

One executable, subcommand per protocol step. Every command accepts
--config (flat key=value file) with flags overriding file values, writes
its fully resolved configuration next to the outputs, and exits 0 on
success or nonzero after printing one machine-parsable line
``error <Kind>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import geometry as geo
from . import metrics as mt
from . import phantoms
from . import solvers
from . import tomo_io as tio
from . import train as tr
from . import unroll as ur
from .errors import QnctError
from .init import substream


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error usage: {message}", file=sys.stderr)
        raise SystemExit(2)


# flag name -> (config key, help text), shared by geometry-defining commands
_GEOMETRY_FLAGS = {
    "beam": "geometry.beam",
    "views": "geometry.views",
    "n_views_full": "geometry.n_views_full",
    "n_det": "geometry.n_det",
    "det_spacing": "geometry.det_spacing_mm",
    "extent": "geometry.image_extent_mm",
    "angular_start": "geometry.angular_start",
    "angular_end": "geometry.angular_end",
    "sad": "geometry.sad_mm",
    "add": "geometry.add_mm",
    "size": "image.size",
}

_NOISE_FLAGS = {
    "poisson": "noise.poisson",
    "gauss_frac": "noise.gauss_frac",
    "cap": "noise.attenuation_cap",
}

_FLAG_HELP = {
    "beam": "beam type: parallel or fan",
    "views": "kept view count (uniform subset of the full set)",
    "n_views_full": "full view count before subsampling",
    "n_det": "detector count",
    "det_spacing": "detector pitch in mm",
    "extent": "image field of view in mm",
    "angular_start": "first view angle in radians",
    "angular_end": "view angle range end (exclusive) in radians",
    "sad": "source-to-axis distance in mm (fan)",
    "add": "axis-to-detector distance in mm (fan)",
    "size": "image grid size in pixels",
    "poisson": "photon intensity for count noise; 0 disables",
    "gauss_frac": "gaussian sigma as a fraction of mean |line integral|",
    "cap": "attenuation rescale target before count noise",
    "filter": "fbp filter: ram-lak or hann",
    "epochs": "training epochs",
    "lr": "learning rate",
    "weight_decay": "decoupled weight decay",
    "steps": "hard cap on optimizer steps (0 = epochs only)",
    "variant": "unrolled update rule: qn or first-order",
    "unroll_T": "unrolled iteration count",
    "unroll_k": "codec downsampling stacks (latent factor 2^k)",
    "mixer_d": "mixer embedding width (divisible by 6)",
    "msssim_levels": "multi-scale ssim levels (0 = largest feasible)",
    "data_range": "intensity range for psnr/ssim",
}


def _add_config_flags(parser, mapping):
    for flag in mapping:
        parser.add_argument("--" + flag.replace("_", "-"), dest=f"cfg_{flag}",
                            default=None, help=_FLAG_HELP.get(flag))


def _resolve(args, mappings) -> dict:
    file_text = None
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_text = fh.read()
    overrides = {}
    for mapping in mappings:
        for flag, key in mapping.items():
            raw = getattr(args, f"cfg_{flag}", None)
            if raw is not None:
                overrides[key] = raw
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return cfgmod.resolve_config(file_text, overrides)


def _write_resolved(cfg: dict, out_path: Path, command: str):
    target = out_path / "resolved.cfg" if out_path.is_dir() \
        else out_path.with_name(out_path.name + ".cfg")
    with open(target, "w") as fh:
        fh.write(f"# command: {command}\n")
        fh.write(cfgmod.format_config(cfg))


def _load_image(path, cfg) -> tuple:
    values, kind = tio.read_tomo(path)
    if kind != tio.KIND_IMAGE:
        raise QnctError(f"{path} holds a sinogram, expected an image")
    return values


def _load_sino(path) -> np.ndarray:
    values, kind = tio.read_tomo(path)
    if kind != tio.KIND_SINOGRAM:
        raise QnctError(f"{path} holds an image, expected a sinogram")
    return values


def _geometry(cfg) -> geo.Geometry:
    return cfgmod.geometry_from_config(cfg)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    cfg = _resolve(args, [{"size": "image.size"}])
    size = cfg["image.size"]
    if args.kind == "shepp-logan":
        values = phantoms.shepp_logan(size)
    else:
        values = phantoms.random_ellipses(size, substream(cfg["seed"], "data"))
    out = Path(args.out)
    tio.write_tomo(out, values, tio.KIND_IMAGE)
    _write_resolved(cfg, out, "phantom")
    print(f"wrote {out} ({size}x{size} {args.kind})")
    return 0


def cmd_project(args):
    cfg = _resolve(args, [_GEOMETRY_FLAGS])
    g = _geometry(cfg)
    values = _load_image(args.image, cfg)
    img = geo.Image(values, g.pixel_mm(values.shape[1]))
    sino = geo.forward_project(img, g)
    out = Path(args.out)
    tio.write_tomo(out, sino.values, tio.KIND_SINOGRAM)
    _write_resolved(cfg, out, "project")
    print(f"wrote {out} ({sino.n_v} views x {sino.n_d} detectors)")
    return 0


def cmd_fbp(args):
    cfg = _resolve(args, [_GEOMETRY_FLAGS, {"filter": "unroll.fbp_filter"}])
    g = _geometry(cfg)
    y = _load_sino(args.sino)
    size = cfg["image.size"]
    _check_views(g, y)
    rec = geo.fbp(geo.Sinogram(y), g, cfg["unroll.fbp_filter"], size, size)
    out = Path(args.out)
    tio.write_tomo(out, rec.values, tio.KIND_IMAGE)
    _write_resolved(cfg, out, "fbp")
    print(f"wrote {out} ({size}x{size})")
    return 0


def cmd_noise(args):
    cfg = _resolve(args, [_NOISE_FLAGS])
    y = _load_sino(args.sino)
    noisy = geo.simulate_measurement(
        geo.Sinogram(y), cfg["noise.poisson"], cfg["noise.gauss_frac"],
        seed=cfg["seed"], attenuation_cap=cfg["noise.attenuation_cap"])
    out = Path(args.out)
    tio.write_tomo(out, noisy.values, tio.KIND_SINOGRAM)
    _write_resolved(cfg, out, "noise")
    print(f"wrote {out}")
    return 0


def _check_views(g: geo.Geometry, y: np.ndarray):
    if y.shape != (g.n_views, g.n_det):
        raise QnctError(
            f"sinogram {y.shape} does not match geometry "
            f"({g.n_views} views x {g.n_det} detectors); set --views"
        )


def _estimate_step(spec, size, seed=0):
    v = substream(seed, "init").normal(size=(size, size))
    for _ in range(8):
        v = spec.op.adjoint(spec.op.forward(v))
        v /= np.linalg.norm(v)
    lip = float(np.vdot(v, spec.op.adjoint(spec.op.forward(v))))
    return 1.0 / (spec.lam * lip + spec.regularizer.mu + 1e-12)


def cmd_reconstruct(args):
    cfg = _resolve(args, [_GEOMETRY_FLAGS])
    g = _geometry(cfg)
    y = _load_sino(args.sino)
    _check_views(g, y)
    size = cfg["image.size"]
    out = Path(args.out)

    if args.method == "qn-mixer":
        if not args.weights:
            raise QnctError("qn-mixer reconstruction requires --weights")
        model = tr.model_from_checkpoint(args.weights)
        reference = (tio.read_tomo(args.reference)[0]
                     if args.reference else None)
        img, trace, inter = ur.unrolled_reconstruct(
            geo.Sinogram(y), g, model, size, size, reference=reference,
            keep_intermediates=bool(args.intermediates_dir))
        tio.write_tomo(out, img.values, tio.KIND_IMAGE)
        if args.trace:
            tio.write_csv(args.trace, trace,
                          ("t", "psnr", "si", "secant_residual",
                           "frobenius_step"))
        if args.intermediates_dir:
            inter_dir = Path(args.intermediates_dir)
            inter_dir.mkdir(parents=True, exist_ok=True)
            for t, x_t in enumerate(inter):
                tio.write_tomo(inter_dir / f"iter{t:03d}.tomo", x_t,
                               tio.KIND_IMAGE)
    else:
        reg = solvers.Regularizer(args.reg, mu=args.mu, delta=args.delta)
        spec = solvers.ObjectiveSpec.for_geometry(
            g, geo.Sinogram(y), size, size, lam=args.lam, regularizer=reg)
        x0 = geo.fbp(geo.Sinogram(y), g, cfg["unroll.fbp_filter"],
                     size, size).values.astype(np.float64)
        if args.method == "gd":
            step = args.step if args.step else _estimate_step(spec, size)
            x, trace = solvers.gradient_descent(spec, x0, step, args.iters)
        else:
            x, trace, _ = solvers.qn_reconstruct(
                spec, x0, args.iters, line_search=args.line_search)
        tio.write_tomo(out, x.astype(np.float32), tio.KIND_IMAGE)
        if args.trace:
            tio.write_csv(args.trace, trace, solvers.TRACE_COLUMNS)
    _write_resolved(cfg, out, f"reconstruct {args.method}")
    print(f"wrote {out}")
    return 0


def cmd_train(args):
    mapping = dict(_GEOMETRY_FLAGS)
    mapping.update(_NOISE_FLAGS)
    mapping.update({
        "epochs": "train.epochs", "lr": "train.lr",
        "weight_decay": "train.weight_decay", "steps": "train.max_steps",
        "variant": "unroll.variant", "unroll_T": "unroll.T",
        "unroll_k": "unroll.k", "mixer_d": "mixer.d",
    })
    cfg = _resolve(args, [mapping])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = cfg["image.size"]
    seed = cfg["seed"]

    if args.data_dir:
        files = sorted(Path(args.data_dir).glob("*.tomo"))
        if not files:
            raise QnctError(f"no .tomo images under {args.data_dir}")
        truths = [_load_image(f, cfg) for f in files]
    else:
        rng = substream(seed, "data")
        truths = [phantoms.random_ellipses(size, rng)
                  for _ in range(args.phantoms)]

    full_cfg = dict(cfg)
    full_cfg["geometry.views"] = 0  # full-view projection before subsampling
    g_full = cfgmod.geometry_from_config(full_cfg)
    n_views = cfg["geometry.views"] or g_full.n_views_full
    items, g_sparse = tr.synthesize_dataset(
        truths, g_full, n_views, cfg["noise.poisson"],
        cfg["noise.gauss_frac"], seed)

    mixer_config = cfgmod_to_mixer(cfg)
    unroll_config = cfgmod_to_unroll(cfg)
    model = ur.QnMixerModel.build(size, size, seed, mixer_config,
                                  unroll_config)
    train_config = tr.TrainConfig(
        epochs=cfg["train.epochs"], lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        lr_decay_factor=cfg["train.lr_decay_factor"],
        lr_decay_after_epoch=cfg["train.lr_decay_after_epoch"],
        seed=seed, max_steps=cfg["train.max_steps"] or None,
        checkpoint_dir=str(out_dir),
    )
    model, curve = tr.train_unrolled(items, g_sparse, model, train_config)
    tio.write_csv(out_dir / "loss.csv", curve, ("step", "epoch", "loss", "lr"))
    _write_resolved(cfg, out_dir, "train")
    print(f"trained {len(curve)} steps; checkpoints and loss.csv in {out_dir}")
    return 0


def cfgmod_to_mixer(cfg):
    from . import mixer as mx

    base = mx.MixerConfig(patch=cfg["mixer.patch"], d=96,
                          n_layers=cfg["mixer.n_layers"])
    return base.scaled(cfg["mixer.d"]) if cfg["mixer.d"] != 96 else base


def cfgmod_to_unroll(cfg):
    return ur.UnrollConfig(
        T=cfg["unroll.T"],
        codec=ur.CodecConfig(cfg["unroll.k"], cfg["unroll.codec_width"]),
        pseudo_inverse=cfg["unroll.pseudo_inverse"],
        fbp_filter=cfg["unroll.fbp_filter"],
        variant=cfg["unroll.variant"],
    )


def cmd_eval(args):
    cfg = _resolve(args, [{"msssim_levels": "eval.msssim_levels",
                           "data_range": "eval.data_range"}])
    recon_dir = Path(args.recon_dir)
    ref_dir = Path(args.ref_dir)
    names = sorted(set(p.name for p in recon_dir.glob("*.tomo"))
                   & set(p.name for p in ref_dir.glob("*.tomo")))
    if not names:
        raise QnctError("no matching .tomo file names between the two dirs")
    levels = cfg["eval.msssim_levels"] or None
    rows = []
    for name in names:
        x = _load_image(recon_dir / name, cfg)
        ref = _load_image(ref_dir / name, cfg)
        row = mt.evaluate_pair(x, ref, cfg["eval.data_range"], levels)
        rows.append({"image_id": name, "psnr_db": row["psnr"],
                     "ssim": row["ssim"], "ms_ssim": row["ms_ssim"]})
    out = Path(args.out)
    tio.write_csv(out, rows, ("image_id", "psnr_db", "ssim", "ms_ssim"))
    _write_resolved(cfg, out, "eval")
    report = mt.EvalReport(
        [{"psnr": r["psnr_db"], "ssim": r["ssim"]} for r in rows])
    print(f"wrote {out}: {len(rows)} images, "
          f"PSNR {report.mean_psnr:.2f}+-{report.std_psnr:.2f} dB, "
          f"SSIM {report.mean_ssim:.4f}")
    return 0


def cmd_nps(args):
    cfg = _resolve(args, [{"size": "image.size"}])
    files = sorted(Path(args.dir).glob("*.tomo"))
    if not files:
        raise QnctError(f"no .tomo images under {args.dir}")
    images = [_load_image(f, cfg) for f in files]
    if args.ref_dir:
        refs = {p.name: p for p in Path(args.ref_dir).glob("*.tomo")}
        images = [img - _load_image(refs[f.name], cfg)
                  for f, img in zip(files, images) if f.name in refs]
        if not images:
            raise QnctError("no matching reference images")
    size = images[0].shape[0]
    rois, roi_size = mt.paper_roi_layout(size)
    freq, curve, nps2d = mt.nps_radial(images, rois, roi_size)
    rows = [{"freq_cycles_per_px": f, "nps_hu2px2": v}
            for f, v in zip(freq, curve)]
    out = Path(args.out)
    tio.write_csv(out, rows, ("freq_cycles_per_px", "nps_hu2px2"))
    if args.map:
        tio.write_tomo(args.map, nps2d.astype(np.float32), tio.KIND_IMAGE)
    _write_resolved(cfg, out, "nps")
    print(f"wrote {out} ({len(images)} images x {len(rois)} ROIs)")
    return 0


def cmd_ood(args):
    mapping = dict(_GEOMETRY_FLAGS)
    cfg = _resolve(args, [mapping])
    g = _geometry(cfg)
    size = cfg["image.size"]
    seed = cfg["seed"]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.data_dir:
        files = sorted(Path(args.data_dir).glob("*.tomo"))
        truths = [_load_image(f, cfg) for f in files]
    else:
        rng = substream(seed, "data")
        truths = [phantoms.random_ellipses(size, rng)
                  for _ in range(args.count)]

    model = tr.model_from_checkpoint(args.weights) \
        if args.method == "qn-mixer" else None
    rng_ood = substream(seed, "ood")
    rows = []
    for idx, truth in enumerate(truths):
        stamped, mask = mt.add_circle_ood(truth, rng=rng_ood,
                                          value=args.value)
        img = geo.Image(stamped, g.pixel_mm(size))
        y = geo.forward_project(img, g)  # noise-free per the protocol
        if args.method == "qn-mixer":
            rec, _, _ = ur.unrolled_reconstruct(y, g, model, size, size)
            recon = rec.values
        elif args.method == "fbp":
            recon = geo.fbp(y, g, h=size, w=size).values
        else:
            spec = solvers.ObjectiveSpec.for_geometry(
                g, y, size, size, lam=1.0,
                regularizer=solvers.Regularizer("tikhonov", mu=0.05))
            x0 = geo.fbp(y, g, h=size, w=size).values.astype(np.float64)
            if args.method == "gd":
                x, _ = solvers.gradient_descent(
                    spec, x0, _estimate_step(spec, size), args.iters)
            else:
                x, _, _ = solvers.qn_reconstruct(spec, x0, args.iters)
            recon = x.astype(np.float32)
        crop = mt.eval_ood_crop(recon, stamped, mask)
        rows.append({
            "image_id": f"{idx:03d}",
            "full_psnr": mt.psnr(recon, stamped),
            "full_ssim": mt.ssim(recon, stamped),
            "crop_psnr": crop["psnr"],
            "crop_ssim": crop["ssim"],
        })
        tio.write_tomo(out_dir / f"{idx:03d}_truth.tomo", stamped,
                       tio.KIND_IMAGE)
        tio.write_tomo(out_dir / f"{idx:03d}_mask.tomo",
                       mask.astype(np.float32), tio.KIND_IMAGE)
        tio.write_tomo(out_dir / f"{idx:03d}_recon.tomo", recon,
                       tio.KIND_IMAGE)
    tio.write_csv(out_dir / "ood.csv", rows,
                  ("image_id", "full_psnr", "full_ssim", "crop_psnr",
                   "crop_ssim"))
    _write_resolved(cfg, out_dir, "ood")
    print(f"wrote {out_dir}/ood.csv ({len(rows)} images)")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="qnct",
                     description="sparse-view CT reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="master seed (substreams: "
                       "noise, init, ood, data)")

    p = sub.add_parser("phantom", help="generate a test object")
    common(p)
    p.add_argument("--kind", choices=("shepp-logan", "random-ellipses"),
                   default="shepp-logan")
    p.add_argument("--out", required=True, help="output TOMO1 image")
    _add_config_flags(p, {"size": None})
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", help="forward-project an image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output TOMO1 sinogram")
    _add_config_flags(p, _GEOMETRY_FLAGS)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("fbp", help="filtered backprojection")
    common(p)
    p.add_argument("--sino", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, _GEOMETRY_FLAGS)
    _add_config_flags(p, {"filter": None})
    p.set_defaults(func=cmd_fbp)

    p = sub.add_parser("noise", help="simulate measurement noise")
    common(p)
    p.add_argument("--sino", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, _NOISE_FLAGS)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("reconstruct", help="reconstruct from a sinogram")
    common(p)
    p.add_argument("--method", choices=("gd", "qn", "qn-mixer"),
                   required=True)
    p.add_argument("--sino", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="checkpoint (qn-mixer)")
    p.add_argument("--trace", help="per-iteration trace CSV")
    p.add_argument("--intermediates-dir",
                   help="dump per-iteration images (qn-mixer)")
    p.add_argument("--reference", help="reference image for trace PSNR")
    p.add_argument("--iters", type=int, default=30,
                   help="iteration count (gd/qn)")
    p.add_argument("--step", type=float, default=0.0,
                   help="gd step size; 0 estimates 1/L by power iteration")
    p.add_argument("--line-search", default="strong-wolfe",
                   choices=tuple(solvers.LINE_SEARCHES))
    p.add_argument("--lam", type=float, default=1.0,
                   help="data fidelity weight")
    p.add_argument("--reg", default="tikhonov",
                   choices=("none", "tikhonov", "smoothed_tv"))
    p.add_argument("--mu", type=float, default=0.05,
                   help="regularizer weight")
    p.add_argument("--delta", type=float, default=1e-3,
                   help="smoothed TV corner rounding")
    _add_config_flags(p, _GEOMETRY_FLAGS)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train the unrolled reconstructor")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--data-dir", help="directory of TOMO1 ground truths")
    p.add_argument("--phantoms", type=int, default=20,
                   help="procedural phantom count when no --data-dir")
    _add_config_flags(p, _GEOMETRY_FLAGS)
    _add_config_flags(p, _NOISE_FLAGS)
    _add_config_flags(p, {"epochs": None, "lr": None, "weight_decay": None,
                          "steps": None, "variant": None, "unroll_T": None,
                          "unroll_k": None, "mixer_d": None})
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score reconstructions against references")
    common(p)
    p.add_argument("--recon-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--out", required=True, help="metrics CSV")
    _add_config_flags(p, {"msssim_levels": None, "data_range": None})
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("nps", help="noise power spectrum of noise images")
    common(p)
    p.add_argument("--dir", required=True, help="directory of TOMO1 images")
    p.add_argument("--ref-dir", help="subtract same-named references")
    p.add_argument("--out", required=True, help="radial curve CSV")
    p.add_argument("--map", help="optional 2-d spectrum TOMO1 output")
    _add_config_flags(p, {"size": None})
    p.set_defaults(func=cmd_nps)

    p = sub.add_parser("ood", help="white-circle anomaly protocol")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--weights", help="checkpoint (qn-mixer)")
    p.add_argument("--method",
                   choices=("fbp", "gd", "qn", "qn-mixer"), default="fbp")
    p.add_argument("--data-dir", help="directory of TOMO1 ground truths")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--value", type=float, default=1.0,
                   help="stamped disk intensity")
    p.add_argument("--iters", type=int, default=30)
    _add_config_flags(p, _GEOMETRY_FLAGS)
    p.set_defaults(func=cmd_ood)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except QnctError as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
