"""Command-line interface: ``superdti <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure.  Tabular results go to stdout as tab-separated lines.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dti, experiments as ex, io, metrics, phantom as ph, plotting, tractography as tg, training as tr

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("superdti")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(*fields):
    print("\t".join(str(f) for f in fields))


def _fmt(v):
    if isinstance(v, float):
        return "inf" if np.isinf(v) else f"{v:.6g}"
    return v


# -- helpers ------------------------------------------------------------------

def _load_scheme(args, dwi_path=None):
    if args.bvals and args.bvecs:
        return io.read_scheme(args.bvals, args.bvecs)
    if dwi_path is not None:
        p = Path(dwi_path)
        bvals, bvecs = p.with_suffix(".bval"), p.with_suffix(".bvec")
        if bvals.exists() and bvecs.exists():
            return io.read_scheme(bvals, bvecs)
    raise UsageError("a gradient scheme is required (--bvals and --bvecs)")


def _load_dwi(path, args) -> ph.DwiVolume:
    data, header = io.read_volume(path)
    scheme = _load_scheme(args, path)
    if data.shape[-1] != len(scheme):
        raise ValueError(f"{path} has {data.shape[-1]} volumes but the scheme lists {len(scheme)} measurements")
    return ph.DwiVolume(data.astype(np.float64), scheme, tuple(header["spacing"]))


def _load_scalar(path):
    data, header = io.read_volume(path)
    return (data[..., 0] if data.shape[-1] == 1 else data).astype(np.float64), header


def _write_maps(out: Path, maps: dti.DtiMaps, spacing, png: bool = True):
    out.mkdir(parents=True, exist_ok=True)
    io.write_volume(out / "tensor.json", maps.tensor, spacing, "tensor")
    io.write_volume(out / "s0.json", maps.s0, spacing, "dwi")
    io.write_volume(out / "fa.json", maps.fa, spacing, "fa")
    io.write_volume(out / "md.json", maps.md, spacing, "md")
    io.write_volume(out / "colormap.json", maps.color, spacing, "colormap")
    io.write_volume(out / "eigvec.json", maps.eigen.v1, spacing, "eigvec")
    io.write_volume(out / "mask.json", maps.mask.astype(np.float32), spacing, "mask")
    if png:
        z = maps.fa.shape[2] // 2
        plotting.render_png(out / "fa.png", maps.fa[:, :, z])
        plotting.render_png(out / "colormap.png", maps.color[:, :, z], "color")
    _emit("voxels_fit", int(maps.mask.sum()))
    _emit("mean_fa", _fmt(float(maps.fa[maps.mask].mean()) if maps.mask.any() else 0.0))


# -- commands -----------------------------------------------------------------

def cmd_phantom(args):
    if args.spec:
        spec = ph.PhantomSpec.from_json(args.spec)
    else:
        spec = ph.default_phantom_spec(tuple(args.dims), seed=args.seed, lesion_factor=args.lesion_factor)
    p = ph.generate_phantom(spec)
    if args.bvals and args.bvecs:
        scheme = io.read_scheme(args.bvals, args.bvecs)
    else:
        scheme = ph.generate_scheme(args.directions, args.b, args.n_b0, seed=args.seed)
    dwi = ph.synthesize_dwi(p.field, scheme, spacing=spec.spacing)
    if args.snr is not None:
        dwi = ph.add_rician_noise(dwi, args.snr, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "phantom.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    io.write_volume(out / "dwi.json", dwi.data, spec.spacing, "dwi",
                    extra={k: v for k, v in dwi.meta.items() if k != "motion"})
    io.write_scheme(out / "dwi.bval", out / "dwi.bvec", scheme)
    io.write_volume(out / "fa.json", p.fa, spec.spacing, "fa")
    io.write_volume(out / "md.json", p.md, spec.spacing, "md")
    io.write_volume(out / "colormap.json", p.color, spec.spacing, "colormap")
    io.write_volume(out / "eigvec.json", p.v1, spec.spacing, "eigvec")
    io.write_volume(out / "labels.json", p.labels, spec.spacing, "labels")
    io.write_volume(out / "lesion.json", p.lesion_mask.astype(np.float32), spec.spacing, "mask")
    _emit("dims", *spec.dims)
    _emit("measurements", len(scheme))
    _emit("foreground_voxels", int(p.mask.sum()))
    _emit("lesion_voxels", int(p.lesion_mask.sum()))
    return EXIT_OK


def cmd_scheme(args):
    if args.action == "generate":
        scheme = ph.generate_scheme(args.directions, args.b, args.n_b0, seed=args.seed,
                                    iterations=args.iterations)
        io.write_scheme(args.out + ".bval", args.out + ".bvec", scheme)
        _emit("energy", _fmt(ph.repulsion_energy(scheme.bvecs[~scheme.b0_mask])))
    else:
        if not (args.bvals and args.bvecs):
            raise UsageError("scheme validate needs --bvals and --bvecs")
        scheme = io.read_scheme(args.bvals, args.bvecs)
    cond = dti.scheme_condition_number(scheme)
    _emit("measurements", len(scheme))
    _emit("b0", scheme.n_b0)
    _emit("condition_number", _fmt(float(cond)))
    if not np.isfinite(cond):
        raise dti.DegenerateSchemeError("scheme cannot determine all six tensor components")
    return EXIT_OK


def cmd_fit(args):
    dwi = _load_dwi(args.dwi, args)
    maps = dti.compute_maps(dwi.data, dwi.scheme)
    _write_maps(Path(args.out), maps, dwi.spacing, png=not args.no_png)
    return EXIT_OK


def cmd_maps(args):
    data, header = io.read_volume(args.tensor)
    if data.shape[-1] != 6:
        raise ValueError(f"{args.tensor} has {data.shape[-1]} channels; a tensor volume has 6")
    eig = dti.eig3_sym(data.astype(np.float64))
    fa_map, md_map = dti.fa(eig.evals), dti.md(eig.evals)
    color = dti.colormap_voxel(eig.v1, fa_map)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sp = header["spacing"]
    io.write_volume(out / "fa.json", fa_map, sp, "fa")
    io.write_volume(out / "md.json", md_map, sp, "md")
    io.write_volume(out / "colormap.json", color, sp, "colormap")
    io.write_volume(out / "eigvec.json", eig.v1, sp, "eigvec")
    _emit("voxels", int(np.prod(fa_map.shape)))
    return EXIT_OK


def _dataset_subject(d: Path, target: str, args):
    dwi = _load_dwi(d / "dwi.json", argparse.Namespace(bvals=None, bvecs=None))
    ref, _ = _load_scalar(d / {"fa": "fa.json", "md": "md.json", "colormap": "colormap.json"}[target])
    labels, _ = _load_scalar(d / "labels.json")
    return tr.Subject(dwi, ref, labels > 0)


def cmd_train(args):
    subjects = [_dataset_subject(Path(d), args.target, args) for d in args.data]
    if len(subjects) < 2:
        raise ValueError("training needs at least two dataset directories (train and validation)")
    trs, vas = tr.split_subjects(subjects)
    e = args.epochs
    cfg = tr.TrainConfig(epochs=e, lr_schedule=tr.step_schedule(e, args.lr),
                         batch_size=args.batch_size, width=args.width, seed=args.seed,
                         patches_per_epoch=args.patches_per_epoch, target=args.target)
    res = tr.train_mlp(trs, vas, cfg) if args.model == "mlp" else tr.train(trs, vas, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_checkpoint(out / "model.ckpt", res.model)
    (out / "curve.csv").write_text(res.curve_csv())
    plotting.plot_curves(out / "loss_curve.png", {args.model: res.curve})
    _emit("epoch", "train_loss", "val_loss")
    for row in res.curve:
        _emit(*(_fmt(v) for v in row))
    _emit("best_epoch", res.best_epoch)
    return EXIT_OK


def cmd_infer(args):
    model = io.read_checkpoint(args.checkpoint)
    dwi = _load_dwi(args.dwi, args)
    mask = None
    if args.mask:
        mask = _load_scalar(args.mask)[0] > 0
    pred = model.predict(dwi, mask)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_volume(out, pred, dwi.spacing, model.target, divisor=model.target_divisor)
    z = pred.shape[2] // 2
    if model.target == "colormap":
        plotting.render_png(out.with_suffix(".png"), pred[:, :, z], "color")
    elif model.target == "fa":
        plotting.render_png(out.with_suffix(".png"), pred[:, :, z])
    _emit("target", model.target)
    _emit("mean", _fmt(float(pred.mean())))
    return EXIT_OK


def cmd_track(args):
    fa_map, header = _load_scalar(args.fa)
    if args.eigvec:
        v1, _ = io.read_volume(args.eigvec)
    elif args.colormap:
        color, _ = io.read_volume(args.colormap)
        v1 = tg.directions_from_colormap(color.astype(np.float64), fa_map)
    else:
        raise UsageError("track needs --eigvec or --colormap")
    spacing = header["spacing"]
    sls = tg.track_volume(np.asarray(v1, dtype=np.float64), fa_map, args.fa_thresh, args.angle, spacing)
    n_all = tg.count_fibers(sls)
    if args.roi:
        labels, _ = _load_scalar(args.roi)
        roi = labels == args.roi_label if args.roi_label is not None else labels > 0
        sls = tg.roi_filter(sls, roi, spacing)
    io.write_streamlines(args.out, sls, spacing)
    if args.text:
        Path(args.text).write_text(io.streamlines_to_text(sls))
    _emit("seeds_tracked", n_all)
    _emit("fibers", tg.count_fibers(sls))
    return EXIT_OK


def cmd_metrics(args):
    pred, _ = io.read_volume(args.pred)
    ref, _ = io.read_volume(args.ref)
    pred, ref = pred.astype(np.float64), ref.astype(np.float64)
    if pred.shape[-1] == 1:
        pred, ref = pred[..., 0], ref[..., 0]
    mask = _load_scalar(args.mask)[0] > 0 if args.mask else None
    report = metrics.EvalReport("metrics", provenance={"pred": str(args.pred), "ref": str(args.ref),
                                                       "seed": args.seed})
    s = report.add(args.method, args.map, pred, ref, mask)
    if args.labels:
        labels, _ = _load_scalar(args.labels)
        if pred.ndim == 3:
            report.rois[args.method] = metrics.roi_stats(pred, labels.astype(int), ref)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    _emit("method", "map", "psnr", "nmse", "ssim")
    _emit(args.method, args.map, _fmt(s.psnr), _fmt(s.nmse), _fmt(s.ssim))
    return EXIT_OK


def _repro_config(args) -> ex.ReproConfig:
    cfg = ex.ReproConfig(seed=args.seed)
    for name in ("epochs", "mlp_epochs", "md_epochs", "width", "batch_size", "patches_per_epoch", "lr"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    if args.dims:
        cfg.dims = tuple(args.dims)
    if args.sizes:
        cfg.sizes = list(args.sizes)
        cfg.n_train = max(cfg.n_train, max(args.sizes))
    return cfg


def cmd_repro(args):
    cfg = _repro_config(args)
    out = Path(args.out) if args.out else Path("repro_" + args.recipe.replace("-", "_"))
    models = None
    if args.checkpoint:
        model = io.read_checkpoint(args.checkpoint)
        models = {"superdti_fa": tr.TrainResult(model, [], int(model.meta.get("best_epoch", 0)), float("nan"))}
    if args.recipe == "training-size":
        rows, text = ex.training_size_sweep(cfg.sizes, cfg, out)
        sys.stdout.write(text.replace(",", "\t"))
        return EXIT_OK
    runner = {"noise": ex.run_noise, "motion": ex.run_motion, "lesion": ex.run_lesion}.get(args.recipe)
    if args.recipe == "md":
        result = ex.run_md(cfg, out)
    else:
        result = runner(cfg, out, models)
    _emit("method", "map", "psnr", "nmse", "ssim")
    for method, maps in result.report.scores.items():
        for name, s in maps.items():
            _emit(method, name, _fmt(s["psnr"]), _fmt(s["nmse"]), _fmt(s["ssim"]))
    for name, c in result.report.lesion.items():
        _emit("lesion_contrast", name, _fmt(c["contrast"]))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="superdti", description="DTI maps from few DWIs with a residual CNN.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def scheme_opts(p):
        p.add_argument("--bvals")
        p.add_argument("--bvecs")

    p = sub.add_parser("phantom", parents=[common], help="generate a phantom dataset")
    p.add_argument("--spec", help="phantom spec JSON (default: built-in brain-like phantom)")
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 16])
    p.add_argument("--directions", type=int, default=6)
    p.add_argument("--b", type=float, default=1000.0)
    p.add_argument("--n-b0", type=int, default=1)
    p.add_argument("--snr", type=float, help="Rician noise level in dB (default: noiseless)")
    p.add_argument("--lesion-factor", type=float)
    scheme_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("scheme", parents=[common], help="generate or validate a gradient scheme")
    p.add_argument("action", choices=["generate", "validate"])
    p.add_argument("--directions", type=int, default=6)
    p.add_argument("--b", type=float, default=1000.0)
    p.add_argument("--n-b0", type=int, default=1)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--out", default="scheme", help="output prefix for .bval/.bvec")
    scheme_opts(p)
    p.set_defaults(func=cmd_scheme)

    p = sub.add_parser("fit", parents=[common], help="least-squares tensor fit and maps")
    p.add_argument("--dwi", required=True)
    scheme_opts(p)
    p.add_argument("--out", required=True)
    p.add_argument("--no-png", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("maps", parents=[common], help="FA/MD/colormap from a tensor volume")
    p.add_argument("--tensor", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_maps)

    p = sub.add_parser("train", parents=[common], help="train a network on phantom datasets")
    p.add_argument("--data", nargs="+", required=True, help="dataset directories written by 'phantom'")
    p.add_argument("--target", choices=tr.TARGET_KINDS, default="fa")
    p.add_argument("--model", choices=["superdti", "mlp"], default="superdti")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patches-per-epoch", type=int, default=1024)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="apply a checkpoint to DWIs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dwi", required=True)
    p.add_argument("--mask")
    scheme_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("track", parents=[common], help="FACT tractography")
    p.add_argument("--fa", required=True)
    p.add_argument("--eigvec")
    p.add_argument("--colormap")
    p.add_argument("--fa-thresh", type=float, default=0.2)
    p.add_argument("--angle", type=float, default=40.0)
    p.add_argument("--roi", help="label volume; streamlines must touch it")
    p.add_argument("--roi-label", type=int)
    p.add_argument("--text", help="also write a text export")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("metrics", parents=[common], help="score a map against a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mask")
    p.add_argument("--labels", help="label volume for per-ROI statistics")
    p.add_argument("--method", default="estimate")
    p.add_argument("--map", default="fa")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("repro", parents=[common], help="run an experiment recipe end to end")
    p.add_argument("recipe", choices=ex.RECIPES)
    p.add_argument("--out")
    p.add_argument("--checkpoint", help="reuse a trained FA checkpoint (motion, lesion)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--mlp-epochs", type=int)
    p.add_argument("--md-epochs", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patches-per-epoch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--sizes", type=int, nargs="+")
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("superdti: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"superdti: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (tr.TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"superdti: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError, KeyError, IndexError, OSError) as exc:
        print(f"superdti: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
