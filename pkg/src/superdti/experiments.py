"""End-to-end experiment recipes on seeded phantom 'subjects'.

Each recipe builds its subjects from one seed, trains what it needs,
evaluates on a fixed held-out subject against the noiseless analytic maps
and returns an :class:`~superdti.metrics.EvalReport`.  When given an
output directory it also writes checkpoints, loss curves and PNG figures.
Nothing time-dependent enters a report, so runs with the same seed and a
single BLAS thread are bitwise reproducible.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dti, metrics, phantom as ph, training as tr

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("size", "psnr", "ssim", "nmse", "best_epoch", "final_train_loss")
RECIPES = ("noise", "motion", "lesion", "training-size", "md")


@dataclass
class ReproConfig:
    """Desk-scale settings shared by the recipes."""

    seed: int = 0
    dims: tuple = (64, 64, 16)
    n_directions: int = 6
    b: float = 1000.0
    snr_db: float = 30.0
    n_train: int = 4
    n_val: int = 1
    width: int = 16
    epochs: int = 100
    lr: float = 5e-4
    batch_size: int = 4
    patches_per_epoch: int | None = 1024
    mlp_epochs: int = 8
    md_epochs: int = 30
    md_directions: int = 3
    motion_shift: tuple = (1.0, 0.0)
    motion_rotation: float = 1.0
    motion_volume: int = 1
    lesion_factor: float = 0.5
    sizes: list = field(default_factory=lambda: [4, 2, 1])

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.motion_shift = tuple(float(s) for s in self.motion_shift)

    def train_config(self, target: str = "fa", epochs: int | None = None) -> tr.TrainConfig:
        e = self.epochs if epochs is None else epochs
        return tr.TrainConfig(epochs=e, lr_schedule=tr.step_schedule(e, self.lr),
                              batch_size=self.batch_size, width=self.width, seed=self.seed,
                              patches_per_epoch=self.patches_per_epoch, target=target)

    def mlp_train_config(self, target: str = "fa") -> tr.TrainConfig:
        return tr.mlp_config(self.train_config(target, self.mlp_epochs), patches_per_epoch=None)

    def to_dict(self) -> dict:
        return asdict(self)


# -- subjects -----------------------------------------------------------------

@dataclass
class Case:
    phantom: ph.Phantom
    clean: ph.DwiVolume
    noisy: ph.DwiVolume

    def subject(self, target: str = "fa", indices=None) -> tr.Subject:
        dwi = self.noisy if indices is None else self.noisy.select(indices)
        ref = {"fa": self.phantom.fa, "md": self.phantom.md, "colormap": self.phantom.color}[target]
        return tr.Subject(dwi, ref, self.phantom.mask)


def make_scheme(cfg: ReproConfig) -> dti.GradientScheme:
    return ph.generate_scheme(cfg.n_directions, cfg.b, 1, seed=cfg.seed)


def make_case(cfg: ReproConfig, scheme, index: int, lesion_factor: float | None = None,
              motion: bool = False) -> Case:
    """Subject ``index`` of this seed; the same index always gives the same anatomy and noise."""
    base = cfg.seed * 1000
    p = ph.generate_phantom(ph.default_phantom_spec(cfg.dims, seed=base + index,
                                                    lesion_factor=lesion_factor))
    clean = ph.synthesize_dwi(p.field, scheme, spacing=p.spacing)
    acquired = clean
    if motion:
        acquired = ph.apply_motion(clean, [cfg.motion_volume], cfg.motion_shift, cfg.motion_rotation)
    noisy = ph.add_rician_noise(acquired, cfg.snr_db, seed=base + 500 + index)
    return Case(p, clean, noisy)


def test_index(cfg: ReproConfig) -> int:
    return cfg.n_train + cfg.n_val


def _cases(cfg, scheme, n):
    return [make_case(cfg, scheme, k) for k in range(n)]


def mf_maps(dwi) -> dti.DtiMaps:
    return dti.compute_maps(dwi)


# -- recipes ------------------------------------------------------------------

@dataclass
class RunResult:
    report: metrics.EvalReport
    models: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    maps: dict = field(default_factory=dict)


def _provenance(cfg, recipe, n_dwi):
    return {"recipe": recipe, "seed": cfg.seed, "n_dwi": n_dwi, "config": cfg.to_dict()}


def _write_outputs(outdir, result: RunResult, reference=None, mask=None, stem: str = "fa"):
    from . import io, plotting
    out = Path(outdir)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(result.report.to_json() + "\n")
    for name, res in result.models.items():
        io.write_checkpoint(out / f"{name}.ckpt", res.model)
        (out / f"curve_{name}.csv").write_text(res.curve_csv())
    if result.curves:
        plotting.plot_curves(out / "figures" / "loss_curves.png", result.curves)
    if result.maps:
        z = next(iter(result.maps.values())).shape[2] // 2
        sl = {k: v[:, :, z] for k, v in result.maps.items()}
        ref = None if reference is None else reference[:, :, z]
        plotting.map_panel(out / "figures" / f"{stem}_panel.png", sl, reference=ref)
        for k, v in sl.items():
            plotting.render_png(out / "figures" / f"{stem}_{k}.png", v)
            if ref is not None:
                plotting.render_png(out / "figures" / f"{stem}_{k}_error.png", v, "error", reference=ref)


def train_fa_models(cfg: ReproConfig, scheme=None, with_mlp: bool = True):
    scheme = make_scheme(cfg) if scheme is None else scheme
    cases = _cases(cfg, scheme, cfg.n_train + cfg.n_val)
    subjects = [c.subject("fa") for c in cases]
    trs, vas = subjects[:cfg.n_train], subjects[cfg.n_train:]
    models = {"superdti_fa": tr.train(trs, vas, cfg.train_config("fa"))}
    if with_mlp:
        models["mlp_fa"] = tr.train_mlp(trs, vas, cfg.mlp_train_config("fa"))
    return models


def run_noise(cfg: ReproConfig, outdir=None, models: dict | None = None) -> RunResult:
    """MF, MLP and SuperDTI FA from noisy 6-DWI data, scored against the noiseless reference."""
    scheme = make_scheme(cfg)
    if models is None:
        models = train_fa_models(cfg, scheme)
    test = make_case(cfg, scheme, test_index(cfg))
    ref, mask = test.phantom.fa, test.phantom.mask
    maps = {"MF": mf_maps(test.noisy).fa * mask}
    if "mlp_fa" in models:
        maps["MLP"] = models["mlp_fa"].model.predict(test.noisy, mask)
    maps["SuperDTI"] = models["superdti_fa"].model.predict(test.noisy, mask)
    report = metrics.EvalReport("noise", provenance=_provenance(cfg, "noise", scheme.n_weighted))
    for name, m in maps.items():
        report.add(name, "fa", m, ref, mask)
    report.provenance["snr_db"] = cfg.snr_db
    report.provenance["training"] = {
        k: {"best_epoch": r.best_epoch, "initial_train_loss": r.initial_train_loss,
            "final_train_loss": r.curve[-1][1], "final_val_loss": r.curve[-1][2]}
        for k, r in models.items()}
    result = RunResult(report, models, {k: r.curve for k, r in models.items()}, maps)
    if outdir is not None:
        _write_outputs(outdir, result, ref, mask)
    return result


def run_motion(cfg: ReproConfig, outdir=None, models: dict | None = None) -> RunResult:
    """FA error with and without rigid motion in one weighted volume of the test subject."""
    scheme = make_scheme(cfg)
    if models is None:
        models = train_fa_models(cfg, scheme, with_mlp=False)
    model = models["superdti_fa"].model
    still = make_case(cfg, scheme, test_index(cfg))
    moved = make_case(cfg, scheme, test_index(cfg), motion=True)
    ref, mask = still.phantom.fa, still.phantom.mask
    report = metrics.EvalReport("motion", provenance=_provenance(cfg, "motion", scheme.n_weighted))
    maps = {}
    for tag, case in (("clean", still), ("motion", moved)):
        maps[f"MF_{tag}"] = mf_maps(case.noisy).fa * mask
        maps[f"SuperDTI_{tag}"] = model.predict(case.noisy, mask)
    for name, m in maps.items():
        method, tag = name.split("_")
        report.scores.setdefault(method, {})[f"fa_{tag}"] = metrics.evaluate_maps(m, ref, mask)
    report.provenance["motion"] = moved.noisy.meta["motion"]
    result = RunResult(report, {}, {}, maps)
    if outdir is not None:
        _write_outputs(outdir, result, ref, mask)
    return result


def run_lesion(cfg: ReproConfig, outdir=None, models: dict | None = None) -> RunResult:
    """Lesion contrast on a lesioned test subject for a model trained without lesions."""
    scheme = make_scheme(cfg)
    if models is None:
        models = train_fa_models(cfg, scheme, with_mlp=False)
    model = models["superdti_fa"].model
    case = make_case(cfg, scheme, test_index(cfg), lesion_factor=cfg.lesion_factor)
    p = case.phantom
    if not np.any(p.lesion_mask):
        raise ValueError("the lesioned phantom has an empty lesion mask")
    region = int(np.bincount(p.labels[p.lesion_mask]).argmax())
    bg = metrics.surrounding_background(p.lesion_mask, p.labels == region)
    maps = {"Reference": p.fa, "MF": mf_maps(case.noisy).fa * p.mask,
            "SuperDTI": model.predict(case.noisy, p.mask)}
    report = metrics.EvalReport("lesion", provenance=_provenance(cfg, "lesion", scheme.n_weighted))
    for name, m in maps.items():
        c, mag = metrics.lesion_contrast(m, p.lesion_mask, bg)
        report.lesion[name] = {"contrast": c, "magnitude": mag}
        if name != "Reference":
            report.add(name, "fa", m, p.fa, p.mask)
    report.provenance["lesion_factor"] = cfg.lesion_factor
    report.provenance["lesion_voxels"] = int(p.lesion_mask.sum())
    report.provenance["background_voxels"] = int(bg.sum())
    result = RunResult(report, {}, {}, maps)
    if outdir is not None:
        _write_outputs(outdir, result, p.fa, p.mask)
    return result


def run_md(cfg: ReproConfig, outdir=None) -> RunResult:
    """MD from b=0 plus ``md_directions`` weighted volumes: MF, MLP and SuperDTI."""
    scheme = make_scheme(cfg)
    keep = [0] + list(range(1, 1 + cfg.md_directions))
    cases = _cases(cfg, scheme, cfg.n_train + cfg.n_val)
    subjects = [c.subject("md", keep) for c in cases]
    trs, vas = subjects[:cfg.n_train], subjects[cfg.n_train:]
    models = {"superdti_md": tr.train(trs, vas, cfg.train_config("md", cfg.md_epochs)),
              "mlp_md": tr.train_mlp(trs, vas, cfg.mlp_train_config("md"))}
    test = make_case(cfg, scheme, test_index(cfg))
    dwi = test.noisy.select(keep)
    ref, mask = test.phantom.md, test.phantom.mask
    maps = {"MLP": models["mlp_md"].model.predict(dwi, mask),
            "SuperDTI": models["superdti_md"].model.predict(dwi, mask)}
    report = metrics.EvalReport("md", provenance=_provenance(cfg, "md", len(keep) - 1))
    for name, m in maps.items():
        report.add(name, "md", m, ref, mask)
    result = RunResult(report, models, {k: r.curve for k, r in models.items()}, maps)
    if outdir is not None:
        _write_outputs(outdir, result, stem="md")
    return result


def training_size_sweep(sizes, cfg: ReproConfig, outdir=None):
    """Retrain the FA network on the first ``size`` training subjects for each size.

    Validation and test subjects are fixed across sizes.  Returns the rows
    (dicts keyed by :data:`SWEEP_COLUMNS`) and the CSV text.
    """
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ValueError("no training sizes given")
    if any(s < 1 for s in sizes):
        raise ValueError("training sizes must be positive")
    if max(sizes) > cfg.n_train:
        raise ValueError(f"training size {max(sizes)} exceeds the {cfg.n_train} available subjects")
    scheme = make_scheme(cfg)
    cases = _cases(cfg, scheme, cfg.n_train + cfg.n_val)
    subjects = [c.subject("fa") for c in cases]
    pool, vas = subjects[:cfg.n_train], subjects[cfg.n_train:]
    test = make_case(cfg, scheme, test_index(cfg))
    ref, mask = test.phantom.fa, test.phantom.mask
    rows = []
    for size in sizes:
        res = tr.train(pool[:size], vas, cfg.train_config("fa"))
        pred = res.model.predict(test.noisy, mask)
        s = metrics.evaluate_maps(pred, ref, mask)
        rows.append({"size": size, "psnr": s["psnr"], "ssim": s["ssim"], "nmse": s["nmse"],
                     "best_epoch": res.best_epoch, "final_train_loss": res.curve[-1][1]})
        log.info("size %d: psnr %.3f ssim %.4f", size, s["psnr"], s["ssim"])
    text = sweep_csv(rows)
    if outdir is not None:
        Path(outdir).mkdir(parents=True, exist_ok=True)
        (Path(outdir) / "training_size.csv").write_text(text)
    return rows, text


def sweep_csv(rows) -> str:
    def fmt(v):
        if isinstance(v, float):
            return "inf" if math.isinf(v) else repr(v)
        return str(v)
    lines = [",".join(SWEEP_COLUMNS)]
    lines += [",".join(fmt(r[c]) for c in SWEEP_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"
