"""End-to-end phantom workflow: generate, corrupt, register, scatter, train,
fuse, reconstruct, fit tensors, score and summarise.

Every stage writes its artifacts under one output directory; the final
manifest lists each file with its SHA-256 so reruns can be compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import binary_dilation

from . import dti, fusion, invnet, metrics
from .config import PipelineConfig, write_config
from .errors import DataError, WscnnError
from .filterbank import build_bank
from .io import read_rasters, sha256_file, write_csv, write_keyvalue, write_rasters
from .phantom import Phantom, corrupt, make_phantom
from .scattering import FeatureStack, load_stack, save_stack, scatter

MANIFEST_NAME = "manifest.txt"
RESOLVED_CONFIG_NAME = "config.resolved.txt"


class StageError(WscnnError):
    """A pipeline stage failed; carries the stage name and the cause's exit code."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.exit_code = getattr(cause, "exit_code", 1)


# ---------------------------------------------------------------------------
# image-set containers
# ---------------------------------------------------------------------------

def write_series(path, images: np.ndarray, meta: dict | None = None) -> None:
    """A b0-first set of images as one raster container."""
    write_rasters(path, list(np.asarray(images)), {"kind": "image_set", **(meta or {})})


def read_series(path) -> tuple[np.ndarray, dict[str, str]]:
    maps, meta = read_rasters(path)
    if not maps:
        raise DataError(f"{path}: empty image set")
    return np.stack(maps), meta


def scheme_meta(scheme: dti.GradientScheme) -> dict[str, str]:
    dirs = ";".join(",".join(repr(float(v)) for v in d) for d in scheme.directions)
    return {"b": repr(float(scheme.b)), "directions": dirs}


def scheme_from_meta(meta: dict[str, str]) -> dti.GradientScheme:
    try:
        dirs = [[float(v) for v in d.split(",")] for d in meta["directions"].split(";")]
        return dti.GradientScheme(float(meta["b"]), np.array(dirs))
    except KeyError as exc:
        raise DataError(f"image set metadata lacks {exc}") from exc


def write_tensor_field(path, tf: dti.TensorField) -> None:
    maps = [tf.components[..., k] for k in range(6)] + [tf.fit_ok.astype(np.float64)]
    write_rasters(path, maps, {"kind": "tensor_field", "components": ",".join(dti.COMPONENTS) + ",fit_ok"})


def read_tensor_field(path) -> dti.TensorField:
    maps, meta = read_rasters(path)
    if meta.get("kind") != "tensor_field" or len(maps) != 7:
        raise DataError(f"{path}: not a tensor field file")
    comp = np.stack(maps[:6], axis=-1)
    return dti.TensorField.from_components(comp, maps[6] > 0.5)


# ---------------------------------------------------------------------------
# analysis helpers (shared by the CLI and the acceptance suite)
# ---------------------------------------------------------------------------

def registration_mask(mask: np.ndarray, margin: int) -> np.ndarray:
    """ROI dilated by ``margin`` px so edges (not only the flat interior) drive NCC."""
    mask = np.asarray(mask, bool)
    return binary_dilation(mask, iterations=margin) if margin > 0 else mask


def fibre_deviation(tf: dti.TensorField, truth: dti.TensorField, mask: np.ndarray) -> np.ndarray:
    """Per-voxel deviation angles over ``mask``; failed fits count as 90 degrees."""
    dev = dti.deviation_angle(tf.e1, truth.e1)
    dev = np.where(tf.fit_ok, dev, 90.0)
    return dev[np.asarray(mask, bool)]


def set_scores(images: np.ndarray, clean: np.ndarray, mask: np.ndarray, peak: float) -> tuple[float, float]:
    """Mean PSNR and SSIM over a b0-first image set against its clean counterpart."""
    p = [metrics.psnr(a, b, peak, mask) for a, b in zip(images, clean)]
    s = [metrics.ssim(a, b, peak, mask) for a, b in zip(images, clean)]
    finite = [v for v in p if math.isfinite(v)]
    return (float(np.mean(finite)) if finite else math.inf), float(np.mean(s))


def s1_energy(stacks) -> float:
    return float(sum(s.energy(first_order_only=True) for s in stacks))


@dataclass
class PipelineResult:
    out_dir: Path
    summary: dict[str, float] = field(default_factory=dict)
    manifest: dict[str, str] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)


def _rel(out: Path, p: Path) -> str:
    return p.relative_to(out).as_posix()


def write_manifest(out: Path, extra: dict[str, str] | None = None) -> dict[str, str]:
    entries = dict(extra or {})
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME:
            entries[f"sha256.{_rel(out, p)}"] = sha256_file(p)
    write_keyvalue(out / MANIFEST_NAME, entries)
    return entries


# ---------------------------------------------------------------------------
# the workflow
# ---------------------------------------------------------------------------

def run_pipeline(cfg: PipelineConfig, out_dir, log: Callable[[str], None] | None = None) -> PipelineResult:
    """Run every stage, writing artifacts and a hash manifest under ``out_dir``.

    A failing stage raises :class:`StageError` naming it; files from earlier
    stages are left in place.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    say = log or (lambda msg: None)
    write_config(out / RESOLVED_CONFIG_NAME, cfg)
    result = PipelineResult(out)
    state: dict = {}

    def stage(name):
        def wrap(fn):
            say(f"[{name}]")
            d = out / name
            d.mkdir(exist_ok=True)
            try:
                fn(d)
            except StageError:
                raise
            except (WscnnError, ValueError, ArithmeticError, OSError) as exc:
                raise StageError(name, exc) from exc
            return fn
        return wrap

    @stage("phantom")
    def _(d):
        p = make_phantom(cfg.phantom)
        state["phantom"] = p
        write_series(d / "clean.wsc", p.images, scheme_meta(p.scheme))
        write_rasters(d / "mask.wsc", [p.mask.astype(np.float64)], {"kind": "mask"})
        write_tensor_field(d / "truth_tensor.wsc", p.tensors)
        write_rasters(d / "truth_helix.wsc", [np.nan_to_num(p.helix)], {"kind": "helix_deg"})

    p: Phantom = state["phantom"]
    mask = p.mask
    peak = float(p.images[:, mask].max())

    @stage("corrupt")
    def _(d):
        series = corrupt(p.images, cfg.corruption, mask)
        state["series"] = series
        rows = []
        for rec in series.records:
            write_series(d / f"td_{rec.td:02d}.wsc", series.tds[rec.td], scheme_meta(p.scheme))
            write_rasters(d / f"deform_td_{rec.td:02d}.wsc", [rec.deformation.dy, rec.deformation.dx],
                          {"kind": "deformation", "components": "dy,dx"})
            rows += [(rec.td, b.image, b.row, b.width, b.factor) for b in rec.bands]
        write_csv(d / "bands.csv", ["td", "image", "row", "width", "factor"], rows)

    tds = state["series"].tds

    @stage("register")
    def _(d):
        ref = cfg.pipeline.reference_td
        if ref is None:
            ref = fusion.select_reference(tds, mask)
        reg, res = fusion.register_series(tds, ref, cfg.pipeline.registration_window,
                                          registration_mask(mask, cfg.pipeline.registration_margin))
        state["registered"] = reg
        state["reference_td"] = ref
        for td in range(len(reg)):
            write_series(d / f"td_{td:02d}.wsc", reg[td], scheme_meta(p.scheme))
        write_csv(d / "shifts.csv", ["td", "dx", "dy", "score", "reference"],
                  [(td, r.dx, r.dy, r.score, int(td == ref)) for td, r in enumerate(res)])

    reg = state["registered"]
    bank = build_bank(cfg.phantom.height, cfg.phantom.width, cfg.bank)

    @stage("scatter")
    def _(d):
        stacks = [[scatter(img, bank) for img in td] for td in reg]
        state["stacks"] = stacks
        for td, row in enumerate(stacks):
            for i, s in enumerate(row):
                save_stack(d / f"td_{td:02d}_img_{i:02d}.wsc", s)

    stacks = state["stacks"]

    @stage("train")
    def _(d):
        if cfg.pipeline.train_enabled:
            dataset = [invnet.Sample(s.maps, reg[td, i]) for td, row in enumerate(stacks) for i, s in enumerate(row)]
            model = invnet.build_model(cfg.network, cfg.pipeline.model_seed)
            res = invnet.train(model, dataset, cfg.train, checkpoint_dir=d,
                               progress=lambda it, loss: say(f"  iteration {it} loss {loss:.6g}")
                               if it % 100 == 0 else None)
            invnet.save_model(d / "model.wsckpt", model, res.adam, source_shape=reg.shape[-2:])
            invnet.write_loss_history(d / "loss.csv", res.losses)
            result.losses = res.losses
            state["model"] = model
        else:
            path = Path(cfg.pipeline.checkpoint)
            if not path.is_file():
                raise DataError(f"checkpoint not found: {path} (training is disabled)")
            state["model"], _, _ = invnet.load_model(path)

    model = state["model"]

    @stage("fuse")
    def _(d):
        fused = [fusion.fuse_all([stacks[td][i] for td in range(len(stacks))]) for i in range(reg.shape[1])]
        state["fused"] = fused
        for i, s in enumerate(fused):
            save_stack(d / f"img_{i:02d}.wsc", s)

    fused: list[FeatureStack] = state["fused"]

    @stage("reconstruct")
    def _(d):
        wscnn = np.stack([invnet.reconstruct(model, s) for s in fused])
        upsample = np.stack([invnet.upsample_baseline(s, dc_gain=float(bank.phi_hat[0, 0])) for s in fused])
        tmip = np.stack([fusion.tmip_baseline(reg[:, i]) for i in range(reg.shape[1])])
        state["recon"] = {"wscnn": wscnn, "upsample": upsample, "tmip": tmip}
        for name, imgs in state["recon"].items():
            write_series(d / f"{name}.wsc", imgs, scheme_meta(p.scheme))

    recon = state["recon"]

    @stage("dti")
    def _(d):
        fits = {}
        for name, imgs in recon.items():
            fits[name] = dti.fit_tensor(imgs[0], imgs[1:], p.scheme, mask)
        for td in range(len(reg)):
            fits[f"td_{td:02d}"] = dti.fit_tensor(reg[td, 0], reg[td, 1:], p.scheme, mask)
        state["fits"] = fits
        frame = dti.frame_from_mask(mask)
        state["frame"] = frame
        tf = fits["wscnn"]
        ha, ta = dti.helix_transverse(tf.e1, frame)
        state["wscnn_maps"] = {"fa": tf.fa, "md": tf.md, "ha": ha, "ta": ta}
        for key, m in state["wscnn_maps"].items():
            write_rasters(d / f"wscnn_{key}.wsc", [np.nan_to_num(m)], {"kind": key})
        write_tensor_field(d / "wscnn_tensor.wsc", tf)
        dev = dti.deviation_angle(tf.e1, p.tensors.e1)
        rows = []
        for r, c in zip(*np.nonzero(mask)):
            vals = [state["wscnn_maps"][k][r, c] for k in ("fa", "md", "ha", "ta")] + [dev[r, c]]
            rows.append((r, c, int(tf.fit_ok[r, c]), *[None if np.isnan(v) else float(v) for v in vals]))
        write_csv(d / "wscnn_voxels.csv", ["row", "col", "fit_ok", "fa", "md", "ha", "ta", "deviation"], rows)

    fits = state["fits"]

    @stage("metrics")
    def _(d):
        clean = p.images
        noise = ~registration_mask(mask, cfg.pipeline.registration_margin)
        rows, summary = [], {}
        sets = {**recon, **{f"td_{td:02d}": reg[td] for td in range(len(reg))}}
        for name, imgs in sets.items():
            for i, img in enumerate(imgs):
                rows.append((f"{name}/img_{i:02d}", metrics.psnr(img, clean[i], peak, mask),
                             metrics.ssim(img, clean[i], peak, mask),
                             metrics.snr(img, mask, noise) if img[mask].mean() > 0 else None))
            ps, ss = set_scores(imgs, clean, mask, peak)
            summary[f"{name}.psnr"] = ps
            summary[f"{name}.ssim"] = ss
            summary[f"{name}.median_deviation"] = float(np.median(fibre_deviation(fits[name], p.tensors, mask)))
        corrupted = [summary[f"td_{td:02d}.psnr"] for td in range(len(reg)) if td != 0]
        summary["corrupted.mean_psnr"] = float(np.mean(corrupted)) if corrupted else math.nan
        devs = [summary[f"td_{td:02d}.median_deviation"] for td in range(len(reg)) if td != 0]
        summary["corrupted.min_median_deviation"] = float(np.min(devs)) if devs else math.nan
        energies = [s1_energy(scatter(img, bank) for img in tds[td]) for td in range(len(tds))]
        for td, e in enumerate(energies):
            summary[f"td_{td:02d}.s1_energy"] = e
        summary["reference_td"] = float(state["reference_td"])
        write_csv(d / "metrics.csv", ["pair", "psnr_db", "ssim", "snr_db"], rows)
        write_csv(d / "summary.csv", ["quantity", "value"], sorted(summary.items()))
        result.summary = summary

    @stage("bullseye")
    def _(d):
        frame = state["frame"]
        for key in ("ha", "fa", "md", "ta"):
            b = dti.aha_bullseye(state["wscnn_maps"][key], mask, frame)
            write_csv(d / f"wscnn_{key}.csv", ["segment", "layer", "mean", "count"], b.rows())

    result.manifest = write_manifest(out, {"seed.phantom": str(cfg.phantom.seed),
                                           "seed.corruption": str(cfg.corruption.seed),
                                           "seed.train": str(cfg.train.seed),
                                           "seed.model": str(cfg.pipeline.model_seed)})
    say(f"manifest written to {out / MANIFEST_NAME}")
    return result


def load_stacks(paths) -> list[FeatureStack]:
    return [load_stack(p) for p in paths]
