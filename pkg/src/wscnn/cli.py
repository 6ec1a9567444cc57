"""Command-line front end: ``python -m wscnn <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. See FORMATS.md for file layouts.
"""

from __future__ import annotations

import argparse
import contextlib
import math
import sys
from pathlib import Path

import numpy as np

from . import dti, fusion, invnet, metrics, pipeline
from .config import PipelineConfig, from_entries, load_config, to_entries, write_config
from .errors import ConfigError, DataError, WscnnError
from .filterbank import BankParams, build_bank, littlewood_paley, lp_deviation, spatial_filters
from .io import read_image, read_keyvalue, read_rasters, write_csv, write_image, write_keyvalue, write_pgm, write_rasters
from .phantom import corrupt, make_phantom
from .scattering import load_stack, save_stack, scatter


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args) -> PipelineConfig:
    entries = read_keyvalue(args.config) if getattr(args, "config", None) else {}
    entries.update(_overrides(getattr(args, "set", None)))
    cfg = from_entries(entries)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _mask(args, shape) -> np.ndarray | None:
    if not args.mask:
        return None
    m, _ = read_image(args.mask)
    if m.shape != tuple(shape):
        raise DataError(f"mask extents {m.shape} do not match images {tuple(shape)}")
    return m > 0.5


def _read_set(path) -> tuple[np.ndarray, dict]:
    maps, meta = read_rasters(path)
    if not maps:
        raise DataError(f"{path}: no rasters")
    return np.stack(maps), meta


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    p = make_phantom(cfg.phantom)
    pipeline.write_series(out / "clean.wsc", p.images, pipeline.scheme_meta(p.scheme))
    write_image(out / "mask.wsc", p.mask.astype(np.float64), {"kind": "mask"})
    pipeline.write_tensor_field(out / "truth_tensor.wsc", p.tensors)
    write_image(out / "truth_helix.wsc", np.nan_to_num(p.helix), {"kind": "helix_deg"})
    write_config(out / pipeline.RESOLVED_CONFIG_NAME, cfg)
    pipeline.write_manifest(out, {"seed.phantom": str(cfg.phantom.seed)})
    return 0


def cmd_corrupt(args) -> int:
    cfg = _config(args)
    images, meta = _read_set(args.input)
    mask = _mask(args, images.shape[1:])
    out = _out_dir(args)
    series = corrupt(images, cfg.corruption, mask)
    rows = []
    meta = {k: v for k, v in meta.items() if k != "kind"}
    for rec in series.records:
        pipeline.write_series(out / f"td_{rec.td:02d}.wsc", series.tds[rec.td], meta)
        write_rasters(out / f"deform_td_{rec.td:02d}.wsc", [rec.deformation.dy, rec.deformation.dx],
                      {"kind": "deformation", "components": "dy,dx"})
        rows += [(rec.td, b.image, b.row, b.width, b.factor) for b in rec.bands]
    write_csv(out / "bands.csv", ["td", "image", "row", "width", "factor"], rows)
    write_config(out / pipeline.RESOLVED_CONFIG_NAME, cfg)
    pipeline.write_manifest(out, {"seed.corruption": str(cfg.corruption.seed)})
    return 0


def cmd_bank_dump(args) -> int:
    params = BankParams(J=args.J, L=args.L)
    bank = build_bank(args.height, args.width, params)
    out = _out_dir(args)
    psi, phi = spatial_filters(bank)
    for j in range(bank.J):
        for r in range(bank.L):
            write_pgm(out / f"psi_j{j}_r{r}.pgm", psi[j, r].real)
    write_pgm(out / "phi.pgm", phi)
    write_pgm(out / "littlewood_paley.pgm", np.fft.fftshift(littlewood_paley(bank)))
    write_keyvalue(out / "bank.txt", {"height": bank.height, "width": bank.width, "J": bank.J, "L": bank.L,
                                      "sigma0": repr(params.sigma0), "xi0": repr(params.xi0),
                                      "slant": repr(params.slant_value),
                                      "gains": ",".join(repr(float(g)) for g in bank.gains),
                                      "lp_deviation": repr(lp_deviation(bank))})
    return 0


def cmd_scatter(args) -> int:
    images, meta = _read_set(args.input)
    mask = _mask(args, images.shape[1:])
    bank = build_bank(*images.shape[1:], BankParams(J=args.J, L=args.L))
    stacks = [scatter(img, bank, mask) for img in images]
    if len(stacks) == 1 and not args.out.endswith("/"):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_stack(args.out, stacks[0])
        return 0
    out = _out_dir(args)
    for i, s in enumerate(stacks):
        save_stack(out / f"img_{i:02d}.wsc", s)
    return 0


def cmd_register(args) -> int:
    series = np.stack([_read_set(p)[0] for p in args.inputs])
    _, meta = _read_set(args.inputs[0])
    mask = _mask(args, series.shape[-2:])
    ref = args.reference_td if args.reference_td is not None else fusion.select_reference(series, mask)
    regmask = None if mask is None else pipeline.registration_mask(mask, args.margin)
    reg, res = fusion.register_series(series, ref, args.window, regmask)
    out = _out_dir(args)
    meta = {k: v for k, v in meta.items() if k != "kind"}
    for td in range(len(reg)):
        pipeline.write_series(out / f"td_{td:02d}.wsc", reg[td], meta)
    write_csv(out / "shifts.csv", ["td", "dx", "dy", "score", "reference"],
              [(td, r.dx, r.dy, r.score, int(td == ref)) for td, r in enumerate(res)])
    return 0


def cmd_fuse(args) -> int:
    stacks = [load_stack(p) for p in args.inputs]
    if args.reference_td is not None:
        if not 0 <= args.reference_td < len(stacks):
            raise DataError(f"--reference-td {args.reference_td} out of range for {len(stacks)} stacks")
        # max fusion is order-free; the reference only leads the fold and is recorded
        stacks.insert(0, stacks.pop(args.reference_td))
    fused = fusion.fuse_all(stacks)
    fused.extra = {"fused_from": str(len(stacks))}
    if args.reference_td is not None:
        fused.extra["reference_td"] = str(args.reference_td)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_stack(args.out, fused)
    return 0


def _dataset(root: Path) -> list[invnet.Sample]:
    stacks_dir, targets_dir = root / "stacks", root / "targets"
    if not stacks_dir.is_dir() or not targets_dir.is_dir():
        raise DataError(f"{root}: dataset needs 'stacks/' and 'targets/' subdirectories")
    samples = []
    for sp in sorted(stacks_dir.glob("*.wsc")):
        tp = targets_dir / sp.name
        if not tp.is_file():
            raise DataError(f"{sp}: no matching target {tp}")
        target, _ = read_image(tp)
        samples.append(invnet.Sample(load_stack(sp).maps, target))
    if not samples:
        raise DataError(f"{stacks_dir}: no stack files")
    return samples


def cmd_train(args) -> int:
    cfg = _config(args)
    samples = _dataset(Path(args.dataset))
    ckpt_dir = Path(args.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    adam, normalise = None, True
    if args.resume:
        model, adam, _ = invnet.load_model(args.resume, cfg.train)
        normalise = False
    else:
        model = invnet.build_model(cfg.network, cfg.pipeline.model_seed)
    res = invnet.train(model, samples, cfg.train, checkpoint_dir=ckpt_dir, adam=adam, normalise=normalise)
    invnet.save_model(ckpt_dir / "model.wsckpt", model, res.adam, source_shape=samples[0].target.shape)
    invnet.write_loss_history(ckpt_dir / "loss.csv", res.losses)
    write_config(ckpt_dir / pipeline.RESOLVED_CONFIG_NAME, cfg)
    return 0


def cmd_reconstruct(args) -> int:
    model, _, _ = invnet.load_model(args.checkpoint)
    stack = load_stack(args.input)
    img = invnet.reconstruct(model, stack)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_image(args.out, img, {"source": Path(args.input).name})
    if args.baseline:
        write_image(args.baseline, invnet.upsample_baseline(stack), {"source": Path(args.input).name})
    return 0


def cmd_dti(args) -> int:
    images, meta = _read_set(args.input)
    scheme = pipeline.scheme_from_meta(meta) if "directions" in meta else dti.default_scheme(len(images) - 1)
    mask = _mask(args, images.shape[1:])
    if mask is None:
        mask = images[0] > 0
    tf = dti.fit_tensor(images[0], images[1:], scheme, mask)
    frame = dti.frame_from_mask(mask)
    ha, ta = dti.helix_transverse(tf.e1, frame)
    out = _out_dir(args)
    maps = {"fa": tf.fa, "md": tf.md, "ha": ha, "ta": ta}
    for key, m in maps.items():
        write_image(out / f"{key}.wsc", np.nan_to_num(m), {"kind": key})
    pipeline.write_tensor_field(out / "tensor.wsc", tf)
    rows = [(r, c, int(tf.fit_ok[r, c]), *[None if np.isnan(maps[k][r, c]) else float(maps[k][r, c])
                                           for k in ("fa", "md", "ha", "ta")])
            for r, c in zip(*np.nonzero(mask))]
    write_csv(out / "voxels.csv", ["row", "col", "fit_ok", "fa", "md", "ha", "ta"], rows)
    summary = {"voxels": int(mask.sum()), "fit_failures": int((~tf.fit_ok[mask]).sum()),
               "mean_fa": repr(float(np.nanmean(tf.fa[mask])))}
    if args.helix_truth:
        truth, _ = read_image(args.helix_truth)
        summary["ha_mae_deg"] = repr(float(np.nanmean(np.abs(ha - truth)[mask])))
    write_keyvalue(out / "summary.txt", summary)
    return 0


def cmd_metrics(args) -> int:
    test, _ = _read_set(args.test)
    ref, _ = _read_set(args.reference)
    if test.shape != ref.shape:
        raise DataError(f"test set {test.shape} and reference set {ref.shape} differ")
    mask = _mask(args, ref.shape[1:])
    m = np.ones(ref.shape[1:], bool) if mask is None else mask
    peak = args.peak if args.peak is not None else float(ref[:, m].max())
    noise = ~pipeline.registration_mask(m, args.margin)
    rows = []
    for i, (a, b) in enumerate(zip(test, ref)):
        snr = metrics.snr(a, m, noise) if noise.any() and a[m].mean() > 0 else None
        rows.append((f"img_{i:02d}", metrics.psnr(a, b, peak, m), metrics.ssim(a, b, peak, m), snr))
    write_csv(args.out, ["pair", "psnr_db", "ssim", "snr_db"], rows)
    return 0


def cmd_bullseye(args) -> int:
    values, _ = read_image(args.input)
    mask = _mask(args, values.shape)
    if mask is None:
        raise ConfigError("bullseye needs --mask")
    b = dti.aha_bullseye(values, mask, dti.frame_from_mask(mask), args.segments, args.layers)
    write_csv(args.out, ["segment", "layer", "mean", "count"], b.rows())
    return 0


def cmd_tmip(args) -> int:
    sets = [_read_set(p)[0] for p in args.inputs]
    shape = sets[0].shape
    for p, s in zip(args.inputs, sets):
        if s.shape != shape:
            raise DataError(f"{p}: extents {s.shape} differ from {shape}")
    out = np.stack([fusion.tmip_baseline([s[i] for s in sets]) for i in range(shape[0])])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_series(args.out, out)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    res = pipeline.run_pipeline(cfg, args.out, log=lambda msg: print(msg, file=sys.stderr))
    s = res.summary
    print(f"wscnn psnr {s['wscnn.psnr']:.3f} dB | upsample {s['upsample.psnr']:.3f} dB | "
          f"corrupted mean {s['corrupted.mean_psnr']:.3f} dB | median deviation "
          f"{s['wscnn.median_deviation']:.2f} deg (best corrupted TD {s['corrupted.min_median_deviation']:.2f})")
    return 0


def cmd_config(args) -> int:
    cfg = _config(args)
    if args.out:
        write_config(args.out, cfg)
    else:
        for k, v in to_entries(cfg).items():
            print(f"{k}={v}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="set every seed (phantom, corruption, training, init)")
    p.add_argument("--mask", default=None, help="mask raster (nonzero = ROI)")
    p.add_argument("--out", required=out_required, default=None, help="output file or directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count; 1 gives bitwise reproducibility")


def _configurable(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wscnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic cardiac phantom")
    phsub = ph.add_subparsers(dest="phantom_command", required=True)
    g = phsub.add_parser("gen", help="generate clean b0 + DW images, mask and ground truth")
    _common(g)
    _configurable(g)
    g.set_defaults(func=cmd_phantom_gen)
    for parent, name in ((phsub, "corrupt"), (sub, "corrupt")):
        c = parent.add_parser(name, help="simulate motion-corrupted trigger delays")
        c.add_argument("input", help="clean image set")
        _common(c)
        _configurable(c)
        c.set_defaults(func=cmd_corrupt)

    b = sub.add_parser("bank", help="filter bank tools")
    bsub = b.add_subparsers(dest="bank_command", required=True)
    d = bsub.add_parser("dump", help="export spatial filters as PGM")
    d.add_argument("--height", type=int, default=96)
    d.add_argument("--width", type=int, default=160)
    d.add_argument("--J", type=int, default=2)
    d.add_argument("--L", type=int, default=10)
    _common(d)
    d.set_defaults(func=cmd_bank_dump)

    s = sub.add_parser("scatter", help="scattering stacks of an image or image set")
    s.add_argument("input")
    s.add_argument("--J", type=int, default=2)
    s.add_argument("--L", type=int, default=10)
    _common(s)
    s.set_defaults(func=cmd_scatter)

    r = sub.add_parser("register", help="translation-register TD image sets to a reference TD")
    r.add_argument("inputs", nargs="+", help="one image set per TD")
    r.add_argument("--reference-td", type=int, default=None)
    r.add_argument("--window", type=int, default=8)
    r.add_argument("--margin", type=int, default=8, help="ROI dilation (px) for the NCC region")
    _common(r)
    r.set_defaults(func=cmd_register)

    f = sub.add_parser("fuse", help="maximum-selection fusion of feature stacks")
    f.add_argument("inputs", nargs="+")
    f.add_argument("--reference-td", type=int, default=None, help="index of the reference stack (recorded)")
    _common(f)
    f.set_defaults(func=cmd_fuse)

    t = sub.add_parser("train", help="train the inverse-scattering network")
    t.add_argument("--dataset", required=True, help="directory with stacks/ and targets/")
    t.add_argument("--checkpoint-dir", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    _common(t, out_required=False)
    _configurable(t)
    t.set_defaults(func=cmd_train)

    rc = sub.add_parser("reconstruct", help="image from a (fused) stack")
    rc.add_argument("input")
    rc.add_argument("--checkpoint", required=True)
    rc.add_argument("--baseline", default=None, help="also write the bilinear S0 baseline here")
    _common(rc)
    rc.set_defaults(func=cmd_reconstruct)

    dt = sub.add_parser("dti", help="tensor fit and FA/MD/HA/TA maps")
    dt.add_argument("input", help="b0-first image set")
    dt.add_argument("--helix-truth", default=None, help="prescribed helix raster for an MAE report")
    _common(dt)
    dt.set_defaults(func=cmd_dti)

    m = sub.add_parser("metrics", help="PSNR / SSIM / SNR per image")
    m.add_argument("--test", required=True)
    m.add_argument("--reference", required=True)
    m.add_argument("--peak", type=float, default=None)
    m.add_argument("--margin", type=int, default=8, help="ROI dilation excluded from the SNR noise region")
    _common(m)
    m.set_defaults(func=cmd_metrics)

    be = sub.add_parser("bullseye", help="AHA segment x layer means of a scalar raster")
    be.add_argument("input")
    be.add_argument("--segments", type=int, default=6)
    be.add_argument("--layers", type=int, default=3)
    _common(be)
    be.set_defaults(func=cmd_bullseye)

    tm = sub.add_parser("tmip", help="per-pixel maximum across TD image sets")
    tm.add_argument("inputs", nargs="+")
    _common(tm)
    tm.set_defaults(func=cmd_tmip)

    pl = sub.add_parser("pipeline", help="run the full phantom workflow")
    _common(pl)
    _configurable(pl)
    pl.set_defaults(func=cmd_pipeline)

    cf = sub.add_parser("config", help="print or write the resolved configuration")
    _common(cf, out_required=False)
    _configurable(cf)
    cf.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    limit = contextlib.nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(args.threads)
    try:
        with limit:
            return args.func(args)
    except WscnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
