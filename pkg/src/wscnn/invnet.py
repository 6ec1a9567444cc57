"""Encoder-decoder network mapping scattering stacks back to DW images.

Architecture (all convolutions ``kernel_size`` x ``kernel_size``, stride 1,
"same" zero padding)::

    Enblock x enblocks : conv -> ReLU -> resblocks        widths b, 2b, 4b, ...
    Deblock x deblocks : resblocks -> deconv(2x) -> ReLU  widths halve
    tail               : resblocks -> conv to 1 channel -> ReLU

A resblock is ``x + conv(relu(conv(x)))``. The network runs on normalised
data: each input channel is divided by its training-set RMS and the output
is multiplied by the training-set target peak. Both scales live in the
checkpoint next to the weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, DataError, NumericalError
from .scattering import FeatureStack


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 21
    base_channels: int = 64
    enblocks: int = 3
    deblocks: int = 2
    resblocks_per_block: int = 3
    kernel_size: int = 3
    output_scale: int = 4
    residual_init: float = 0.1  # init gain of the second conv in each resblock
    output_init: float = 0.1  # init gain of the final conv

    def __post_init__(self):
        for name in ("in_channels", "base_channels", "enblocks", "deblocks", "resblocks_per_block"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.output_scale != 2 ** self.deblocks:
            raise ConfigError(f"output_scale {self.output_scale} must equal 2**deblocks = {2 ** self.deblocks}")
        if self.residual_init < 0 or self.output_init <= 0:
            raise ConfigError("residual_init must be >= 0 and output_init > 0")

    def widths(self) -> tuple[list[int], list[int]]:
        enc = [self.base_channels * 2 ** i for i in range(self.enblocks)]
        dec, w = [], enc[-1]
        for _ in range(self.deblocks):
            w = max(1, w // 2)
            dec.append(w)
        return enc, dec


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 1000
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


@dataclass(eq=False)
class Sample:
    input: np.ndarray   # (C, h, w)
    target: np.ndarray  # (H, W)

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=np.float32)
        self.target = np.asarray(self.target, dtype=np.float32)
        if self.input.ndim != 3 or self.target.ndim != 2:
            raise DataError("a sample needs a (C, h, w) input and an (H, W) target")


def center_crop_offsets(out_hw: tuple[int, int], target_hw: tuple[int, int]) -> tuple[int, int]:
    oh, ow = out_hw
    th, tw = target_hw
    if th > oh or tw > ow:
        raise DataError(f"target extents {target_hw} exceed network output {out_hw}")
    return ((oh - th) // 2, (ow - tw) // 2)


class Model:
    """Network parameters plus the normalisation scales and architecture."""

    def __init__(self, cfg: NetworkConfig, params: dict[str, tc.Tensor],
                 input_scale: np.ndarray | None = None, output_scale: float = 1.0):
        self.cfg = cfg
        self.params = params
        self.input_scale = (np.ones(cfg.in_channels, dtype=np.float64) if input_scale is None
                            else np.asarray(input_scale, dtype=np.float64))
        self.output_scale = float(output_scale)

    @property
    def names(self) -> list[str]:
        return list(self.params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "Model":
        params = {k: tc.parameter(v.data.astype(dtype), k) for k, v in self.params.items()}
        return Model(self.cfg, params, self.input_scale.copy(), self.output_scale)

    # -- graph -----------------------------------------------------------

    def _conv(self, x, name: str, relu: bool = False):
        pad = self.cfg.kernel_size // 2
        y = tc.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], 1, pad)
        return tc.relu(y) if relu else y

    def _resblocks(self, x, prefix: str):
        for k in range(self.cfg.resblocks_per_block):
            h = self._conv(x, f"{prefix}.res{k}.conv1", relu=True)
            h = self._conv(h, f"{prefix}.res{k}.conv2")
            x = tc.add(x, h)
        return x

    def graph(self, x) -> tc.Tensor:
        """Normalised-domain network on an (N, C, h, w) tensor -> (N, 1, 4h, 4w)."""
        cfg = self.cfg
        if x.shape[1] != cfg.in_channels:
            raise DataError(f"stack has {x.shape[1]} channels, model expects {cfg.in_channels}")
        for i in range(cfg.enblocks):
            x = self._conv(x, f"enc{i}.conv", relu=True)
            x = self._resblocks(x, f"enc{i}")
        for i in range(cfg.deblocks):
            x = self._resblocks(x, f"dec{i}")
            x = tc.relu(tc.deconv2d(x, self.params[f"dec{i}.deconv.w"], self.params[f"dec{i}.deconv.b"], 2, 0))
        x = self._resblocks(x, "tail")
        return self._conv(x, "out", relu=True)

    def normalise_inputs(self, maps: np.ndarray) -> np.ndarray:
        maps = np.asarray(maps, dtype=np.float64)
        if maps.shape[0] != self.cfg.in_channels:
            raise DataError(f"stack has {maps.shape[0]} channels, model expects {self.cfg.in_channels}")
        return (maps / self.input_scale.reshape(-1, 1, 1)).astype(self.dtype)

    def predict(self, maps: np.ndarray, target_hw: tuple[int, int] | None = None) -> np.ndarray:
        """Full-scale image(s) from (C, h, w) or (N, C, h, w) maps, centre-cropped to ``target_hw``."""
        maps = np.asarray(maps)
        single = maps.ndim == 3
        if single:
            maps = maps[None]
        if maps.ndim != 4:
            raise DataError(f"expected (C, h, w) or (N, C, h, w) maps, got shape {maps.shape}")
        x = np.stack([self.normalise_inputs(m) for m in maps])
        out = self.graph(tc.Tensor(x)).data[:, 0].astype(np.float64) * self.output_scale
        if target_hw is not None:
            top, left = center_crop_offsets(out.shape[1:], target_hw)
            out = out[:, top:top + target_hw[0], left:left + target_hw[1]]
        return out[0] if single else out


def _layer_shapes(cfg: NetworkConfig):
    """(name, weight shape, fan_in, gain) in forward order."""
    k = cfg.kernel_size
    enc, dec = cfg.widths()
    out = []

    def res(prefix, ch):
        for r in range(cfg.resblocks_per_block):
            out.append((f"{prefix}.res{r}.conv1", (ch, ch, k, k), ch * k * k, 1.0))
            out.append((f"{prefix}.res{r}.conv2", (ch, ch, k, k), ch * k * k, cfg.residual_init))

    prev = cfg.in_channels
    for i, ch in enumerate(enc):
        out.append((f"enc{i}.conv", (ch, prev, k, k), prev * k * k, 1.0))
        res(f"enc{i}", ch)
        prev = ch
    for i, ch in enumerate(dec):
        res(f"dec{i}", prev)
        # deconv kernels are (C_in, C_out, 2, 2); each output pixel sees C_in taps
        out.append((f"dec{i}.deconv", (prev, ch, 2, 2), prev, 1.0))
        prev = ch
    res("tail", prev)
    out.append(("out", (1, prev, k, k), prev * k * k, cfg.output_init))
    return out


def build_model(cfg: NetworkConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    """He-normal weights (std sqrt(2 / fan_in), scaled by the layer gain), zero biases."""
    cfg = cfg or NetworkConfig()
    rng = np.random.default_rng(seed)
    params: dict[str, tc.Tensor] = {}
    for name, shape, fan_in, gain in _layer_shapes(cfg):
        w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in) * gain
        n_out = shape[1] if name.endswith("deconv") else shape[0]
        params[name + ".w"] = tc.parameter(w.astype(dtype), name + ".w")
        params[name + ".b"] = tc.parameter(np.zeros(n_out, dtype=dtype), name + ".b")
    return Model(cfg, params)


def parameter_count(cfg: NetworkConfig) -> int:
    total = 0
    for name, shape, _, _ in _layer_shapes(cfg):
        total += int(np.prod(shape)) + (shape[1] if name.endswith("deconv") else shape[0])
    return total


def forward(model: Model, stack: FeatureStack | np.ndarray) -> np.ndarray:
    """Network output at ``output_scale`` times the stack extents (no cropping)."""
    maps = stack.maps if isinstance(stack, FeatureStack) else np.asarray(stack)
    if maps.ndim != 3:
        raise DataError(f"expected (C, h, w) maps, got shape {maps.shape}")
    return model.predict(maps)


def reconstruct(model: Model, stack: FeatureStack) -> np.ndarray:
    """Network output centre-cropped to the stack's source extents."""
    return model.predict(stack.maps, stack.source_shape)


def upsample_baseline(stack: FeatureStack | np.ndarray, factor: int = 4,
                      target_hw: tuple[int, int] | None = None, dc_gain: float = 1.0) -> np.ndarray:
    """Bilinear upsampling of S0 (sample i sits at pixel factor*i, edges clamped), divided by ``dc_gain``."""
    s0 = stack.s0 if isinstance(stack, FeatureStack) else np.asarray(stack)
    if target_hw is None:
        target_hw = (stack.source_shape if isinstance(stack, FeatureStack)
                     else (s0.shape[0] * factor, s0.shape[1] * factor))
    h, w = s0.shape

    def axis(n_out, n_in):
        pos = np.clip(np.arange(n_out) / factor, 0, n_in - 1)
        i0 = np.minimum(np.floor(pos).astype(int), max(n_in - 2, 0))
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    r0, r1, fr = axis(target_hw[0], h)
    c0, c1, fc = axis(target_hw[1], w)
    fr, fc = fr[:, None], fc[None, :]
    top = (1 - fc) * s0[r0][:, c0] + fc * s0[r0][:, c1]
    bot = (1 - fc) * s0[r1][:, c0] + fc * s0[r1][:, c1]
    return ((1 - fr) * top + fr * bot) / dc_gain


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def fit_normalisation(model: Model, dataset: Sequence[Sample]) -> None:
    """Set per-channel input RMS and target peak from ``dataset`` (unit where degenerate)."""
    inputs = np.stack([s.input for s in dataset]).astype(np.float64)
    if inputs.shape[1] != model.cfg.in_channels:
        raise DataError(f"samples have {inputs.shape[1]} channels, model expects {model.cfg.in_channels}")
    rms = np.sqrt(np.mean(inputs ** 2, axis=(0, 2, 3)))
    # rounded through float32 so a checkpoint reload reproduces predictions exactly
    model.input_scale = np.where(rms > 0, rms, 1.0).astype(np.float32).astype(np.float64)
    peak = max(float(np.max(s.target)) for s in dataset)
    model.output_scale = float(np.float32(peak if peak > 0 else 1.0))


@dataclass
class TrainResult:
    losses: list[float]
    adam: tc.AdamState
    checkpoints: list[Path] = field(default_factory=list)


class _Batcher:
    """Seeded reshuffle-every-epoch index stream."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self.order = np.empty(0, dtype=int)

    def next(self) -> np.ndarray:
        if len(self.order) < self.batch:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        idx, self.order = self.order[:self.batch], self.order[self.batch:]
        return idx


def train(model: Model, dataset: Sequence[Sample], tcfg: TrainConfig,
          checkpoint_dir=None, adam: tc.AdamState | None = None, normalise: bool = True,
          progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Minibatch Adam on the mean squared error in the normalised domain.

    With ``normalise`` the input/output scales are refitted from ``dataset``
    before the first step (skip it when resuming). Every sample must share
    one input and one target extent. A non-finite loss raises
    :class:`NumericalError` naming the iteration.
    """
    if not dataset:
        raise DataError("training needs at least one sample")
    in_shape, tgt_shape = dataset[0].input.shape, dataset[0].target.shape
    for i, s in enumerate(dataset):
        if s.input.shape != in_shape or s.target.shape != tgt_shape:
            raise DataError(f"sample {i} extents differ from sample 0")
    out_hw = (in_shape[1] * model.cfg.output_scale, in_shape[2] * model.cfg.output_scale)
    top, left = center_crop_offsets(out_hw, tgt_shape)
    if normalise:
        fit_normalisation(model, dataset)

    x_all = np.stack([model.normalise_inputs(s.input) for s in dataset])
    y_all = (np.stack([s.target for s in dataset]).astype(np.float64) / model.output_scale)[:, None]
    y_all = y_all.astype(model.dtype)

    names = model.names
    params = [model.params[n] for n in names]
    if adam is None:
        adam = tc.AdamState.for_params([p.data for p in params], tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    batcher = _Batcher(len(dataset), tcfg.batch_size, tcfg.seed)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    result = TrainResult([], adam)

    for it in range(1, tcfg.iterations + 1):
        idx = batcher.next()
        model.zero_grad()
        pred = model.graph(tc.Tensor(x_all[idx]))
        if pred.shape[2:] != tgt_shape:
            pred = tc.crop2d(pred, top, left, *tgt_shape)
        loss = tc.mse_loss(pred, tc.Tensor(y_all[idx]))
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite training loss at iteration {it}")
        tc.backward(loss)
        tc.adam_step([p.data for p in params], [p.grad for p in params], adam)
        result.losses.append(value)
        if progress is not None:
            progress(it, value)
        if ckpt_dir is not None and tcfg.checkpoint_every and it % tcfg.checkpoint_every == 0:
            path = ckpt_dir / f"checkpoint_{it:06d}.wsckpt"
            save_model(path, model, adam, source_shape=tgt_shape)
            result.checkpoints.append(path)
    return result


def write_loss_history(path, losses: Sequence[float], start: int = 1) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses, start):
            w.writerow([i, repr(float(v))])


def training_floor_psnr(model: Model, dataset: Sequence[Sample]) -> float:
    """Lowest per-sample PSNR (peak = sample mask-free maximum) over ``dataset``."""
    from .metrics import psnr

    vals = []
    for s in dataset:
        pred = model.predict(s.input, s.target.shape)
        if float(np.max(s.target)) > 0:
            vals.append(psnr(pred, s.target))
    return float(min(vals)) if vals else math.inf


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CONFIG_PREFIX = "config."


def save_model(path, model: Model, adam: tc.AdamState | None = None,
               source_shape: tuple[int, int] | None = None) -> None:
    entries: dict[str, np.ndarray] = {n: p.data for n, p in model.params.items()}
    entries["norm.input"] = model.input_scale
    entries["norm.output"] = np.array([model.output_scale])
    for f in fields(model.cfg):
        entries[_CONFIG_PREFIX + f.name] = np.array([getattr(model.cfg, f.name)], dtype=np.float64)
    if source_shape is not None:
        entries["meta.target_shape"] = np.array(source_shape, dtype=np.float64)
    tc.save_checkpoint(path, entries, adam, names=model.names if adam is not None else None)


def load_model(path, tcfg: TrainConfig | None = None):
    """Return ``(model, adam_state_or_None, target_shape_or_None)`` from a checkpoint."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint not found: {p}")
    entries = tc.load_checkpoint(p)
    kwargs = {}
    for f in fields(NetworkConfig):
        key = _CONFIG_PREFIX + f.name
        if key not in entries:
            raise DataError(f"{p}: checkpoint lacks {key}")
        v = float(entries[key][0])
        # config scalars pass through float32; 7 significant digits recover the written value
        kwargs[f.name] = float(f"{v:.7g}") if f.type in ("float", float) else int(round(v))
    cfg = NetworkConfig(**kwargs)
    params = {}
    for name, shape, _, _ in _layer_shapes(cfg):
        for suffix in (".w", ".b"):
            key = name + suffix
            if key not in entries:
                raise DataError(f"{p}: checkpoint lacks parameter {key}")
            params[key] = tc.parameter(entries[key].copy(), key)
    if params[_layer_shapes(cfg)[0][0] + ".w"].shape != _layer_shapes(cfg)[0][1]:
        raise DataError(f"{p}: parameter shapes do not match the stored configuration")
    model = Model(cfg, params, entries["norm.input"].astype(np.float64), float(entries["norm.output"][0]))
    tcfg = tcfg or TrainConfig()
    adam = tc.adam_from_checkpoint(entries, model.names, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    target = entries.get("meta.target_shape")
    target_shape = None if target is None else (int(target[0]), int(target[1]))
    return model, adam, target_shape


def config_dict(cfg) -> dict:
    return asdict(cfg)
