"""Optimisation protocol: warmup + cosine schedule, Adam with weight decay, augmentation, epoch loop."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ddpnet import ops
from ddpnet.autodiff import Tape, backward
from ddpnet.data import IGNORE_LABEL, ConfusionMatrix, Sample
from ddpnet.errors import ConfigError, DDPNetError, UsageError
from ddpnet.tensor import Tensor

# ids of the named random substreams; each is seeded from [seed, stream id, *keys]
STREAM_INIT, STREAM_SHUFFLE, STREAM_AUGMENT, STREAM_DROPOUT = 0, 1, 2, 3


class TrainingDiverged(DDPNetError):
    """Raised when a batch loss stops being finite."""


def substream(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *keys])


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 5e-4
    epochs: int = 350
    warmup: int = 5

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.warmup < self.epochs:
            raise ConfigError(f"need 0 <= warmup < epochs, got warmup={self.warmup}, epochs={self.epochs}")


def lr_at(i: int, cfg: ScheduleConfig) -> float:
    """Learning rate for epoch ``i``: linear warmup, then half-cosine decay to zero at ``cfg.epochs``."""
    if not 0 <= i <= cfg.epochs:
        raise ConfigError(f"epoch {i} outside [0, {cfg.epochs}]")
    if i < cfg.warmup:
        return (i + 1) / cfg.warmup * lr_at(cfg.warmup, cfg)
    # i / epochs first, so the midpoint phase is exactly pi/2 and the endpoint exactly pi
    return 0.5 * (1.0 + math.cos(math.pi * (i / cfg.epochs))) * cfg.base_lr


# ------------------------------------------------------------------- adam


def decay_exempt(name: str) -> bool:
    """Batch-norm scale/shift and biases are not decayed."""
    return name.endswith((".gamma", ".beta", ".bias"))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-4
    decoupled: bool = False  # True: decay applied to the weights directly, not through the gradient
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Mapping[str, Tensor], **kw) -> "AdamState":
        st = cls(**kw)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update; parameters are rebound to fresh read-only arrays."""
    missing = [n for n in params if n not in grads]
    if missing:
        raise UsageError(f"no gradient for parameter {missing[0]!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        w = p.data
        g = np.asarray(grads[name], dtype=w.dtype)
        if g.shape != w.shape:
            raise UsageError(f"gradient for {name!r} has shape {g.shape}, parameter has {w.shape}")
        decay = 0.0 if decay_exempt(name) else state.weight_decay
        if decay and not state.decoupled:
            g = g + decay * w
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = w - update
        if decay and state.decoupled:
            new = new - lr * decay * w
        new = new.astype(w.dtype, copy=False)
        new.flags.writeable = False
        p.data = new


# ----------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.75, 2.0)
    crop: tuple[int, int] | None = None  # None keeps the source extents

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"scale range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.crop is not None and min(self.crop) < 1:
            raise ConfigError(f"crop extents must be positive, got {self.crop}")


def _axis_bilinear(size: int, out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(out) + 0.5) * (size / out) - 0.5
    src = np.clip(src, 0, size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, (src - lo)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(C, H, W) -> (C, out_h, out_w) with half-pixel centres and clamped borders."""
    _, h, w = image.shape
    y0, y1, fy = _axis_bilinear(h, out_h)
    x0, x1, fx = _axis_bilinear(w, out_w)
    fy = fy.astype(image.dtype)[:, None]
    fx = fx.astype(image.dtype)[None, :]
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_nearest(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = label.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.intp), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.intp), w - 1)
    return label[ys][:, xs]


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator, *,
            flip: bool | None = None, scale: float | None = None,
            crop_origin: tuple[int, int] | None = None) -> Sample:
    """Mean subtraction, random horizontal flip, random rescale, random crop (padding as needed).

    The keyword overrides pin a draw for testing; the rng is consumed identically either way.
    """
    u_flip, u_scale, u_y, u_x = rng.random(4)
    do_flip = (u_flip < cfg.flip_prob) if flip is None else flip
    lo, hi = cfg.scale_range
    s = lo + (hi - lo) * u_scale if scale is None else scale
    image = sample.image - np.asarray(cfg.mean, dtype=sample.image.dtype)[:, None, None]
    label = sample.label
    if do_flip:
        image, label = image[:, :, ::-1], label[:, ::-1]
    h, w = label.shape
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (nh, nw) != (h, w):
        image, label = resize_bilinear(image, nh, nw), resize_nearest(label, nh, nw)
    ch, cw = cfg.crop or (h, w)
    if nh < ch or nw < cw:
        ph, pw = max(ch - nh, 0), max(cw - nw, 0)
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        label = np.pad(label, ((0, ph), (0, pw)), constant_values=IGNORE_LABEL)
        nh, nw = label.shape
    if crop_origin is None:
        y = int(u_y * (nh - ch + 1))
        x = int(u_x * (nw - cw + 1))
    else:
        y, x = crop_origin
    image = np.ascontiguousarray(image[:, y:y + ch, x:x + cw], dtype=sample.image.dtype)
    label = np.ascontiguousarray(label[y:y + ch, x:x + cw])
    return Sample(image, label, sample.name)


def identity_view(sample: Sample, mean) -> Sample:
    """Mean subtraction only; used for evaluation and for runs with augmentation off."""
    image = sample.image - np.asarray(mean, dtype=sample.image.dtype)[:, None, None]
    return Sample(image.astype(sample.image.dtype), sample.label, sample.name)


# ------------------------------------------------------------------- loop


@dataclass(frozen=True)
class TrainConfig:
    schedule: ScheduleConfig = ScheduleConfig()
    batch_size: int = 8
    seed: int = 0
    augment: AugmentConfig | None = AugmentConfig()
    weight_decay: float = 2e-4
    decoupled_decay: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps_per_epoch: int | None = None  # None: one pass over the data

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(f"steps_per_epoch must be positive, got {self.steps_per_epoch}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_miou: float | None = None

    def to_line(self, sep: str = "\t") -> str:
        miou = "" if self.val_miou is None else f"{self.val_miou:.6f}"
        return sep.join((str(self.epoch), f"{self.lr:.9g}", f"{self.loss:.9g}", miou))


LOG_HEADER = "epoch\tlr\tloss\tval_miou"


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_text(self) -> str:
        return "\n".join([LOG_HEADER] + [r.to_line() for r in self.records]) + "\n"

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]


def stack_batch(samples: Sequence[Sample], dtype) -> tuple[Tensor, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(dtype, copy=False)
    labels = np.stack([s.label for s in samples]).astype(np.int64)
    return Tensor.wrap(images), labels


def predict(model, image: Tensor) -> np.ndarray:
    """Per-pixel argmax class ids, shape (N, H, W)."""
    return np.argmax(model.forward(image, "eval").data, axis=1)


def evaluate(model, samples: Sequence[Sample], mean, batch_size: int = 4) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.spec.num_classes)
    for i in range(0, len(samples), batch_size):
        chunk = [identity_view(s, mean) for s in samples[i:i + batch_size]]
        x, labels = stack_batch(chunk, model.dtype)
        cm.accumulate(labels, predict(model, x))
    return cm


Hook = Callable[[EpochRecord], None]


def fit(model, samples: Sequence[Sample], cfg: TrainConfig, *, val: Sequence[Sample] | None = None,
        mean=None, optimizer: AdamState | None = None, hooks: Sequence[Hook] = (),
        log_path: str | Path | None = None, start_epoch: int = 0,
        stop_epoch: int | None = None) -> tuple[TrainLog, AdamState]:
    """Train ``model`` in place. Deterministic for a given ``cfg.seed``.

    Each epoch shuffles the data, augments every sample from its own
    (epoch, index) random stream, and takes Adam steps at ``lr_at(epoch)``.
    Epochs ``start_epoch`` up to ``stop_epoch`` (default: the schedule's end)
    run; splitting a schedule across calls gives the same weights as one call.
    The log gets one row per epoch; ``log_path`` receives the same rows as they
    are produced.
    """
    if not samples:
        raise UsageError("training set is empty")
    mean = np.zeros(3, np.float32) if mean is None else np.asarray(mean, np.float32)
    params = model.parameters()
    opt = optimizer or AdamState.create(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                                        weight_decay=cfg.weight_decay, decoupled=cfg.decoupled_decay)
    aug = None if cfg.augment is None else dataclasses.replace(cfg.augment, mean=tuple(float(v) for v in mean))
    log = TrainLog()
    if log_path is not None:
        log_path = Path(log_path)
        if start_epoch == 0 or not log_path.exists():
            log_path.write_text(LOG_HEADER + "\n", encoding="utf-8")
    n = len(samples)
    bs = min(cfg.batch_size, n)
    step = opt.step
    stop = cfg.schedule.epochs if stop_epoch is None else stop_epoch
    if not 0 <= start_epoch <= stop <= cfg.schedule.epochs:
        raise UsageError(f"need 0 <= start_epoch <= stop_epoch <= {cfg.schedule.epochs}, "
                         f"got {start_epoch} and {stop}")
    for epoch in range(start_epoch, stop):
        lr = lr_at(epoch, cfg.schedule)
        order = substream(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n)
        steps = cfg.steps_per_epoch or math.ceil(n / bs)
        total = 0.0
        for s in range(steps):
            idx = [int(order[(s * bs + j) % n]) for j in range(bs)]
            batch = []
            for i in idx:
                if aug is None:
                    batch.append(identity_view(samples[i], mean))
                else:
                    batch.append(augment(samples[i], aug, substream(cfg.seed, STREAM_AUGMENT, epoch, i)))
            x, labels = stack_batch(batch, model.dtype)
            with Tape():
                logits = model.forward(x, "train", substream(cfg.seed, STREAM_DROPOUT, step))
                loss = ops.cross_entropy_loss(logits, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, step {s}")
            grads = backward(loss, params)
            adam_step(params, grads, opt, lr)
            step += 1
            total += value
        rec = EpochRecord(epoch, lr, total / steps)
        if val:
            rec.val_miou = evaluate(model, val, mean).miou()
        log.records.append(rec)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(rec.to_line() + "\n")
        for hook in hooks:
            hook(rec)
    return log, opt
