"""Optimizer, schedule, early stopping, checkpointing, and the fit loop.

Training is bitwise deterministic for a fixed config + seed: every noise
source (data order, soft labels, flips, dropout) draws from its own stream
derived from the seed, and the optimizer does its arithmetic in float64
with float32 parameter storage. Checkpoints capture parameters, buffers,
optimizer moments, stream states, and history, so a resumed run continues
exactly where the uninterrupted run would have been.
"""

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import ForwardContext
from .data import NormStats, compute_norm_stats, normalize, preprocess_x, soft_labels, augment_flip
from .errors import ConfigurationError, FormatError, NumericalError
from .losses import composite_loss, valid_mask
from .metrics import confusion, prf1
from .models import ModelConfig, build
from .rng import get_state, rng_for, set_state
from .tensor import Tensor

HISTORY_CSV_HEADER = "epoch,lr,loss,wbce,dice,focal,val_f1"

CKPT_MAGIC = b"FSCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 128
    max_epochs: int = 100
    early_stop_patience: int = 15  # 0 disables
    clip_norm: float = 0.0         # 0 disables
    eta_min: float = 1e-6
    seed: int = 0
    weight_decay: float = 0.0      # > 0 switches to decoupled decay
    augment: bool = True
    soft_targets: bool = True
    sigma_prev: float = 0.8
    sigma_wind: float = 0.4
    val_threshold: float = 0.5
    val_f1_target: float = 0.0     # 0 disables the reach-target stop
    min_epochs: int = 0
    dropout_seed: int = -1         # -1 means: use seed
    split_seed: int = -1           # -1 means: use seed; drives the 8:1:1 split

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("lr, batch_size, max_epochs must be positive")
        if self.early_stop_patience < 0 or self.early_stop_patience > self.max_epochs:
            raise ConfigurationError("early_stop_patience must be in [0, max_epochs]")
        if self.clip_norm < 0 or self.eta_min < 0 or self.weight_decay < 0:
            raise ConfigurationError("clip_norm, eta_min, weight_decay must be >= 0")
        if not 0 < self.val_threshold < 1:
            raise ConfigurationError("val_threshold must be in (0, 1)")


class Adam:
    """Bias-corrected Adam; float64 moments and math, float32 parameters.

    weight_decay > 0 applies decoupled decay (the AdamW form, not L2-in-grad).
    """

    def __init__(self, named_params, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.data.shape, dtype=np.float64) for _, p in self.named_params]
        self.v = [np.zeros(p.data.shape, dtype=np.float64) for _, p in self.named_params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        grads = []
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name}")
            grads.append(g.astype(np.float64))
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (name, p), m, v, g in zip(self.named_params, self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p64 = p.data.astype(np.float64)
            delta = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay > 0:
                delta = delta + lr * self.weight_decay * p64
            p.data = (p64 - delta).astype(np.float32)


def cosine_lr(epoch: int, max_epochs: int, lr_max: float, eta_min: float = 1e-6) -> float:
    if not 0 <= epoch <= max_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {max_epochs}]")
    return float(eta_min + 0.5 * (lr_max - eta_min) * (1.0 + np.cos(np.pi * epoch / max_epochs)))


def clip_gradients(grads: list, max_norm: float = 1.0) -> list:
    """Scale all grads by max_norm/norm when the global L2 norm exceeds it."""
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = np.float32(max_norm / total)
        for g in grads:
            g *= scale
    return grads


class EarlyStopper:
    """Tracks best validation score; fires after `patience` stale epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, score: float, epoch: int) -> bool:
        """Returns True when `score` improves on the best seen."""
        if score > self.best:
            self.best = score
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.patience > 0 and self.stale >= self.patience


# ---------------------------------------------------------------------------
# training state and loop

_RNG_STREAMS = ("order", "soft", "flip", "dropout")


@dataclass
class TrainState:
    model: object
    model_config: ModelConfig
    config: TrainConfig
    opt: Adam
    stats: NormStats
    rngs: dict
    epoch: int = -1               # last completed epoch
    best_f1: float = -np.inf
    best_epoch: int = -1
    best_params: list = field(default_factory=list)
    best_buffers: list = field(default_factory=list)
    stale: int = 0
    history: list = field(default_factory=list)


def init_state(model_config: ModelConfig, config: TrainConfig, train_samples) -> TrainState:
    config.validate()
    model = build(model_config, config.seed)
    opt = Adam(list(model.named_parameters()), lr=config.lr,
               weight_decay=config.weight_decay)
    # stats describe the smoothed inputs the model sees, not the raw files
    stats = compute_norm_stats([
        preprocess_x(s.x, config.sigma_prev, config.sigma_wind) for s in train_samples
    ])
    dropout_seed = config.seed if config.dropout_seed < 0 else config.dropout_seed
    rngs = {name: rng_for(dropout_seed if name == "dropout" else config.seed, name)
            for name in _RNG_STREAMS}
    return TrainState(model=model, model_config=model_config, config=config,
                      opt=opt, stats=stats, rngs=rngs)


def _prepared(samples, config: TrainConfig, stats: NormStats):
    xs, ys, prevs = [], [], []
    for s in samples:
        prevs.append(np.array(s.x[3], dtype=np.float32))
        xs.append(normalize(preprocess_x(s.x, config.sigma_prev, config.sigma_wind), stats))
        ys.append(np.array(s.y))
    return xs, ys, prevs


def predict_probs(model, samples, stats: NormStats, sigma_prev: float = 0.8,
                  sigma_wind: float = 0.4) -> np.ndarray:
    """Eval-mode sigmoid outputs, stacked [N,H,W]."""
    out = []
    with T.no_grad():
        for s in samples:
            x = normalize(preprocess_x(s.x, sigma_prev, sigma_wind), stats)
            logits = model.forward(Tensor(x), ForwardContext(mode="eval"))
            out.append(1.0 / (1.0 + np.exp(-logits.data[0].astype(np.float64))))
    return np.stack(out)


def _val_f1(model, val_prepared, config: TrainConfig) -> float:
    xs, ys, prevs = val_prepared
    probs = []
    with T.no_grad():
        for x in xs:
            logits = model.forward(Tensor(x), ForwardContext(mode="eval"))
            probs.append(1.0 / (1.0 + np.exp(-logits.data[0].astype(np.float64))))
    probs = np.stack(probs)
    counts = confusion(probs, np.stack(prevs), np.stack(ys), "clean", config.val_threshold)
    return prf1(counts)[2]


def _snapshot(model):
    params = [(n, np.array(p.data)) for n, p in model.named_parameters()]
    buffers = [(n, np.array(b)) for n, b in model.named_buffers()]
    return params, buffers


def _restore(model, params, buffers):
    for (_, p), (_, arr) in zip(model.named_parameters(), params):
        p.data = np.array(arr)
    for (_, b), (_, arr) in zip(model.named_buffers(), buffers):
        b[:] = arr


def fit(state: TrainState, train_ds, val_ds, checkpoint_path=None,
        checkpoint_every: int = 0, until_epoch: int | None = None):
    """Run the training loop from state.epoch + 1; returns (model, history).

    Each epoch: seeded shuffle, batches of composite loss averaged per batch,
    optional gradient clipping, Adam step at the cosine-annealed rate, then
    pooled validation F1 at the fixed threshold. Improvements snapshot the
    model; exhausted patience or a reached F1 target stops the loop, and the
    best snapshot is restored before returning.

    until_epoch pauses the loop before that epoch index without restoring the
    best snapshot, so a checkpointed run can resume mid-schedule and continue
    exactly as the uninterrupted run would (the cosine schedule keys off
    max_epochs either way).
    """
    cfg = state.config
    model = state.model
    train_prep = _prepared(train_ds.samples, cfg, state.stats)
    val_prep = _prepared(val_ds.samples, cfg, state.stats)
    xs, ys, _ = train_prep
    n = len(xs)
    if n == 0:
        raise ConfigurationError("training split is empty")

    paused = False
    for epoch in range(state.epoch + 1, cfg.max_epochs):
        if until_epoch is not None and epoch >= until_epoch:
            paused = True
            break
        lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr, cfg.eta_min)
        perm = state.rngs["order"].permutation(n)
        sums = {"loss": 0.0, "wbce": 0.0, "dice": 0.0, "focal": 0.0}
        for b0 in range(0, n, cfg.batch_size):
            batch = perm[b0:b0 + cfg.batch_size]
            model.zero_grad()
            batch_loss = None
            try:
                for j in batch:
                    x, y = xs[j], ys[j]
                    if cfg.augment:
                        x, y = augment_flip(x, y, state.rngs["flip"])
                    if cfg.soft_targets:
                        t = soft_labels(y, state.rngs["soft"])
                    else:
                        t = np.where(y == -1, -1.0, y).astype(np.float32)
                    ctx = ForwardContext(mode="train", rng=state.rngs["dropout"])
                    logits = model.forward(Tensor(x), ctx)
                    loss, parts = composite_loss(logits, t, valid_mask(y))
                    sums["loss"] += loss.item()
                    for k in ("wbce", "dice", "focal"):
                        sums[k] += parts[k].item()
                    batch_loss = loss if batch_loss is None else batch_loss + loss
                batch_loss = batch_loss * (1.0 / len(batch))
                T.backward(batch_loss)
            except NumericalError as err:
                raise NumericalError(
                    f"epoch {epoch}, batch {b0 // cfg.batch_size}: {err}") from err
            if cfg.clip_norm > 0:
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                         for p in model.parameters()]
                clip_gradients(grads, cfg.clip_norm)
                for p, g in zip(model.parameters(), grads):
                    p.grad = g
            state.opt.step(lr)

        val_f1 = _val_f1(model, val_prep, cfg)
        state.history.append({
            "epoch": epoch, "lr": lr,
            "loss": sums["loss"] / n, "wbce": sums["wbce"] / n,
            "dice": sums["dice"] / n, "focal": sums["focal"] / n,
            "val_f1": val_f1,
        })
        state.epoch = epoch

        if val_f1 > state.best_f1:
            state.best_f1 = val_f1
            state.best_epoch = epoch
            state.best_params, state.best_buffers = _snapshot(model)
            state.stale = 0
        else:
            state.stale += 1

        if checkpoint_path is not None and checkpoint_every > 0 \
                and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state)

        if cfg.val_f1_target > 0 and val_f1 >= cfg.val_f1_target \
                and epoch + 1 >= cfg.min_epochs:
            break
        if cfg.early_stop_patience > 0 and state.stale >= cfg.early_stop_patience:
            break

    if state.best_params and not paused:
        _restore(model, state.best_params, state.best_buffers)
    return model, state.history


def save_history(history: list, path) -> None:
    with open(path, "w") as f:
        f.write(HISTORY_CSV_HEADER + "\n")
        for row in history:
            f.write(f"{row['epoch']},{row['lr']!r},{row['loss']!r},{row['wbce']!r},"
                    f"{row['dice']!r},{row['focal']!r},{row['val_f1']!r}\n")


# ---------------------------------------------------------------------------
# checkpoint format

def _blob_entries(state: TrainState):
    """Ordered (tag, array) blob list; dtype/shape metadata goes in the header."""
    entries = []
    for name, p in state.model.named_parameters():
        entries.append((f"param:{name}", p.data))
    for name, b in state.model.named_buffers():
        entries.append((f"buffer:{name}", b))
    for (name, _), m in zip(state.opt.named_params, state.opt.m):
        entries.append((f"opt_m:{name}", m))
    for (name, _), v in zip(state.opt.named_params, state.opt.v):
        entries.append((f"opt_v:{name}", v))
    for name, arr in state.best_params:
        entries.append((f"best_param:{name}", arr))
    for name, arr in state.best_buffers:
        entries.append((f"best_buffer:{name}", arr))
    return entries


def save_checkpoint(path, state: TrainState) -> None:
    entries = _blob_entries(state)
    header = {
        "model_config": dataclasses.asdict(state.model_config),
        "train_config": dataclasses.asdict(state.config),
        "epoch": state.epoch,
        "best_f1": float(state.best_f1),
        "best_epoch": state.best_epoch,
        "stale": state.stale,
        "opt_t": state.opt.t,
        "rng": {name: get_state(rng) for name, rng in state.rngs.items()},
        "history": state.history,
        "norm_mean": [float(v) for v in state.stats.mean],
        "norm_std": [float(v) for v in state.stats.std],
        "blobs": [[tag, list(arr.shape), str(arr.dtype)] for tag, arr in entries],
    }
    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", CKPT_VERSION, len(head)))
        f.write(head)
        for _, arr in entries:
            dt = "<f4" if arr.dtype == np.float32 else "<f8"
            f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}, expected {CKPT_MAGIC!r}", offset=0)
    if len(buf) < 10:
        raise FormatError("truncated checkpoint header", offset=4)
    version, head_len = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    off = 10
    if off + head_len > len(buf):
        raise FormatError(
            f"truncated checkpoint header: expected {head_len} bytes, got {len(buf) - off}",
            offset=off,
        )
    header = json.loads(buf[off:off + head_len].decode("utf-8"))
    off += head_len

    model_config = ModelConfig(**header["model_config"])
    config = TrainConfig(**header["train_config"])
    model = build(model_config, config.seed)
    opt = Adam(list(model.named_parameters()), lr=config.lr,
               weight_decay=config.weight_decay)
    opt.t = header["opt_t"]
    stats = NormStats(mean=np.array(header["norm_mean"], dtype=np.float64),
                      std=np.array(header["norm_std"], dtype=np.float64))
    rngs = {}
    for name in _RNG_STREAMS:
        rng = rng_for(config.seed, name)
        set_state(rng, header["rng"][name])
        rngs[name] = rng

    arrays = {}
    for tag, shape, dtype in header["blobs"]:
        dt = np.dtype(dtype)
        nbytes = int(np.prod(shape, dtype=np.int64) * dt.itemsize) if shape else dt.itemsize
        if off + nbytes > len(buf):
            raise FormatError(
                f"truncated blob {tag}: expected {nbytes} bytes, got {len(buf) - off}",
                offset=off,
            )
        arrays[tag] = np.frombuffer(buf, dtype=dt.newbyteorder("<"), count=int(np.prod(shape)) if shape else 1,
                                    offset=off).reshape(shape).astype(dt)
        off += nbytes
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes in checkpoint", offset=off)

    for name, p in model.named_parameters():
        p.data = np.array(arrays[f"param:{name}"], dtype=np.float32)
    for name, b in model.named_buffers():
        b[:] = arrays[f"buffer:{name}"]
    opt.m = [np.array(arrays[f"opt_m:{name}"], dtype=np.float64)
             for name, _ in opt.named_params]
    opt.v = [np.array(arrays[f"opt_v:{name}"], dtype=np.float64)
             for name, _ in opt.named_params]
    best_params = [(name, np.array(arrays[f"best_param:{name}"], dtype=np.float32))
                   for name, _ in model.named_parameters()
                   if f"best_param:{name}" in arrays]
    best_buffers = [(name, np.array(arrays[f"best_buffer:{name}"]))
                    for name, _ in model.named_buffers()
                    if f"best_buffer:{name}" in arrays]

    return TrainState(model=model, model_config=model_config, config=config,
                      opt=opt, stats=stats, rngs=rngs, epoch=header["epoch"],
                      best_f1=header["best_f1"], best_epoch=header["best_epoch"],
                      best_params=best_params, best_buffers=best_buffers,
                      stale=header["stale"], history=header["history"])
