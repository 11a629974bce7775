"""Channel-masking importance, MC-dropout uncertainty, attention export.

All three consume a trained model plus the training-split normalization
stats; nothing here mutates the model.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import ForwardContext
from .data import CHANNELS, NormStats, NORM_EXEMPT, normalize, preprocess_x
from .errors import ConfigurationError, UnsupportedArchitectureError
from .metrics import confusion, prf1, threshold_sweep
from .rng import rng_for
from .tensor import Tensor

IMPORTANCE_CSV_HEADER = "channel,group,baseline_f1,masked_f1,delta_f1"


@dataclass
class UncertaintyMap:
    mean: np.ndarray  # [H,W] probabilities
    std: np.ndarray   # [H,W] nonnegative
    n_passes: int


def _masked_fill(stats: NormStats, ci: int) -> float:
    """Model-space constant for a channel replaced by its training mean.

    Z-scored channels normalize their own mean to 0; exempt channels keep the
    stored (post-smoothing) mean.
    """
    return float(stats.mean[ci]) if ci in NORM_EXEMPT else 0.0


def _pooled_f1(model, xs, prevs, ys, threshold: float) -> float:
    probs = []
    with T.no_grad():
        for x in xs:
            logits = model.forward(Tensor(x), ForwardContext(mode="eval"))
            probs.append(1.0 / (1.0 + np.exp(-logits.data[0].astype(np.float64))))
    counts = confusion(np.stack(probs), np.stack(prevs), np.stack(ys), "clean", threshold)
    return prf1(counts)[2]


def channel_importance(model, samples, stats: NormStats, channel_index: int | None = None,
                       sigma_prev: float = 0.8, sigma_wind: float = 0.4,
                       threshold: float | None = None):
    """Per-channel F1 change when that channel is a constant training mean.

    The baseline threshold comes from one clean-protocol sweep and stays
    frozen for every masked run. Returns (rows, baseline_threshold) where
    each row is {channel, group, baseline_f1, masked_f1, delta_f1}; with
    channel_index set, only that channel's row is produced.
    """
    xs, prevs, ys = [], [], []
    for s in samples:
        prevs.append(np.array(s.x[3], dtype=np.float32))
        xs.append(normalize(preprocess_x(s.x, sigma_prev, sigma_wind), stats))
        ys.append(np.array(s.y))

    if threshold is None:
        probs = []
        with T.no_grad():
            for x in xs:
                logits = model.forward(Tensor(x), ForwardContext(mode="eval"))
                probs.append(1.0 / (1.0 + np.exp(-logits.data[0].astype(np.float64))))
        threshold, _ = threshold_sweep(np.stack(probs), np.stack(prevs), np.stack(ys), "clean")
    baseline_f1 = _pooled_f1(model, xs, prevs, ys, threshold)

    indices = range(len(CHANNELS)) if channel_index is None else (channel_index,)
    rows = []
    for ci in indices:
        if not 0 <= ci < len(CHANNELS):
            raise ConfigurationError(f"channel index {ci} outside [0, {len(CHANNELS)})")
        fill = _masked_fill(stats, ci)
        masked_xs = []
        for x in xs:
            mx = np.array(x)
            mx[ci] = fill
            masked_xs.append(mx)
        masked_f1 = _pooled_f1(model, masked_xs, prevs, ys, threshold)
        rows.append({
            "channel": CHANNELS[ci],
            "group": "fuel" if ci < 4 else "weather",
            "baseline_f1": baseline_f1,
            "masked_f1": masked_f1,
            "delta_f1": masked_f1 - baseline_f1,
        })
    return rows, threshold


def mc_predict(model, x, n_passes: int = 20, seed: int = 0) -> UncertaintyMap:
    """Dropout-stochastic forward passes on one model-ready input.

    Dropout stays active while batchnorm uses its running stats; pass p draws
    its noise from the stream (seed, "mc", p), so maps are replayable.
    """
    if n_passes < 2:
        raise ConfigurationError(f"need n_passes >= 2 for a std estimate, got {n_passes}")
    outs = []
    with T.no_grad():
        for p in range(n_passes):
            ctx = ForwardContext(mode="mc", rng=rng_for(seed, "mc", p))
            logits = model.forward(Tensor(np.asarray(x, dtype=np.float32)), ctx)
            outs.append(1.0 / (1.0 + np.exp(-logits.data[0].astype(np.float64))))
    stacked = np.stack(outs)
    # moments on deviations from pass 0: identical passes give an exactly
    # zero std instead of mean-roundoff noise
    dev = stacked - stacked[0]
    return UncertaintyMap(mean=stacked[0] + dev.mean(axis=0), std=dev.std(axis=0),
                          n_passes=n_passes)


def export_attention(model, x) -> list[np.ndarray]:
    """The three fusion gate maps for one input, largest scale first.

    Raises UnsupportedArchitectureError when the model has no gated fusion
    (plain concatenation or the single-stream baseline).
    """
    ctx = ForwardContext(mode="eval", alphas=[])
    with T.no_grad():
        model.forward(Tensor(np.asarray(x, dtype=np.float32)), ctx)
    if not ctx.alphas:
        arch = getattr(getattr(model, "config", None), "arch", type(model).__name__)
        raise UnsupportedArchitectureError(
            f"{arch} has no attention gates to export"
        )
    return [np.array(a.data[0], dtype=np.float64) for a in ctx.alphas]
