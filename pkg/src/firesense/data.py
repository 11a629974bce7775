"""Sample container, channel schema, preprocessing, and the synthetic generator.

The on-disk container ("FSNW") is little-endian and seekable: a header with
the channel-name table followed by fixed-size sample blocks (u64 id, float32
channel rasters, int8 target). Round-trips are bitwise.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FormatError
from .rng import rng_for

CHANNELS = (
    "elevation", "NDVI", "population", "PrevFireMask",
    "th", "vs", "tmmn", "tmmx", "sph", "pr", "pdsi", "erc",
)
FUEL_CHANNELS = CHANNELS[:4]
WEATHER_CHANNELS = CHANNELS[4:]
PREV_FIRE_IDX = CHANNELS.index("PrevFireMask")
WIND_SPEED_IDX = CHANNELS.index("vs")

# channels kept out of z-normalization (binary semantics preserved)
NORM_EXEMPT = (PREV_FIRE_IDX,)

MAGIC = b"FSNW"
VERSION = 1


@dataclass
class Sample:
    id: int
    x: np.ndarray  # [C,H,W] float32
    y: np.ndarray  # [H,W] int8 in {-1,0,1}


@dataclass
class Dataset:
    samples: list
    channels: tuple = CHANNELS

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


@dataclass
class NormStats:
    mean: np.ndarray  # [C] float64
    std: np.ndarray   # [C] float64


# ---------------------------------------------------------------------------
# container format

def encode(dataset: Dataset) -> bytes:
    if tuple(dataset.channels) != CHANNELS:
        raise FormatError(f"channel table must match the schema, got {dataset.channels}")
    if dataset.samples:
        c, h, w = dataset.samples[0].x.shape
    else:
        c, h, w = len(CHANNELS), 64, 64
    if c != len(CHANNELS):
        raise FormatError(f"expected {len(CHANNELS)} channels, got {c}")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HIHHH", VERSION, len(dataset.samples), h, w, c)
    for name in CHANNELS:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    for s in dataset.samples:
        if s.x.shape != (c, h, w) or s.y.shape != (h, w):
            raise FormatError(f"sample {s.id} shape {s.x.shape}/{s.y.shape} != ({c},{h},{w})")
        out += struct.pack("<Q", s.id)
        out += np.ascontiguousarray(s.x, dtype="<f4").tobytes()
        out += np.ascontiguousarray(s.y, dtype=np.int8).tobytes()
    return bytes(out)


def decode(buf: bytes) -> Dataset:
    off = 0

    def need(n: int, what: str) -> int:
        nonlocal off
        if off + n > len(buf):
            raise FormatError(
                f"truncated while reading {what}: expected {n} bytes, got {len(buf) - off}",
                offset=off,
            )
        start = off
        off += n
        return start

    start = need(4, "magic")
    if buf[start:start + 4] != MAGIC:
        raise FormatError(f"bad magic {buf[start:start + 4]!r}, expected {MAGIC!r}", offset=0)
    start = need(struct.calcsize("<HIHHH"), "header")
    version, n_samples, h, w, c = struct.unpack_from("<HIHHH", buf, start)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", offset=start)
    names = []
    for i in range(c):
        start = need(2, f"channel name length {i}")
        (ln,) = struct.unpack_from("<H", buf, start)
        start = need(ln, f"channel name {i}")
        names.append(buf[start:start + ln].decode("utf-8"))
    if tuple(names) != CHANNELS:
        raise FormatError(f"channel table {names} does not match the schema", offset=start)

    samples = []
    x_bytes = c * h * w * 4
    y_bytes = h * w
    for i in range(n_samples):
        start = need(8, f"sample {i} id")
        (sid,) = struct.unpack_from("<Q", buf, start)
        start = need(x_bytes, f"sample {i} channels")
        x = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=start).reshape(c, h, w)
        x = np.ascontiguousarray(x, dtype=np.float32)
        ystart = need(y_bytes, f"sample {i} target")
        y = np.frombuffer(buf, dtype=np.int8, count=h * w, offset=ystart).reshape(h, w).copy()
        if not np.all(np.isfinite(x)):
            raise FormatError(f"sample {i} has non-finite channel values", offset=start)
        if not np.isin(y, (-1, 0, 1)).all():
            raise FormatError(f"sample {i} target has labels outside {{-1,0,1}}", offset=ystart)
        samples.append(Sample(id=sid, x=x, y=y))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last sample", offset=off)
    return Dataset(samples=samples, channels=CHANNELS)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as f:
        f.write(encode(dataset))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        return decode(f.read())


# ---------------------------------------------------------------------------
# single-map raster format (attention / uncertainty exports)

RASTER_MAGIC = b"FSR1"


def save_raster(path, arr) -> None:
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim != 2:
        raise ConfigurationError(f"rasters are single 2D maps, got shape {a.shape}")
    h, w = a.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise ConfigurationError(f"raster {h}x{w} exceeds the u16 size fields")
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC + struct.pack("<HH", h, w) + a.tobytes(order="C"))


def load_raster(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != RASTER_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {RASTER_MAGIC!r}", offset=0)
    if len(buf) < 8:
        raise FormatError("truncated while reading raster dimensions", offset=4)
    h, w = struct.unpack_from("<HH", buf, 4)
    body = h * w * 4
    if len(buf) != 8 + body:
        raise FormatError(
            f"raster body should be {body} bytes for {h}x{w}, got {len(buf) - 8}",
            offset=8,
        )
    return np.frombuffer(buf, dtype="<f4", count=h * w, offset=8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# normalization

def compute_norm_stats(samples) -> NormStats:
    """Per-channel mean/std pooled over all pixels.

    Feed the training split only, after any input smoothing, so stats match
    what the model actually sees. Accepts Samples or bare [C,H,W] arrays.
    """
    if not samples:
        raise ConfigurationError("cannot compute normalization stats from zero samples")
    stacked = np.stack([s.x if hasattr(s, "x") else s for s in samples]).astype(np.float64)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return NormStats(mean=mean, std=std)


def normalize(x: np.ndarray, stats: NormStats, exempt=NORM_EXEMPT) -> np.ndarray:
    out = np.array(x, dtype=np.float32)
    for ci in range(out.shape[0]):
        if ci in exempt:
            continue
        out[ci] = (out[ci] - stats.mean[ci]) / max(stats.std[ci], 1e-6)
    return out


def save_norm_stats(stats: NormStats, path) -> None:
    with open(path, "w") as f:
        f.write("channel,mean,std\n")
        for name, m, s in zip(CHANNELS, stats.mean, stats.std):
            f.write(f"{name},{float(m)!r},{float(s)!r}\n")


def load_norm_stats(path) -> NormStats:
    with open(path) as f:
        lines = f.read().strip().splitlines()
    if not lines or lines[0] != "channel,mean,std":
        raise FormatError(f"bad stats header in {path}")
    rows = [ln.split(",") for ln in lines[1:]]
    if tuple(r[0] for r in rows) != CHANNELS:
        raise FormatError(f"stats channels do not match the schema in {path}")
    mean = np.array([float(r[1]) for r in rows], dtype=np.float64)
    std = np.array([float(r[2]) for r in rows], dtype=np.float64)
    return NormStats(mean=mean, std=std)


# ---------------------------------------------------------------------------
# preprocessing

def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    r = int(np.ceil(3 * sigma))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth(raster: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, zero-padded borders, float64 accumulation.

    The kernel is normalized to sum 1 before border truncation, so interior
    mass is preserved and borders are damped toward zero.
    """
    k = gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    out = np.asarray(raster, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        padded = np.pad(out, pad)
        acc = np.zeros_like(out)
        for j, kj in enumerate(k):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(j, j + raster.shape[axis])
            acc += kj * padded[tuple(sl)]
        out = acc
    return out.astype(np.asarray(raster).dtype)


def preprocess_x(x: np.ndarray, sigma_prev: float = 0.8, sigma_wind: float = 0.4) -> np.ndarray:
    """Blur the previous-fire mask and wind speed channels (all splits alike)."""
    out = np.array(x, dtype=np.float32)
    out[PREV_FIRE_IDX] = gaussian_smooth(out[PREV_FIRE_IDX], sigma_prev)
    out[WIND_SPEED_IDX] = gaussian_smooth(out[WIND_SPEED_IDX], sigma_wind)
    return out


def soft_labels(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Map 0 to U(0.01,0.03), 1 to U(0.80,0.99); -1 passes through.

    One draw per pixel regardless of class, so the stream advances identically
    for any label layout.
    """
    u = rng.random(y.shape)
    t = np.where(y == 1, 0.80 + 0.19 * u, 0.01 + 0.02 * u)
    return np.where(y == -1, -1.0, t).astype(np.float32)


def augment_flip(x: np.ndarray, y: np.ndarray, rng: np.random.Generator):
    """Flip x and y together along H and/or W, each with probability 0.5."""
    flip_h = rng.random() < 0.5
    flip_w = rng.random() < 0.5
    if flip_h:
        x = np.flip(x, axis=-2)
        y = np.flip(y, axis=-2)
    if flip_w:
        x = np.flip(x, axis=-1)
        y = np.flip(y, axis=-1)
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


# ---------------------------------------------------------------------------
# synthetic patches

_DIRECTIONS = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}

# plausible raw scales so normalization has real work to do
_CHANNEL_LEVELS = {
    "elevation": (800.0, 400.0), "NDVI": (0.4, 0.25), "population": (25.0, 40.0),
    "th": (180.0, 80.0), "vs": (4.0, 2.0), "tmmn": (280.0, 8.0), "tmmx": (295.0, 8.0),
    "sph": (0.007, 0.003), "pr": (0.5, 1.5), "pdsi": (0.0, 3.0), "erc": (50.0, 20.0),
}


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def _dilate4(mask: np.ndarray) -> np.ndarray:
    return (mask | _shift(mask, 1, 0) | _shift(mask, -1, 0)
            | _shift(mask, 0, 1) | _shift(mask, 0, -1))


def _smooth_noise(rng, size: int, sigma: float) -> np.ndarray:
    field = gaussian_smooth(rng.normal(size=(size, size)), sigma)
    sd = field.std()
    return field / sd if sd > 0 else field


def generate_synthetic(n: int, seed: int, spread_bias: str = "E", size: int = 64) -> Dataset:
    """Build n fire-spread patches whose next-day ring derives from PrevFireMask.

    Weather fields are broad smoothed noise, terrain is finer noise, the
    previous-day mask is a small disk, and the target is a 1-2 px dilation
    ring biased toward spread_bias. About 5% of patches carry a -1 rectangle.
    Fire fraction stays below 5% of pixels per patch.
    """
    if n < 1:
        raise ConfigurationError(f"need n >= 1, got {n}")
    if spread_bias not in _DIRECTIONS:
        raise ConfigurationError(f"spread_bias must be one of {sorted(_DIRECTIONS)}")
    if size % 4 != 0 or size < 8:
        raise ConfigurationError(f"size must be a multiple of 4 and >= 8, got {size}")
    dy, dx = _DIRECTIONS[spread_bias]

    samples = []
    for i in range(n):
        rng = rng_for(seed, "synth", i)
        x = np.zeros((len(CHANNELS), size, size), dtype=np.float32)
        for ci, name in enumerate(CHANNELS):
            if name == "PrevFireMask":
                continue
            mu, sig = _CHANNEL_LEVELS[name]
            sigma = 6.0 if name in WEATHER_CHANNELS else 1.5
            x[ci] = (mu + sig * _smooth_noise(rng, size, sigma)).astype(np.float32)

        cy, cx = rng.uniform(size * 0.25, size * 0.75, size=2)
        radius = rng.uniform(max(1.0, 2.5 * size / 64), max(2.0, 5.5 * size / 64))
        wobble = _smooth_noise(rng, size, 1.5)
        yy, xx = np.mgrid[0:size, 0:size]
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = (dist + 1.2 * wobble) < radius
        if not mask.any():
            mask[int(cy), int(cx)] = True
        x[PREV_FIRE_IDX] = mask.astype(np.float32)

        ring = _dilate4(mask)
        ring = ring | _shift(ring, dy, dx)
        ring = ring & ~mask
        y = np.zeros((size, size), dtype=np.int8)
        y[ring] = 1

        cap = int(0.05 * size * size) - 1
        if ring.sum() > cap:
            ry, rx = np.nonzero(ring)
            order = np.lexsort((rx, ry, dist[ry, rx]))
            drop = order[cap:]
            y[ry[drop], rx[drop]] = 0

        if rng.random() < 0.05:
            rh = int(rng.integers(4, max(5, size // 5)))
            rw = int(rng.integers(4, max(5, size // 5)))
            r0 = int(rng.integers(0, size - rh))
            c0 = int(rng.integers(0, size - rw))
            y[r0:r0 + rh, c0:c0 + rw] = -1

        samples.append(Sample(id=i, x=x, y=y))
    return Dataset(samples=samples, channels=CHANNELS)


def split(dataset: Dataset, seed: int):
    """Deterministic disjoint 8:1:1 partition into (train, val, test)."""
    n = len(dataset.samples)
    if n < 10:
        raise ConfigurationError(f"need at least 10 samples to split 8:1:1, got {n}")
    perm = rng_for(seed, "split").permutation(n)
    n_val = n // 10
    n_test = n // 10
    val_idx = perm[:n_val]
    test_idx = perm[n_val:n_val + n_test]
    train_idx = perm[n_val + n_test:]
    pick = lambda idx: Dataset(samples=[dataset.samples[j] for j in sorted(idx)],
                               channels=dataset.channels)
    return pick(train_idx), pick(val_idx), pick(test_idx)
