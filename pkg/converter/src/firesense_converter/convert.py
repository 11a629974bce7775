"""TFRecord files -> firesense dataset container.

Channels are reordered to the container schema regardless of source key
order; the next-day mask travels unchanged as {-1, 0, 1}. No protocol
handling happens here (remapping -1 labels is the evaluator's job), so
nothing about clean/inflated evaluation gets baked into data files.
"""

import numpy as np

from firesense.data import CHANNELS, Dataset, Sample

from .errors import SourceFormatError
from .example import parse_example
from .records import read_records

RASTER_SIDE = 64
TARGET_KEY = "FireMask"
EXPECTED_KEYS = CHANNELS + (TARGET_KEY,)


def convert_record(feats: dict, sample_id: int, origin: str) -> Sample:
    for key in EXPECTED_KEYS:
        if key not in feats:
            raise SourceFormatError(f"{origin}: missing key {key!r}")
    n = RASTER_SIDE * RASTER_SIDE
    for key in EXPECTED_KEYS:
        if feats[key].size != n:
            raise SourceFormatError(
                f"{origin}: key {key!r} has {feats[key].size} values, expected {n}"
            )
    x = np.stack([feats[c].reshape(RASTER_SIDE, RASTER_SIDE) for c in CHANNELS])
    raw_y = feats[TARGET_KEY]
    if not np.isin(raw_y, (-1.0, 0.0, 1.0)).all():
        bad = raw_y[~np.isin(raw_y, (-1.0, 0.0, 1.0))][0]
        raise SourceFormatError(
            f"{origin}: {TARGET_KEY} contains {bad!r}, expected only -1/0/1"
        )
    y = raw_y.astype(np.int8).reshape(RASTER_SIDE, RASTER_SIDE)
    return Sample(id=sample_id, x=x, y=y)


def convert(paths, limit: int | None = None) -> tuple[Dataset, list]:
    """Read TFRecord files into a Dataset plus per-channel summary rows.

    Sample ids are the running record index across the input files, in
    order. `limit` stops after that many samples.
    """
    samples = []
    index = 0
    for path in paths:
        for payload in read_records(path):
            if limit is not None and len(samples) >= limit:
                break
            feats = parse_example(payload)
            origin = f"{path}: record {index}"
            samples.append(convert_record(feats, index, origin))
            index += 1
        if limit is not None and len(samples) >= limit:
            break
    return Dataset(samples=samples), summarize(samples)


def summarize(samples) -> list:
    """One {channel, min, max, mean} row per input channel plus the target."""
    if not samples:
        return []
    rows = []
    xs = np.stack([s.x for s in samples]).astype(np.float64)
    for i, name in enumerate(CHANNELS):
        plane = xs[:, i]
        rows.append({"channel": name, "min": float(plane.min()),
                     "max": float(plane.max()), "mean": float(plane.mean())})
    ys = np.stack([s.y for s in samples]).astype(np.float64)
    rows.append({"channel": TARGET_KEY, "min": float(ys.min()),
                 "max": float(ys.max()), "mean": float(ys.mean())})
    return rows
