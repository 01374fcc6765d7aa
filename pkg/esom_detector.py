"""Emergent self-organizing map detector.

Feature vectors are z-scored, an online Kohonen map is trained on them, and
the U-Matrix splits the lattice into valleys (Normal or Attack clusters) and
hills (borders). A sample whose best match lies on a hill is Unclassified.
"""
import logging
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from config import FEATURE_COLUMNS, LABEL_COLUMN, LABELS, STD_FLOOR, SomConfig
from crypto_primitives import DEFAULT_SUITE, hash_digest

logger = logging.getLogger(__name__)

NORMAL = 'normal'
ATTACK = 'attack'
HILL = 'hill'
UNCLASSIFIED = 'unclassified'

REGION_CODES = {NORMAL: LABELS[NORMAL], ATTACK: LABELS[ATTACK], HILL: 2}
REGION_NAMES = {code: name for name, code in REGION_CODES.items()}

MODEL_MAGIC = b'ESOM'
MODEL_VERSION = 1
_GRID_HEADER = struct.Struct('<4sHIII')
_BMU_CHUNK = 64
_FILL_CHUNK = 256


class DetectorError(Exception):
    pass


class ModelFormatError(DetectorError):
    pass


class DatasetError(DetectorError):
    pass


class DegenerateFeature(UserWarning):
    pass


class EmptyClass(UserWarning):
    pass


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, data):
        return (np.asarray(data, dtype=float) - self.mean) / self.std

    def invert(self, data):
        return np.asarray(data, dtype=float) * self.std + self.mean


@dataclass
class SomGrid:
    rows: int
    cols: int
    weights: np.ndarray

    @property
    def size(self):
        return self.rows * self.cols

    def positions(self):
        """Lattice (row, col) of every neuron, row-major."""
        index = np.arange(self.size)
        return np.stack([index // self.cols, index % self.cols], axis=1).astype(float)


@dataclass(frozen=True)
class RegionLabeling:
    labels: np.ndarray
    classes: np.ndarray
    threshold: float

    def name(self, neuron):
        return REGION_NAMES[int(self.labels[neuron])]

    @property
    def hill_fraction(self):
        return float(np.mean(self.labels == REGION_CODES[HILL]))


@dataclass(frozen=True)
class Classification:
    verdict: str
    best_match: int
    distance: float


@dataclass
class SomModel:
    grid: SomGrid
    labeling: RegionLabeling
    stats: FeatureStats


def _as_matrix(data):
    if isinstance(data, pd.DataFrame):
        data = data[FEATURE_COLUMNS].to_numpy(dtype=float)
    matrix = np.asarray(data, dtype=float)
    if matrix.ndim != 2 or matrix.shape[1] != len(FEATURE_COLUMNS):
        raise DetectorError(f"Expected an (n, {len(FEATURE_COLUMNS)}) feature matrix, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise DetectorError("Feature matrix contains non-finite values")
    return matrix


def normalize_features(data):
    """Z-score every feature; returns (normalized matrix, FeatureStats)."""
    matrix = _as_matrix(data)
    if matrix.shape[0] < 2:
        raise DetectorError("Normalization needs at least two samples")
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    degenerate = std < STD_FLOOR
    if degenerate.any():
        names = [FEATURE_COLUMNS[i] for i in np.flatnonzero(degenerate)]
        logger.warning(f"Zero-variance features {names}, std floored at {STD_FLOOR}")
        warnings.warn(f"zero-variance features {names}", DegenerateFeature, stacklevel=2)
        std = np.where(degenerate, STD_FLOOR, std)
    normalized = (matrix - mean) / std
    normalized[:, degenerate] = 0.0
    return normalized, FeatureStats(mean, std)


def best_matching_units(weights, points):
    """Exhaustive nearest neuron per point; ties go to the lowest index."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    bmus = np.empty(len(points), dtype=np.int64)
    dists = np.empty(len(points))
    for start in range(0, len(points), _BMU_CHUNK):
        chunk = points[start:start + _BMU_CHUNK]
        d2 = ((chunk[:, None, :] - weights[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(d2, axis=1)
        bmus[start:start + len(chunk)] = best
        dists[start:start + len(chunk)] = np.sqrt(d2[np.arange(len(chunk)), best])
    return bmus, dists


def train_som(data, config=None, *, rng, on_epoch=None):
    """Online Kohonen training with a Gaussian neighbourhood.

    Learning rate and radius decay linearly over all steps. Weights start
    as randomly drawn training samples. on_epoch(epoch, weights) is called
    after every epoch.
    """
    config = config or SomConfig()
    matrix = _as_matrix(data)
    n = len(matrix)
    if n == 0:
        raise DetectorError("Cannot train on an empty dataset")

    grid = SomGrid(config.rows, config.cols, matrix[rng.integers(0, n, size=config.rows * config.cols)].copy())
    lattice = grid.positions()
    total = config.epochs * n
    r0 = config.initial_radius
    step = 0

    logger.info(f"Training {config.rows}x{config.cols} SOM on {n} samples for {config.epochs} epochs")
    for epoch in range(config.epochs):
        for index in rng.permutation(n):
            frac = step / (total - 1) if total > 1 else 0.0
            lr = config.lr_start + (config.lr_end - config.lr_start) * frac
            radius = r0 + (config.radius_end - r0) * frac
            x = matrix[index]
            bmu = int(np.argmin(((grid.weights - x) ** 2).sum(axis=1)))
            d2 = ((lattice - lattice[bmu]) ** 2).sum(axis=1)
            h = np.exp(-d2 / (2.0 * radius * radius))
            grid.weights += (lr * h)[:, None] * (x - grid.weights)
            step += 1
        logger.debug(f"SOM epoch {epoch + 1}/{config.epochs}: lr={lr:.4f}, radius={radius:.3f}")
        if on_epoch is not None:
            on_epoch(epoch, grid.weights.copy())
    return grid


_OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def compute_umatrix(grid):
    """Mean distance from each neuron to its 8 lattice neighbours (boundary-truncated)."""
    w = grid.weights.reshape(grid.rows, grid.cols, -1)
    total = np.zeros((grid.rows, grid.cols))
    count = np.zeros((grid.rows, grid.cols))
    for dr, dc in _OFFSETS:
        r_dst = slice(max(0, -dr), grid.rows - max(0, dr))
        c_dst = slice(max(0, -dc), grid.cols - max(0, dc))
        r_src = slice(max(0, dr), grid.rows - max(0, -dr))
        c_src = slice(max(0, dc), grid.cols - max(0, -dc))
        total[r_dst, c_dst] += np.linalg.norm(w[r_dst, c_dst] - w[r_src, c_src], axis=2)
        count[r_dst, c_dst] += 1
    return total / count


def _label_codes(labels):
    labels = pd.Series(labels).reset_index(drop=True)
    if not pd.api.types.is_numeric_dtype(labels):
        unknown = set(labels.unique()) - {NORMAL, ATTACK}
        if unknown:
            raise DetectorError(f"Unknown labels {sorted(unknown)}")
        return labels.map({NORMAL: LABELS[NORMAL], ATTACK: LABELS[ATTACK]}).to_numpy(dtype=np.int64)
    return labels.to_numpy(dtype=np.int64)


def _nearest_fill(codes, filled, lattice):
    """Give every neuron without a code the code of the nearest coded neuron."""
    sources = np.flatnonzero(filled)
    targets = np.flatnonzero(~filled)
    result = codes.copy()
    for start in range(0, len(targets), _FILL_CHUNK):
        chunk = targets[start:start + _FILL_CHUNK]
        d2 = ((lattice[chunk, None, :] - lattice[None, sources, :]) ** 2).sum(axis=2)
        result[chunk] = codes[sources[np.argmin(d2, axis=1)]]
    return result


def label_regions(grid, umatrix, data, labels, hill_quantile=0.85):
    """Hill neurons above the U-height quantile; valleys by majority vote, then nearest fill."""
    u = np.asarray(umatrix, dtype=float).reshape(-1)
    threshold = float(np.quantile(u, hill_quantile))
    hill = u > threshold
    codes = _label_codes(labels)
    bmus, _ = best_matching_units(grid.weights, _as_matrix(data))

    normal_hits = np.bincount(bmus[codes == LABELS[NORMAL]], minlength=grid.size)
    attack_hits = np.bincount(bmus[codes == LABELS[ATTACK]], minlength=grid.size)
    for name, hits in ((NORMAL, normal_hits), (ATTACK, attack_hits)):
        if hits.sum() == 0:
            logger.warning(f"No training sample of class {name}, labeling with a single class")
            warnings.warn(f"class {name} has no best-matching units", EmptyClass, stacklevel=2)

    voted = np.where(attack_hits > normal_hits, LABELS[ATTACK], LABELS[NORMAL])
    has_votes = (normal_hits + attack_hits) > 0
    lattice = grid.positions()

    # class map over the whole lattice, used for the boundary band
    classes = _nearest_fill(voted, has_votes, lattice)

    valley_votes = has_votes & ~hill
    if not valley_votes.any():
        raise DetectorError("No training sample maps to a valley neuron")
    valley = _nearest_fill(voted, valley_votes, lattice)
    region = np.where(hill, REGION_CODES[HILL], valley)
    logger.info(f"Labeled {grid.size} neurons: {int(hill.sum())} hill, "
                f"{int((region == LABELS[ATTACK]).sum())} attack, {int((region == LABELS[NORMAL]).sum())} normal")
    return RegionLabeling(region.astype(np.int64), classes.astype(np.int64), threshold)


def boundary_band(grid, labeling):
    """Neurons with an 8-neighbour of the other class."""
    cls = labeling.classes.reshape(grid.rows, grid.cols)
    band = np.zeros_like(cls, dtype=bool)
    for dr, dc in _OFFSETS:
        r_dst = slice(max(0, -dr), grid.rows - max(0, dr))
        c_dst = slice(max(0, -dc), grid.cols - max(0, dc))
        r_src = slice(max(0, dr), grid.rows - max(0, -dr))
        c_src = slice(max(0, dc), grid.cols - max(0, -dc))
        band[r_dst, c_dst] |= cls[r_dst, c_dst] != cls[r_src, c_src]
    return band.reshape(-1)


def classify(grid, labeling, point):
    bmus, dists = best_matching_units(grid.weights, np.asarray(point, dtype=float).reshape(1, -1))
    best = int(bmus[0])
    name = labeling.name(best)
    return Classification(UNCLASSIFIED if name == HILL else name, best, float(dists[0]))


def classify_batch(grid, labeling, points):
    bmus, dists = best_matching_units(grid.weights, points)
    names = [labeling.name(int(b)) for b in bmus]
    return [Classification(UNCLASSIFIED if name == HILL else name, int(b), float(d))
            for name, b, d in zip(names, bmus, dists)]


def evaluate(verdicts, truth, count_unclassified=False):
    """Detection and false-alarm rates; a rate is None when its class is absent.

    Unclassified verdicts are left out of both rates unless count_unclassified
    is set, in which case they count as not flagged.
    """
    verdicts = list(verdicts)
    truth = [REGION_NAMES[t] if not isinstance(t, str) else t for t in truth]
    if len(verdicts) != len(truth):
        raise DetectorError(f"{len(verdicts)} verdicts for {len(truth)} ground-truth labels")

    frame = pd.DataFrame({'verdict': verdicts, 'truth': truth})
    unclassified = frame['verdict'] == UNCLASSIFIED
    scored = frame if count_unclassified else frame[~unclassified]
    flagged = scored['verdict'] == ATTACK
    attacks = scored['truth'] == ATTACK
    normals = scored['truth'] == NORMAL

    detection = float(flagged[attacks].mean()) if attacks.any() else None
    false_alarm = float(flagged[normals].mean()) if normals.any() else None
    return {
        'detection_rate': detection,
        'false_alarm_rate': false_alarm,
        'attacks': int(attacks.sum()),
        'normals': int(normals.sum()),
        'unclassified': int(unclassified.sum()),
    }


def grid_bytes(grid):
    """Header plus little-endian float32 weights, row-major; the bytes maps are digested over."""
    header = _GRID_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, grid.rows, grid.cols, grid.weights.shape[1])
    return header + grid.weights.astype('<f4').tobytes(order='C')


def fingerprint(grid, suite=DEFAULT_SUITE):
    return hash_digest(grid_bytes(grid), suite=suite)


def model_bytes(model):
    labels = model.labeling.labels.astype(np.uint8).tobytes()
    classes = model.labeling.classes.astype(np.uint8).tobytes()
    tail = struct.pack('<d', model.labeling.threshold)
    stats = model.stats.mean.astype('<f8').tobytes() + model.stats.std.astype('<f8').tobytes()
    return grid_bytes(model.grid) + labels + classes + tail + stats


def save_model(model, path):
    with open(path, 'wb') as handle:
        handle.write(model_bytes(model))
    logger.info(f"Saved {model.grid.rows}x{model.grid.cols} model to {path}")


def load_model(path):
    with open(path, 'rb') as handle:
        data = handle.read()
    if len(data) < _GRID_HEADER.size:
        raise ModelFormatError(f"{path}: file too short for a model header")
    magic, version, rows, cols, features = _GRID_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: not a model file")
    if features != len(FEATURE_COLUMNS):
        raise ModelFormatError(f"{path}: model has {features} features, expected {len(FEATURE_COLUMNS)}")

    size = rows * cols
    offset = _GRID_HEADER.size
    expected = offset + size * features * 4 + 2 * size + 8 + 2 * features * 8
    if len(data) != expected:
        raise ModelFormatError(f"{path}: size {len(data)} does not match a {rows}x{cols} model")
    weights = np.frombuffer(data, dtype='<f4', count=size * features, offset=offset)
    offset += size * features * 4
    labels = np.frombuffer(data, dtype=np.uint8, count=size, offset=offset).astype(np.int64)
    offset += size
    classes = np.frombuffer(data, dtype=np.uint8, count=size, offset=offset).astype(np.int64)
    offset += size
    (threshold,) = struct.unpack_from('<d', data, offset)
    offset += 8
    stats = np.frombuffer(data, dtype='<f8', count=2 * features, offset=offset)

    grid = SomGrid(rows, cols, weights.reshape(size, features).astype(float))
    return SomModel(grid, RegionLabeling(labels, classes, threshold), FeatureStats(stats[:features].copy(),
                                                                                    stats[features:].copy()))


def train_model(frame, config=None, *, rng):
    """Normalize a labeled dataset, train, compute the U-Matrix and label regions."""
    config = config or SomConfig()
    normalized, stats = normalize_features(frame)
    grid = train_som(normalized, config, rng=rng)
    umatrix = compute_umatrix(grid)
    labeling = label_regions(grid, umatrix, normalized, frame[LABEL_COLUMN], config.hill_quantile)
    return SomModel(grid, labeling, stats)


def classify_frame(model, frame):
    """Verdict table for a dataset: one row per sample."""
    points = model.stats.apply(_as_matrix(frame))
    results = classify_batch(model.grid, model.labeling, points)
    return pd.DataFrame({
        'verdict': [r.verdict for r in results],
        'best_match': [r.best_match for r in results],
        'distance': [r.distance for r in results],
    }, index=frame.index)


def umatrix_frame(grid, umatrix, labeling):
    """Plain U-height dump: one row per neuron."""
    positions = grid.positions().astype(int)
    return pd.DataFrame({
        'row': positions[:, 0],
        'col': positions[:, 1],
        'uheight': np.asarray(umatrix).reshape(-1),
        'region': [REGION_NAMES[int(c)] for c in labeling.labels],
    })


def read_dataset(path, labeled=True):
    """Load a feature CSV, naming the first offending row on bad input."""
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise DatasetError(f"{path}: file not found") from None
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise DatasetError(f"{path}: unreadable CSV: {e}") from e

    required = FEATURE_COLUMNS + ([LABEL_COLUMN] if labeled else [])
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DatasetError(f"{path}: missing columns {missing}")
    if frame.empty:
        raise DatasetError(f"{path}: no data rows")

    for column in FEATURE_COLUMNS:
        values = pd.to_numeric(frame[column], errors='coerce')
        bad = values.isna() | ~np.isfinite(values.fillna(0.0))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise DatasetError(f"{path}: row {row}: bad value in column {column}")
        frame[column] = values.astype(float)
    if labeled:
        bad = ~frame[LABEL_COLUMN].isin([NORMAL, ATTACK])
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise DatasetError(f"{path}: row {row}: label must be {NORMAL} or {ATTACK}")
    return frame


def write_dataset(frame, path):
    frame.to_csv(path, index=False, float_format='%.9g')
