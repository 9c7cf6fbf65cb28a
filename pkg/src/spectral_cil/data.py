"""Spectral dataset generation, ingestion, normalization, and task splitting.

The default data source is a synthetic generator: each class is a fixed
profile (a few Gaussian peaks on a linear baseline) plus i.i.d. per-band
noise, so classes are cleanly separable yet overlap band-wise. Real spectra
can be dropped in through a flat CSV (``b0,...,b<n-1>,label`` per line).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

# Default per-class sample counts for the 25-class incremental layout
# (five tasks of five classes; total 8675).
DEFAULT_CLASS_COUNTS = (
    300, 150, 600, 150, 150,
    150, 150, 300, 450, 450,
    900, 150, 150, 600, 150,
    275, 150, 900, 300, 300,
    300, 900, 450, 150, 150,
)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


class DataError(ValueError):
    pass


@dataclass
class SpectralDataset:
    x: np.ndarray            # (n, bands) float
    y: np.ndarray            # (n,) int class ids
    split: np.ndarray        # (n,) int split codes, -1 when unassigned
    sample_ids: np.ndarray   # (n,) stable unique ids

    def __post_init__(self):
        for arr in (self.x, self.y, self.split, self.sample_ids):
            arr.setflags(write=False)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def bands(self):
        return self.x.shape[1]

    @property
    def n_classes(self):
        return int(self.y.max()) + 1 if self.n else 0

    def select(self, class_ids, split=None):
        """Rows whose label is in class_ids, optionally filtered by split."""
        mask = np.isin(self.y, np.asarray(list(class_ids)))
        if split is not None:
            code = SPLIT_NAMES[split] if isinstance(split, str) else split
            mask &= self.split == code
        idx = np.flatnonzero(mask)
        return self.x[idx], self.y[idx], self.sample_ids[idx]

    def with_splits(self, split):
        return SpectralDataset(self.x, self.y, np.asarray(split),
                               self.sample_ids)


@dataclass
class TaskSpec:
    class_ids: list
    class_counts: dict


@dataclass
class TaskStream:
    tasks: list            # list[TaskSpec], class sets pairwise disjoint
    seed: int | None = None

    def classes_through(self, task_idx):
        out = []
        for task in self.tasks[:task_idx + 1]:
            out.extend(task.class_ids)
        return out

    def __len__(self):
        return len(self.tasks)


def scale_counts(counts, factor, minimum=5):
    return [max(minimum, round(c * factor)) for c in counts]


def generate_synthetic(counts, bands=128, seed=0, noise_sigma=0.05,
                       rng=None):
    """Build a synthetic dataset with len(counts) classes.

    Each class profile is 2-4 Gaussian peaks with class-specific centers,
    widths, and amplitudes on a sloped baseline; samples add i.i.d. Gaussian
    band noise. Deterministic for a given seed.
    """
    if bands < 8:
        raise DataError(f"bands={bands} < 8")
    if any(c <= 0 for c in counts):
        raise DataError("all class counts must be positive")
    rng = rng or np.random.default_rng(np.random.SeedSequence(seed))
    grid = np.arange(bands, dtype=np.float64)
    xs, ys = [], []
    for class_id, count in enumerate(counts):
        n_peaks = int(rng.integers(2, 5))
        centers = rng.uniform(0.05, 0.95, n_peaks) * (bands - 1)
        widths = rng.uniform(0.015, 0.06, n_peaks) * bands
        amps = rng.uniform(0.5, 1.5, n_peaks)
        slope = rng.uniform(-0.3, 0.3)
        intercept = rng.uniform(0.2, 0.8)
        profile = intercept + slope * grid / (bands - 1)
        for c, w, a in zip(centers, widths, amps):
            profile = profile + a * np.exp(-0.5 * ((grid - c) / w) ** 2)
        noise = rng.standard_normal((count, bands)) * noise_sigma
        xs.append(profile[None, :] + noise)
        ys.append(np.full(count, class_id, dtype=np.int64))
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys)
    n = x.shape[0]
    return SpectralDataset(x, y, np.full(n, -1, dtype=np.int8),
                           np.arange(n, dtype=np.int64))


def snv_normalize(spectrum):
    """Center to zero mean and scale to unit population std."""
    arr = np.asarray(spectrum, dtype=np.float64)
    std = arr.std()
    if std == 0:
        raise DataError("constant spectrum: SNV undefined (zero std)")
    out = (arr - arr.mean()) / std
    return out.astype(np.asarray(spectrum).dtype)


def snv_normalize_all(dataset: SpectralDataset) -> SpectralDataset:
    x = np.asarray(dataset.x, dtype=np.float64)
    std = x.std(axis=1, keepdims=True)
    if (std == 0).any():
        bad = int(np.flatnonzero(std[:, 0] == 0)[0])
        raise DataError(f"constant spectrum at row {bad}: SNV undefined")
    x = (x - x.mean(axis=1, keepdims=True)) / std
    return SpectralDataset(x.astype(dataset.x.dtype), dataset.y,
                           dataset.split.copy(), dataset.sample_ids)


def split_tasks(dataset: SpectralDataset, classes_per_task=5,
                seed=None) -> TaskStream:
    """Chunk the label space into ordered disjoint tasks."""
    if dataset.n == 0:
        raise DataError("empty dataset")
    classes = sorted(int(c) for c in np.unique(dataset.y))
    tasks = []
    for start in range(0, len(classes), classes_per_task):
        ids = classes[start:start + classes_per_task]
        counts = {c: int((dataset.y == c).sum()) for c in ids}
        tasks.append(TaskSpec(ids, counts))
    return TaskStream(tasks, seed=seed)


def _largest_remainder(n, ratios):
    exact = np.asarray(ratios, dtype=np.float64) * n
    base = np.floor(exact).astype(int)
    short = n - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    for i in range(short):
        base[order[i]] += 1
    return base


def assign_splits(dataset: SpectralDataset, ratios=(0.7, 0.15, 0.15),
                  rng=None, seed=0) -> SpectralDataset:
    """Stratified train/val/test assignment, per-class counts within +-1."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios {ratios} do not sum to 1")
    rng = rng or np.random.default_rng(np.random.SeedSequence(seed))
    split = np.full(dataset.n, -1, dtype=np.int8)
    for class_id in np.unique(dataset.y):
        idx = np.flatnonzero(dataset.y == class_id)
        if len(idx) < 3:
            raise DataError(
                f"class {class_id} has {len(idx)} samples; need >= 3 to split")
        counts = _largest_remainder(len(idx), ratios)
        perm = rng.permutation(len(idx))
        ordered = idx[perm]
        split[ordered[:counts[0]]] = TRAIN
        split[ordered[counts[0]:counts[0] + counts[1]]] = VAL
        split[ordered[counts[0] + counts[1]:]] = TEST
    return dataset.with_splits(split)


def herding_select(features, quota):
    """Greedy selection keeping the running mean nearest the class mean.

    At each step the candidate minimizing ||mean(class) - mean(selected +
    candidate)||_2 is taken; ties resolve to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if quota > n:
        raise DataError(f"herding quota {quota} > available {n}")
    mu = features.mean(axis=0)
    chosen = []
    chosen_sum = np.zeros_like(mu)
    remaining = np.ones(n, dtype=bool)
    for t in range(1, quota + 1):
        cand = np.flatnonzero(remaining)
        means = (chosen_sum[None, :] + features[cand]) / t
        dist = ((means - mu[None, :]) ** 2).sum(axis=1)
        pick = cand[int(np.argmin(dist))]
        chosen.append(int(pick))
        chosen_sum += features[pick]
        remaining[pick] = False
    return chosen


class ExemplarStore:
    """Per-class retained training samples; grows without bound in classes."""

    def __init__(self, quota=20, mode="random"):
        if mode not in ("random", "herding"):
            raise DataError(f"unknown exemplar selection mode {mode!r}")
        self.quota = quota
        self.mode = mode
        self._by_class = {}

    @property
    def class_ids(self):
        return sorted(self._by_class)

    @property
    def total(self):
        return sum(len(v[1]) for v in self._by_class.values())

    def add_task(self, x, y, sample_ids, class_ids, rng=None,
                 feature_fn=None):
        """Retain up to `quota` train samples for each newly finished class."""
        if self.quota == 0:
            return
        for class_id in class_ids:
            if class_id in self._by_class:
                raise DataError(f"class {class_id} already stored")
            idx = np.flatnonzero(y == class_id)
            if self.quota > len(idx):
                raise DataError(
                    f"quota {self.quota} > {len(idx)} available for class "
                    f"{class_id}")
            if self.mode == "random":
                pick = rng.choice(len(idx), size=self.quota, replace=False)
            else:
                feats = feature_fn(x[idx])
                pick = herding_select(feats, self.quota)
            sel = idx[np.asarray(pick)]
            self._by_class[class_id] = (x[sel].copy(), sample_ids[sel].copy())

    def gather(self):
        """All stored samples as (x, y, sample_ids), ordered by class."""
        if not self._by_class:
            return (np.zeros((0, 0), dtype=np.float32),
                    np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        xs, ys, ids = [], [], []
        for class_id in self.class_ids:
            cx, cids = self._by_class[class_id]
            xs.append(cx)
            ys.append(np.full(len(cids), class_id, dtype=np.int64))
            ids.append(cids)
        return np.concatenate(xs), np.concatenate(ys), np.concatenate(ids)


def load_csv(path):
    """Read ``b0,...,b<n-1>,label`` rows; band count fixed by the first row."""
    xs, ys = [], []
    bands = None
    with open(path, newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if row_no == 1 and _looks_like_header(row):
                continue
            if bands is None:
                bands = len(row) - 1
                if bands < 1:
                    raise DataError(f"row {row_no}: no band columns")
            elif len(row) - 1 != bands:
                raise DataError(
                    f"row {row_no}: expected {bands} band values + label, "
                    f"got {len(row)} cells")
            try:
                values = [float(v) for v in row[:-1]]
                label = float(row[-1])
            except ValueError as exc:
                raise DataError(f"row {row_no}: non-numeric cell ({exc})")
            if label != int(label) or label < 0:
                raise DataError(f"row {row_no}: label {row[-1]!r} is not a "
                                f"non-negative integer")
            xs.append(values)
            ys.append(int(label))
    if not xs:
        raise DataError(f"{path}: no samples")
    x = np.asarray(xs, dtype=np.float32)
    y = np.asarray(ys, dtype=np.int64)
    n = len(ys)
    return SpectralDataset(x, y, np.full(n, -1, dtype=np.int8),
                           np.arange(n, dtype=np.int64))


def save_csv(dataset: SpectralDataset, path, header=False):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow([f"b{i}" for i in range(dataset.bands)]
                            + ["label"])
        for row, label in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def _looks_like_header(row):
    try:
        float(row[0])
        return False
    except ValueError:
        return True
