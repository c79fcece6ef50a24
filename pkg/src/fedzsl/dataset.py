"""Dataset types, file formats, and a planted-structure synthesizer.

Feature datasets hold precomputed visual feature vectors (the encoder is
identity here, so every model downstream is linear and desk-verifiable)
together with integer class labels and a seen/unseen class split.
Attribute matrices hold one semantic vector per class plus a partition of
the attribute dimensions into semantic groups.

All file formats are plain CSV (with an optional raw binary variant for
large feature matrices) and use shortest round-trip float formatting, so
saving, loading, and saving again reproduces byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_TEST_FRACTION_SEEN = 0.2

ATTRIBUTES_FILE = "attributes.csv"
GROUPS_FILE = "groups.csv"
FEATURES_CSV_FILE = "features.csv"
FEATURES_BIN_FILE = "features.bin"
LABELS_FILE = "labels.csv"
SPLITS_FILE = "splits.csv"


class DatasetError(ValueError):
    """Base class for dataset construction and parsing failures."""


class MissingFileError(DatasetError):
    """A required dataset file is absent."""


class FormatError(DatasetError):
    """A dataset file is malformed; the message names the file and line."""


class LabelError(DatasetError):
    """A label falls outside the classes declared by the split."""


class SplitError(DatasetError):
    """A seen/unseen split violates its invariants."""


@dataclass
class ClassSplit:
    """Sorted seen/unseen class ids plus the held-out fraction for seen classes."""

    seen: tuple[int, ...]
    unseen: tuple[int, ...]
    test_fraction_seen: float = DEFAULT_TEST_FRACTION_SEEN

    def __post_init__(self) -> None:
        self.seen = tuple(sorted(int(c) for c in self.seen))
        self.unseen = tuple(sorted(int(c) for c in self.unseen))
        if not self.seen:
            raise SplitError("split must declare at least one seen class")
        if len(set(self.seen)) != len(self.seen):
            raise SplitError("seen class list contains duplicates")
        if len(set(self.unseen)) != len(self.unseen):
            raise SplitError("unseen class list contains duplicates")
        overlap = sorted(set(self.seen) & set(self.unseen))
        if overlap:
            raise SplitError(f"classes {overlap} appear as both seen and unseen")
        if self.seen[0] < 0 or (self.unseen and self.unseen[0] < 0):
            raise SplitError("class ids must be non-negative")
        self.test_fraction_seen = float(self.test_fraction_seen)
        if not 0.0 < self.test_fraction_seen < 1.0:
            raise SplitError(
                f"test_fraction_seen must lie in (0, 1), got {self.test_fraction_seen}"
            )

    @property
    def all_classes(self) -> tuple[int, ...]:
        """Every declared class id, ascending."""
        return tuple(sorted(self.seen + self.unseen))

    @property
    def num_classes(self) -> int:
        """Count of declared classes (seen plus unseen)."""
        return len(self.seen) + len(self.unseen)


def _check_groups(groups: tuple[tuple[int, int], ...], d_a: int) -> None:
    if not groups:
        raise DatasetError("at least one semantic group is required")
    ordered = sorted(groups)
    if ordered[0][0] != 0 or ordered[-1][1] != d_a:
        raise DatasetError(f"semantic groups must cover [0, {d_a}) exactly")
    for (a0, b0), (a1, _) in zip(ordered, ordered[1:]):
        if b0 != a1:
            raise DatasetError(
                f"semantic groups must tile [0, {d_a}) without gaps or overlap; "
                f"range [{a0},{b0}) is not followed by [{b0},...)"
            )
    for a, b in ordered:
        if a >= b:
            raise DatasetError(f"semantic group [{a},{b}) is empty or reversed")


@dataclass
class AttributeMatrix:
    """Per-class semantic vectors (one column per class) with semantic groups.

    ``values[:, y]`` is the attribute vector of class ``y``.  ``groups`` is a
    list of half-open ``(start, end)`` ranges partitioning ``[0, d_a)``; the
    decorrelation loss treats each range as one semantic group.
    """

    values: np.ndarray
    groups: tuple[tuple[int, int], ...]
    class_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DatasetError("attribute matrix must be 2-dimensional")
        d_a, num_classes = self.values.shape
        if d_a < 1 or num_classes < 2:
            raise DatasetError(
                f"attribute matrix needs d_a >= 1 and at least 2 classes, got {d_a}x{num_classes}"
            )
        if not np.all(np.isfinite(self.values)):
            raise DatasetError("attribute matrix contains non-finite values")
        self.groups = tuple(sorted((int(a), int(b)) for a, b in self.groups))
        _check_groups(self.groups, d_a)
        if self.class_names is not None:
            self.class_names = tuple(str(name) for name in self.class_names)
            if len(self.class_names) != num_classes:
                raise DatasetError(
                    f"expected {num_classes} class names, got {len(self.class_names)}"
                )

    @property
    def d_a(self) -> int:
        """Attribute dimensionality."""
        return int(self.values.shape[0])

    @property
    def num_classes(self) -> int:
        """Number of classes (columns)."""
        return int(self.values.shape[1])


@dataclass
class FeatureDataset:
    """Visual feature rows with integer class labels and a seen/unseen split."""

    features: np.ndarray
    labels: np.ndarray
    split: ClassSplit

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DatasetError("feature matrix must be 2-dimensional")
        n, d_v = self.features.shape
        if n < 1 or d_v < 1:
            raise DatasetError(f"feature matrix needs N >= 1 and d_v >= 1, got {n}x{d_v}")
        if self.labels.shape != (n,):
            raise DatasetError(f"expected {n} labels, got shape {self.labels.shape}")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("feature matrix contains non-finite values")
        declared = np.asarray(self.split.all_classes, dtype=np.int64)
        undeclared = ~np.isin(self.labels, declared)
        if np.any(undeclared):
            row = int(np.argmax(undeclared))
            raise LabelError(
                f"label {int(self.labels[row])} at row {row} is not a declared class"
            )

    @property
    def num_samples(self) -> int:
        """Number of feature rows."""
        return int(self.features.shape[0])

    @property
    def d_v(self) -> int:
        """Visual feature dimensionality."""
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray) -> FeatureDataset:
        """Dataset restricted to the given row indices (split carried over)."""
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureDataset(
            features=self.features[idx], labels=self.labels[idx], split=self.split
        )


@dataclass
class SyntheticSpec:
    """Parameters of the planted-structure synthetic dataset."""

    num_seen: int = 20
    num_unseen: int = 5
    d_a: int = 16
    d_v: int = 32
    samples_per_class: int = 50
    attribute_sparsity: float = 0.3
    noise_std: float = 0.1
    group_count: int = 4

    def __post_init__(self) -> None:
        for name in ("num_seen", "num_unseen", "d_a", "d_v", "samples_per_class", "group_count"):
            value = int(getattr(self, name))
            if value < 1:
                raise DatasetError(f"{name} must be a positive integer, got {value}")
            setattr(self, name, value)
        self.attribute_sparsity = float(self.attribute_sparsity)
        if not 0.0 <= self.attribute_sparsity <= 1.0:
            raise DatasetError(
                f"attribute_sparsity must lie in [0, 1], got {self.attribute_sparsity}"
            )
        self.noise_std = float(self.noise_std)
        if not (math.isfinite(self.noise_std) and self.noise_std >= 0.0):
            raise DatasetError(f"noise_std must be finite and >= 0, got {self.noise_std}")
        if self.group_count > self.d_a:
            raise DatasetError(
                f"group_count ({self.group_count}) cannot exceed d_a ({self.d_a})"
            )

    @property
    def num_classes(self) -> int:
        """Total class count (seen plus unseen)."""
        return self.num_seen + self.num_unseen


def _even_ranges(length: int, parts: int) -> tuple[tuple[int, int], ...]:
    base, extra = divmod(length, parts)
    ranges: list[tuple[int, int]] = []
    start = 0
    for i in range(parts):
        end = start + base + (1 if i < extra else 0)
        ranges.append((start, end))
        start = end
    return tuple(ranges)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[FeatureDataset, AttributeMatrix]:
    """Synthesize a dataset with planted linear structure.

    Per-class attribute prototypes are drawn as sparse Gaussian vectors and
    unit-normalized, a hidden mixing map from attribute space to feature
    space is drawn once, and each sample of class ``y`` is the mapped
    prototype plus isotropic Gaussian noise.  The draw order is fixed
    (prototypes, sparsity mask, zero-column repair, mixing map, then noise
    per class ascending), so results are bit-identical for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    num_classes = spec.num_classes
    raw = rng.standard_normal((spec.d_a, num_classes))
    if spec.attribute_sparsity > 0.0:
        keep = rng.random((spec.d_a, num_classes)) >= spec.attribute_sparsity
        raw = np.where(keep, raw, 0.0)
    for y in range(num_classes):
        # A fully-zeroed prototype cannot be normalized; plant one coordinate.
        if not np.any(raw[:, y] != 0.0):
            raw[int(rng.integers(spec.d_a)), y] = 1.0
    values = raw / np.linalg.norm(raw, axis=0, keepdims=True)
    mixing = rng.standard_normal((spec.d_v, spec.d_a)) / math.sqrt(spec.d_a)
    total = num_classes * spec.samples_per_class
    features = np.empty((total, spec.d_v), dtype=np.float64)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), spec.samples_per_class)
    for y in range(num_classes):
        mean = mixing @ values[:, y]
        block = slice(y * spec.samples_per_class, (y + 1) * spec.samples_per_class)
        noise = rng.standard_normal((spec.samples_per_class, spec.d_v))
        features[block] = mean + spec.noise_std * noise
    attrs = AttributeMatrix(values=values, groups=_even_ranges(spec.d_a, spec.group_count))
    split = ClassSplit(
        seen=tuple(range(spec.num_seen)),
        unseen=tuple(range(spec.num_seen, num_classes)),
    )
    return FeatureDataset(features=features, labels=labels, split=split), attrs


def split_train_test(
    ds: FeatureDataset, seed: int
) -> tuple[FeatureDataset, FeatureDataset, FeatureDataset]:
    """Split into train, held-out seen-class test, and unseen-class test sets.

    Every unseen-class sample goes to the unseen test set.  Each seen
    class is split independently: a seeded permutation sends
    ``round(test_fraction_seen * n)`` samples (clamped so both sides stay
    nonempty) to the seen test set and the rest to train.  Row order within
    each output follows the input dataset.
    """
    rng = np.random.default_rng(seed)
    labels = ds.labels
    train_parts: list[np.ndarray] = []
    test_seen_parts: list[np.ndarray] = []
    for y in ds.split.seen:
        idx = np.flatnonzero(labels == y)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise SplitError(f"seen class {y} has {idx.size} sample(s); need at least 2 to split")
        n_test = int(round(ds.split.test_fraction_seen * idx.size))
        n_test = min(max(n_test, 1), idx.size - 1)
        perm = rng.permutation(idx)
        test_seen_parts.append(perm[:n_test])
        train_parts.append(perm[n_test:])
    if ds.split.unseen:
        unseen_idx = np.flatnonzero(np.isin(labels, np.asarray(ds.split.unseen, dtype=np.int64)))
    else:
        unseen_idx = np.empty(0, dtype=np.int64)
    if not train_parts:
        raise SplitError("dataset holds no seen-class samples; the train split would be empty")
    if unseen_idx.size == 0:
        raise SplitError("dataset holds no unseen-class samples; the unseen test split would be empty")
    train = ds.subset(np.sort(np.concatenate(train_parts)))
    test_seen = ds.subset(np.sort(np.concatenate(test_seen_parts)))
    test_unseen = ds.subset(unseen_idx)
    return train, test_seen, test_unseen


def _fmt_real(x: float) -> str:
    # repr of a Python float is the shortest string that parses back exactly,
    # which is what makes save -> load -> save byte-identical.
    return repr(float(x))


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise MissingFileError(f"missing required file: {path}")
    return path.read_text().splitlines()


def _parse_int(token: str, path: Path, line_no: int) -> int:
    try:
        return int(token.strip())
    except ValueError:
        raise FormatError(
            f"{path.name} line {line_no}: cannot parse '{token.strip()}' as an integer"
        ) from None


def _parse_real(token: str, path: Path, line_no: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise FormatError(
            f"{path.name} line {line_no}: cannot parse '{token.strip()}' as a real number"
        ) from None
    if not math.isfinite(value):
        raise FormatError(f"{path.name} line {line_no}: non-finite value '{token.strip()}'")
    return value


def _load_attributes(path: Path, groups_path: Path) -> AttributeMatrix:
    lines = _read_lines(path)
    if not lines:
        raise FormatError(f"{path.name} line 1: empty file; expected 'd_a,num_classes' header")
    header = lines[0].split(",")
    if len(header) != 2:
        raise FormatError(f"{path.name} line 1: header must be 'd_a,num_classes'")
    d_a = _parse_int(header[0], path, 1)
    num_classes = _parse_int(header[1], path, 1)
    if d_a < 1 or num_classes < 2:
        raise FormatError(
            f"{path.name} line 1: need d_a >= 1 and num_classes >= 2, got {d_a},{num_classes}"
        )
    if len(lines) - 1 != d_a:
        raise FormatError(
            f"{path.name}: header declares {d_a} attribute rows, found {len(lines) - 1}"
        )
    values = np.empty((d_a, num_classes), dtype=np.float64)
    for line_no, line in enumerate(lines[1:], start=2):
        tokens = line.split(",")
        if len(tokens) != num_classes:
            raise FormatError(
                f"{path.name} line {line_no}: expected {num_classes} values, found {len(tokens)}"
            )
        values[line_no - 2] = [_parse_real(t, path, line_no) for t in tokens]
    groups = _load_groups(groups_path, d_a)
    return AttributeMatrix(values=values, groups=groups)


def _load_groups(path: Path, d_a: int) -> tuple[tuple[int, int], ...]:
    lines = _read_lines(path)
    groups: list[tuple[int, int]] = []
    for line_no, line in enumerate(lines, start=1):
        tokens = line.split(",")
        if len(tokens) != 2:
            raise FormatError(f"{path.name} line {line_no}: expected 'start,end'")
        groups.append((_parse_int(tokens[0], path, line_no), _parse_int(tokens[1], path, line_no)))
    try:
        _check_groups(tuple(sorted(groups)), d_a)
    except DatasetError as exc:
        raise FormatError(f"{path.name}: {exc}") from None
    return tuple(groups)


def _load_features_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    lines = _read_lines(path)
    if not lines:
        raise FormatError(f"{path.name} line 1: empty file; expected 'N,d_v' header")
    header = lines[0].split(",")
    if len(header) != 2:
        raise FormatError(f"{path.name} line 1: header must be 'N,d_v'")
    n = _parse_int(header[0], path, 1)
    d_v = _parse_int(header[1], path, 1)
    if n < 1 or d_v < 1:
        raise FormatError(f"{path.name} line 1: need N >= 1 and d_v >= 1, got {n},{d_v}")
    if len(lines) - 1 != n:
        raise FormatError(f"{path.name}: header declares {n} feature rows, found {len(lines) - 1}")
    features = np.empty((n, d_v), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for line_no, line in enumerate(lines[1:], start=2):
        tokens = line.split(",")
        if len(tokens) != d_v + 1:
            raise FormatError(
                f"{path.name} line {line_no}: expected label plus {d_v} values, "
                f"found {len(tokens)} fields"
            )
        labels[line_no - 2] = _parse_int(tokens[0], path, line_no)
        features[line_no - 2] = [_parse_real(t, path, line_no) for t in tokens[1:]]
    return features, labels


def _load_features_bin(bin_path: Path, labels_path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = bin_path.read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{bin_path.name}: file shorter than its 8-byte header")
    n, d_v = (int(x) for x in np.frombuffer(raw, dtype="<u4", count=2))
    if n < 1 or d_v < 1:
        raise FormatError(f"{bin_path.name}: need N >= 1 and d_v >= 1, got {n},{d_v}")
    expected = 8 + 4 * n * d_v
    if len(raw) != expected:
        raise FormatError(
            f"{bin_path.name}: expected {expected} bytes for {n}x{d_v} floats, found {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4", count=n * d_v, offset=8)
    features = flat.astype(np.float64).reshape(n, d_v)
    bad = ~np.isfinite(features)
    if np.any(bad):
        row = int(np.argmax(np.any(bad, axis=1)))
        raise FormatError(f"{bin_path.name}: non-finite value in feature row {row}")
    lines = _read_lines(labels_path)
    if len(lines) != n:
        raise FormatError(f"{labels_path.name}: expected {n} labels, found {len(lines)}")
    labels = np.empty(n, dtype=np.int64)
    for line_no, line in enumerate(lines, start=1):
        labels[line_no - 1] = _parse_int(line, labels_path, line_no)
    return features, labels


def _load_splits(path: Path) -> tuple[tuple[int, ...], tuple[int, ...]]:
    lines = _read_lines(path)
    if len(lines) != 2:
        raise FormatError(f"{path.name}: expected exactly 2 lines ('seen:...' and 'unseen:...')")
    parsed: list[tuple[int, ...]] = []
    for line_no, (line, prefix) in enumerate(zip(lines, ("seen:", "unseen:")), start=1):
        if not line.startswith(prefix):
            raise FormatError(f"{path.name} line {line_no}: line must start with '{prefix}'")
        rest = line[len(prefix):].strip()
        if rest:
            parsed.append(tuple(_parse_int(t, path, line_no) for t in rest.split(",")))
        else:
            parsed.append(())
    return parsed[0], parsed[1]


def load_attributes(dir_path: str | Path) -> AttributeMatrix:
    """Load only the attribute matrix and groups from a dataset directory."""
    root = Path(dir_path)
    if not root.is_dir():
        raise MissingFileError(f"dataset directory not found: {root}")
    return _load_attributes(root / ATTRIBUTES_FILE, root / GROUPS_FILE)


def load_dataset(
    dir_path: str | Path,
    test_fraction_seen: float = DEFAULT_TEST_FRACTION_SEEN,
) -> tuple[FeatureDataset, AttributeMatrix]:
    """Load a dataset directory written by :func:`save_dataset`.

    The directory must hold ``attributes.csv``, ``groups.csv``,
    ``splits.csv``, and either ``features.csv`` or the pair
    ``features.bin`` + ``labels.csv`` (the CSV wins when both exist).
    Dimensions are taken from file headers; malformed content raises a
    parse error naming the file and line.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise MissingFileError(f"dataset directory not found: {root}")
    attrs = _load_attributes(root / ATTRIBUTES_FILE, root / GROUPS_FILE)
    csv_path = root / FEATURES_CSV_FILE
    bin_path = root / FEATURES_BIN_FILE
    if csv_path.is_file():
        features, labels = _load_features_csv(csv_path)
        labels_name = FEATURES_CSV_FILE
    elif bin_path.is_file():
        features, labels = _load_features_bin(bin_path, root / LABELS_FILE)
        labels_name = LABELS_FILE
    else:
        raise MissingFileError(
            f"missing feature file: neither {csv_path} nor {bin_path} exists"
        )
    seen, unseen = _load_splits(root / SPLITS_FILE)
    try:
        split = ClassSplit(seen=seen, unseen=unseen, test_fraction_seen=test_fraction_seen)
    except SplitError as exc:
        raise SplitError(f"{SPLITS_FILE}: {exc}") from None
    for side, ids in (("seen", split.seen), ("unseen", split.unseen)):
        out_of_range = [c for c in ids if c >= attrs.num_classes]
        if out_of_range:
            raise SplitError(
                f"{SPLITS_FILE}: {side} class ids {out_of_range} exceed the "
                f"{attrs.num_classes} classes declared by {ATTRIBUTES_FILE}"
            )
    declared = np.asarray(split.all_classes, dtype=np.int64)
    undeclared = ~np.isin(labels, declared)
    if np.any(undeclared):
        row = int(np.argmax(undeclared))
        raise LabelError(
            f"{labels_name}: label {int(labels[row])} at data row {row} is not listed in {SPLITS_FILE}"
        )
    return FeatureDataset(features=features, labels=labels, split=split), attrs


def save_dataset(
    dir_path: str | Path,
    ds: FeatureDataset,
    attrs: AttributeMatrix,
    binary: bool = False,
) -> None:
    """Write the dataset directory layout understood by :func:`load_dataset`.

    With ``binary=True`` features go to ``features.bin`` (little-endian
    float32) plus ``labels.csv``; otherwise everything is CSV.  Reals are
    formatted with shortest round-trip notation, so a loaded dataset
    re-serializes byte-identically.
    """
    if ds.features.shape[0] != ds.labels.shape[0]:
        raise DatasetError("features and labels disagree on sample count")
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    attr_lines = [f"{attrs.d_a},{attrs.num_classes}"]
    attr_lines += [",".join(_fmt_real(v) for v in row) for row in attrs.values]
    (root / ATTRIBUTES_FILE).write_text("\n".join(attr_lines) + "\n")
    group_lines = [f"{a},{b}" for a, b in attrs.groups]
    (root / GROUPS_FILE).write_text("\n".join(group_lines) + "\n")
    split_lines = [
        "seen:" + ",".join(str(c) for c in ds.split.seen),
        "unseen:" + ",".join(str(c) for c in ds.split.unseen),
    ]
    (root / SPLITS_FILE).write_text("\n".join(split_lines) + "\n")
    n, d_v = ds.features.shape
    if binary:
        header = np.asarray([n, d_v], dtype="<u4").tobytes()
        payload = np.ascontiguousarray(ds.features, dtype="<f4").tobytes()
        (root / FEATURES_BIN_FILE).write_bytes(header + payload)
        label_lines = [str(int(label)) for label in ds.labels]
        (root / LABELS_FILE).write_text("\n".join(label_lines) + "\n")
    else:
        feature_lines = [f"{n},{d_v}"]
        for label, row in zip(ds.labels, ds.features):
            feature_lines.append(str(int(label)) + "," + ",".join(_fmt_real(v) for v in row))
        (root / FEATURES_CSV_FILE).write_text("\n".join(feature_lines) + "\n")
