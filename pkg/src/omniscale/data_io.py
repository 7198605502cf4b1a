"""Readers and writers for UCR ``.tsv`` and UEA ``.ts`` time series files.

Samples are ``(variates, length)`` float64 arrays. Missing values are NaN
and are kept as NaN until a caller explicitly interpolates or rejects them.
Nothing is normalized on load.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DatasetNotFoundError,
    EmptyDatasetError,
    InvalidArgumentError,
    MissingValuesError,
    ParseError,
    UnsupportedFormatError,
)

DATA_ROOT_ENV = "OSCNN_DATA_ROOT"
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "test")
_NAN_TOKENS = {"nan", "?"}


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def label_sort_key(label: str):
    """Numeric labels sort by value and come before non-numeric ones."""
    try:
        value = float(label)
    except ValueError:
        return (1, 0.0, label)
    return (0, value, label) if math.isfinite(value) else (1, 0.0, label)


@dataclass(frozen=True)
class TimeSeriesDataset:
    samples: tuple
    labels: np.ndarray
    label_names: tuple[str, ...]
    split: str | None = None
    name: str = ""
    original_lengths: tuple[int, ...] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        samples = tuple(_frozen(np.atleast_2d(s)) for s in self.samples)
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_names", tuple(str(x) for x in self.label_names))
        if len(samples) != len(labels):
            raise InvalidArgumentError(f"{len(samples)} samples but {len(labels)} labels")
        if len({s.shape[0] for s in samples}) > 1:
            raise InvalidArgumentError("samples disagree on the number of variates")
        if len(set(self.label_names)) != len(self.label_names):
            raise InvalidArgumentError("label names must be distinct")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.label_names)):
            raise InvalidArgumentError("label ids must lie in [0, n_classes)")
        if self.split is not None and self.split not in SPLITS:
            raise InvalidArgumentError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self):
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    @property
    def n_variates(self) -> int:
        return self.samples[0].shape[0] if self.samples else 0

    @property
    def lengths(self) -> list[int]:
        return [s.shape[1] for s in self.samples]

    @property
    def equal_length(self) -> bool:
        return len(set(self.lengths)) <= 1

    @property
    def max_length(self) -> int:
        return max(self.lengths, default=0)

    @property
    def has_missing(self) -> bool:
        return any(np.isnan(s).any() for s in self.samples)

    def label_strings(self) -> list[str]:
        return [self.label_names[i] for i in self.labels]

    def to_array(self) -> np.ndarray:
        """Stack into ``(n, variates, length)``; needs equal lengths."""
        if not self.equal_length:
            raise InvalidArgumentError("unequal lengths; call pad_to_max first")
        if not self.samples:
            return np.zeros((0, 0, 0))
        return np.stack(self.samples)

    def relabel(self, label_names) -> "TimeSeriesDataset":
        """Re-express labels against a larger label map, e.g. one shared with the other split."""
        label_names = tuple(label_names)
        index = {name: i for i, name in enumerate(label_names)}
        missing = sorted(set(self.label_names) - set(index))
        if missing:
            raise InvalidArgumentError(f"labels {missing} are not in the new label map")
        labels = [index[s] for s in self.label_strings()]
        return replace(self, labels=labels, label_names=label_names)


def _build(samples, raw_labels, split, name, metadata, label_order=None):
    names = tuple(label_order) if label_order is not None else tuple(sorted(set(raw_labels), key=label_sort_key))
    index = {s: i for i, s in enumerate(names)}
    return TimeSeriesDataset(samples, [index[s] for s in raw_labels], names, split, name, metadata=metadata)


def _guess_split(path: Path) -> str | None:
    stem = path.stem.upper()
    if stem.endswith("_TRAIN"):
        return "train"
    if stem.endswith("_TEST"):
        return "test"
    return None


def _guess_name(path: Path) -> str:
    stem = path.stem
    for suffix in ("_TRAIN", "_TEST"):
        if stem.upper().endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def _parse_value(token, path, lineno):
    token = token.strip()
    if token.lower() in _NAN_TOKENS:
        return math.nan
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"non-numeric value {token!r}", path, lineno) from None


# -- UCR ----------------------------------------------------------------------

def parse_ucr_tsv(path, split=None, name=None, equal_length: bool | None = None) -> TimeSeriesDataset:
    """One series per line: label, TAB, values.

    ``equal_length=True`` makes a line whose length differs from the first
    line's a parse error; the default infers the flag from the data.
    """
    path = Path(path)
    samples, labels, first_len = [], [], None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParseError("expected a label followed by at least one value", path, lineno)
            label = parts[0].strip()
            if not label:
                raise ParseError("empty label", path, lineno)
            values = [_parse_value(tok, path, lineno) for tok in parts[1:]]
            if first_len is None:
                first_len = len(values)
            elif equal_length and len(values) != first_len:
                raise ParseError(f"ragged line: {len(values)} values, expected {first_len}", path, lineno)
            samples.append(np.asarray(values)[None, :])
            labels.append(label)
    if not samples:
        raise EmptyDatasetError("no series in file", path)
    meta = {"format": "ucr-tsv", "source": str(path)}
    return _build(samples, labels, split or _guess_split(path), name or _guess_name(path), meta)


def write_ucr_tsv(dataset: TimeSeriesDataset, path) -> None:
    if dataset.n_variates != 1:
        raise InvalidArgumentError("the UCR format holds univariate series only")
    lines = []
    for series, label in zip(dataset.samples, dataset.label_strings()):
        lines.append("\t".join([label] + [_format_value(v, "NaN") for v in series[0]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _format_value(v, nan_token):
    # repr round-trips float64 exactly
    return nan_token if math.isnan(v) else repr(float(v))


# -- UEA ----------------------------------------------------------------------

_BOOL_DIRECTIVES = ("univariate", "equallength", "missing", "timestamps", "classlabel")


def _parse_bool(value, directive, path, lineno):
    v = value.strip().lower()
    if v not in ("true", "false"):
        raise ParseError(f"@{directive} expects true or false, got {value!r}", path, lineno)
    return v == "true"


def parse_uea_ts(path, split=None, name=None) -> TimeSeriesDataset:
    """Header directives, then ``@data`` and one ``dim:dim:...:label`` line per sample."""
    path = Path(path)
    header: dict = {}
    class_labels = None
    samples, labels = [], []
    in_data = False
    n_dims = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not in_data:
                if not line.startswith("@"):
                    raise ParseError("data before the @data directive", path, lineno)
                directive, _, rest = line[1:].partition(" ")
                directive = directive.lower()
                rest = rest.strip()
                if directive == "data":
                    if class_labels is None:
                        raise UnsupportedFormatError("files without @classLabel are not supported", path, lineno)
                    in_data = True
                elif directive == "classlabel":
                    tokens = rest.split()
                    if not tokens or not _parse_bool(tokens[0], directive, path, lineno):
                        raise UnsupportedFormatError("unlabelled (regression) files are not supported", path, lineno)
                    class_labels = tokens[1:]
                    if not class_labels:
                        raise ParseError("@classLabel true lists no labels", path, lineno)
                elif directive in _BOOL_DIRECTIVES:
                    header[directive] = _parse_bool(rest, directive, path, lineno)
                    if directive == "timestamps" and header[directive]:
                        raise UnsupportedFormatError("timestamped series are not supported", path, lineno)
                elif directive in ("dimensions", "serieslength"):
                    try:
                        header[directive] = int(rest)
                    except ValueError:
                        raise ParseError(f"@{directive} expects an integer", path, lineno) from None
                else:
                    header[directive] = rest
                continue
            if "(" in line:
                raise UnsupportedFormatError("sparse or timestamped data lines are not supported", path, lineno)
            *dims, label = line.split(":")
            label = label.strip()
            if not dims:
                raise ParseError("expected dimensions followed by a label", path, lineno)
            if label not in class_labels:
                raise ParseError(f"unknown label {label!r}", path, lineno)
            if n_dims is None:
                n_dims = len(dims)
            elif len(dims) != n_dims:
                raise ParseError(f"{len(dims)} dimensions, expected {n_dims}", path, lineno)
            rows = [[_parse_value(tok, path, lineno) for tok in d.split(",")] for d in dims]
            if len({len(r) for r in rows}) != 1:
                raise ParseError("dimensions of one sample differ in length", path, lineno)
            samples.append(np.asarray(rows))
            labels.append(label)
    if not in_data:
        raise ParseError("missing @data directive", path)
    if not samples:
        raise EmptyDatasetError("no series after @data", path)
    if header.get("univariate") and n_dims != 1:
        raise ParseError(f"@univariate true but samples have {n_dims} dimensions", path)
    if "dimensions" in header and header["dimensions"] != n_dims:
        raise ParseError(f"@dimensions {header['dimensions']} but samples have {n_dims}", path)
    meta = {"format": "uea-ts", "source": str(path), "header": header}
    ds_name = name or header.get("problemname") or _guess_name(path)
    order = sorted(dict.fromkeys(class_labels), key=label_sort_key)
    return _build(samples, labels, split or _guess_split(path), ds_name, meta, order)


def write_uea_ts(dataset: TimeSeriesDataset, path) -> None:
    out = [
        f"@problemName {dataset.name or 'dataset'}",
        "@timeStamps false",
        f"@missing {'true' if dataset.has_missing else 'false'}",
        f"@univariate {'true' if dataset.n_variates == 1 else 'false'}",
        f"@dimensions {dataset.n_variates}",
        f"@equalLength {'true' if dataset.equal_length else 'false'}",
    ]
    if dataset.equal_length and len(dataset):
        out.append(f"@seriesLength {dataset.max_length}")
    out.append("@classLabel true " + " ".join(dataset.label_names))
    out.append("@data")
    for series, label in zip(dataset.samples, dataset.label_strings()):
        dims = [",".join(_format_value(v, "?") for v in row) for row in series]
        out.append(":".join(dims + [label]))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def parse_file(path, **kw) -> TimeSeriesDataset:
    suffix = Path(path).suffix.lower()
    if suffix in (".tsv", ".txt"):
        return parse_ucr_tsv(path, **kw)
    if suffix == ".ts":
        return parse_uea_ts(path, **kw)
    raise UnsupportedFormatError(f"unknown dataset file type {suffix!r}", path)


# -- transforms ---------------------------------------------------------------

def znormalize(series) -> np.ndarray:
    """Per-row mean 0 and population std 1; a constant row becomes zeros."""
    x = np.asarray(series, dtype=np.float64)
    rows = np.atleast_2d(x)
    mean = rows.mean(axis=1, keepdims=True)
    centred = rows - mean
    std = np.sqrt(np.mean(centred**2, axis=1, keepdims=True))
    out = np.zeros_like(rows)
    ok = std[:, 0] > 0
    out[ok] = centred[ok] / std[ok]
    return out.reshape(x.shape)


def znormalize_dataset(dataset: TimeSeriesDataset) -> TimeSeriesDataset:
    meta = dict(dataset.metadata, znorm="per-series population std")
    return replace(dataset, samples=[znormalize(s) for s in dataset.samples], metadata=meta)


def pad_to_max(dataset: TimeSeriesDataset, length: int | None = None) -> TimeSeriesDataset:
    """Right-pad every series with zeros to the longest length (or ``length``)."""
    target = dataset.max_length if length is None else length
    if target < dataset.max_length:
        raise InvalidArgumentError(f"cannot pad to {target}; longest series has length {dataset.max_length}")
    if dataset.equal_length and target == dataset.max_length:
        return dataset
    padded = []
    for s in dataset.samples:
        out = np.zeros((s.shape[0], target))
        out[:, : s.shape[1]] = s
        padded.append(out)
    original = dataset.original_lengths or tuple(dataset.lengths)
    meta = dict(dataset.metadata, padding="right-zeros")
    return replace(dataset, samples=padded, original_lengths=tuple(original), metadata=meta)


def interpolate_missing(series) -> np.ndarray:
    """Linear interpolation over NaN gaps; leading and trailing gaps take the nearest value."""
    x = np.array(series, dtype=np.float64)
    rows = np.atleast_2d(x)
    t = np.arange(rows.shape[1])
    for row in rows:
        bad = np.isnan(row)
        if bad.all():
            raise MissingValuesError("a series is entirely missing")
        if bad.any():
            row[bad] = np.interp(t[bad], t[~bad], row[~bad])
    return rows.reshape(x.shape)


def interpolate_dataset(dataset: TimeSeriesDataset) -> TimeSeriesDataset:
    meta = dict(dataset.metadata, interpolated="linear")
    return replace(dataset, samples=[interpolate_missing(s) for s in dataset.samples], metadata=meta)


def require_complete(dataset: TimeSeriesDataset) -> None:
    if dataset.has_missing:
        n = sum(bool(np.isnan(s).any()) for s in dataset.samples)
        raise MissingValuesError(f"{dataset.name or 'dataset'} has missing values in {n} series; pass interpolate to fill them")


def shared_label_map(*datasets: TimeSeriesDataset) -> tuple[str, ...]:
    names = set()
    for ds in datasets:
        names.update(ds.label_names)
    return tuple(sorted(names, key=label_sort_key))


def align_splits(train: TimeSeriesDataset, test: TimeSeriesDataset):
    """Give both splits one label map so ids mean the same class in each."""
    names = shared_label_map(train, test)
    return train.relabel(names), test.relabel(names)


def prepare_splits(train, test, znorm=False, interpolate=False, pad=True):
    """Apply the opt-in preprocessing to both splits consistently."""
    if interpolate:
        train, test = interpolate_dataset(train), interpolate_dataset(test)
    else:
        require_complete(train)
        require_complete(test)
    if znorm:
        train, test = znormalize_dataset(train), znormalize_dataset(test)
    if pad:
        length = max(train.max_length, test.max_length)
        train, test = pad_to_max(train, length), pad_to_max(test, length)
    return train, test


# -- locating datasets ----------------------------------------------------------

def _manifest_entry(manifest_path: Path, name: str):
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    entry = doc.get(name)
    if entry is None:
        return None
    base = manifest_path.parent
    return {split: base / entry[split] for split in SPLITS}


def locate_dataset(name: str, root=None, manifest=None) -> dict[str, Path]:
    """Find train/test files via an explicit manifest, ``root``, or ``$OSCNN_DATA_ROOT``."""
    if manifest is not None:
        paths = _manifest_entry(Path(manifest), name)
        if paths is None:
            raise DatasetNotFoundError(f"{name} is not listed in {manifest}")
        return paths
    root = root if root is not None else os.environ.get(DATA_ROOT_ENV)
    if root is None:
        raise DatasetNotFoundError(f"{name}: no data root given and ${DATA_ROOT_ENV} is unset")
    root = Path(root)
    if (root / MANIFEST_NAME).is_file():
        paths = _manifest_entry(root / MANIFEST_NAME, name)
        if paths is not None:
            return paths
    for folder in (root / name, root):
        for ext in (".tsv", ".ts"):
            paths = {split: folder / f"{name}_{split.upper()}{ext}" for split in SPLITS}
            if all(p.is_file() for p in paths.values()):
                return paths
    raise DatasetNotFoundError(f"{name} not found under {root}")


def load_dataset(name: str, root=None, manifest=None):
    """Original train/test split of an archive dataset, with a shared label map."""
    paths = locate_dataset(name, root, manifest)
    train = parse_file(paths["train"], split="train", name=name)
    test = parse_file(paths["test"], split="test", name=name)
    if train.n_variates != test.n_variates:
        raise ParseError(f"train has {train.n_variates} variates but test has {test.n_variates}", paths["test"])
    return align_splits(train, test)


# -- JSON dump ----------------------------------------------------------------

def dataset_to_dict(dataset: TimeSeriesDataset) -> dict:
    def values(s):
        return [[None if math.isnan(v) else float(v) for v in row] for row in s]

    return {
        "name": dataset.name,
        "split": dataset.split,
        "label_names": list(dataset.label_names),
        "labels": dataset.labels.tolist(),
        "equal_length": dataset.equal_length,
        "original_lengths": list(dataset.original_lengths) if dataset.original_lengths else None,
        "metadata": dataset.metadata,
        "samples": [values(s) for s in dataset.samples],
    }


def dataset_from_dict(d: dict) -> TimeSeriesDataset:
    samples = [np.array([[math.nan if v is None else v for v in row] for row in s], dtype=np.float64) for s in d["samples"]]
    lengths = d.get("original_lengths")
    return TimeSeriesDataset(
        samples, d["labels"], d["label_names"], d.get("split"), d.get("name", ""),
        tuple(lengths) if lengths else None, d.get("metadata", {}),
    )


def dump_json(dataset: TimeSeriesDataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(dataset), sort_keys=True), encoding="utf-8")


def load_json(path) -> TimeSeriesDataset:
    return dataset_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- synthetic fixture ------------------------------------------------------------

def sine_square_dataset(n_per_class: int, length: int = 64, seed=0, noise=0.1, split=None) -> TimeSeriesDataset:
    """Two separable classes: noisy sine waves (label "sine") and square waves ("square")."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    samples, labels = [], []
    for i in range(2 * n_per_class):
        cls = i % 2
        period = rng.uniform(length / 6, length / 3)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * t / period + phase)
        if cls:
            wave = np.sign(wave)
        samples.append((wave + noise * rng.standard_normal(length))[None, :])
        labels.append(cls)
    return TimeSeriesDataset(samples, labels, ("sine", "square"), split, "SineSquare", metadata={"synthetic": True})
