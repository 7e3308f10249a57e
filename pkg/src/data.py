"""Datasets: synthetic generator, CSV ingestion and seeded splitting"""
import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from src.errors import EmptyGroupError, IngestionError
from src.utils import atomic_write_text, format_float, logger, seed_stream

MISSING_TOKENS = {"", "na", "nan", "null", "none"}


class LabeledSample(NamedTuple):
    x: np.ndarray
    s: str
    y: Optional[float]


@dataclass(frozen=True)
class LabeledDataset:
    """Column form of a list of (x, s, y) samples. Targets are None for unlabeled data."""

    features: np.ndarray
    groups: np.ndarray
    targets: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        groups = np.asarray([str(g) for g in self.groups], dtype=object)
        if features.ndim != 2 or len(groups) != features.shape[0]:
            raise IngestionError(
                f"Features of shape {features.shape} do not match {len(groups)} group labels"
            )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "groups", groups)
        if self.targets is not None:
            targets = np.asarray(self.targets, dtype=float)
            if targets.shape != (features.shape[0],):
                raise IngestionError(f"Got {targets.shape[0]} targets for {features.shape[0]} samples")
            if not np.all(np.isfinite(targets)):
                raise IngestionError("Targets must be finite")
            object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            y = None if self.targets is None else float(self.targets[i])
            yield LabeledSample(self.features[i], self.groups[i], y)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def group_labels(self) -> Tuple[str, ...]:
        return tuple(sorted(set(self.groups.tolist())))

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=int)
        targets = None if self.targets is None else self.targets[indices]
        return LabeledDataset(self.features[indices], self.groups[indices], targets)

    def without_targets(self) -> "LabeledDataset":
        return LabeledDataset(self.features, self.groups, None)


@dataclass(frozen=True)
class ScoreTable:
    """(score, group) pairs from any regression model."""

    scores: np.ndarray
    groups: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)


class SyntheticConfig(BaseModel):
    n: int = Field(4000, ge=1)
    p_group_b: float = Field(0.5, ge=0.0, le=1.0)
    noise_sd: float = Field(5.0, gt=0.0)
    A: float = Field(100.0, gt=0.0)
    seed: int = 0


class SplitConfig(BaseModel):
    train: float = Field(0.6, ge=0.0)
    calibration: float = Field(0.2, ge=0.0)
    test: float = Field(0.2, ge=0.0)
    seed: int = 0
    stratify: bool = False

    @model_validator(mode="after")
    def _fractions_sum_to_one(self):
        total = self.train + self.calibration + self.test
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"Split fractions must sum to 1, got {total}")
        return self


def structural_mean(features: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """f*(X, S) = 5 X1 + 3 X2 + 20 + 1{S=B} (15 + 2 (X1 - 5)^2)."""
    features = np.asarray(features, dtype=float)
    x1, x2 = features[:, 0], features[:, 1]
    is_b = np.asarray(groups) == "B"
    return 5.0 * x1 + 3.0 * x2 + 20.0 + is_b * (15.0 + 2.0 * (x1 - 5.0) ** 2)


def generate_synthetic(cfg: SyntheticConfig) -> LabeledDataset:
    """Two groups with a location shift and a quadratic polarization for group B."""
    rng = seed_stream(cfg.seed, "generate")
    features = rng.uniform(0.0, 10.0, size=(cfg.n, 2))
    groups = np.where(rng.random(cfg.n) < cfg.p_group_b, "B", "A").astype(object)
    noise = rng.normal(0.0, cfg.noise_sd, size=cfg.n)
    targets = np.clip(structural_mean(features, groups) + noise, -cfg.A, cfg.A)
    return LabeledDataset(features, groups, targets)


def read_frame(path: Path, columns: Sequence[str]) -> pd.DataFrame:
    """Read a CSV as raw strings and check that the declared columns exist."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"Input file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame(columns=list(columns))
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise IngestionError(f"Missing column(s) {missing} in {path.name}")
    return frame


def missing_mask(frame: pd.DataFrame, columns: Sequence[str]) -> np.ndarray:
    mask = np.zeros(len(frame), dtype=bool)
    for column in columns:
        mask |= frame[column].str.strip().str.lower().isin(MISSING_TOKENS).to_numpy()
    return mask


def numeric_column(frame: pd.DataFrame, column: str, require_finite: bool = True) -> np.ndarray:
    """Parse a column to floats; errors name the 1-based data row."""
    values = np.empty(len(frame))
    for row, raw in enumerate(frame[column].tolist(), start=1):
        try:
            value = float(raw)
        except ValueError:
            raise IngestionError(f"Non-numeric value {raw!r} in column '{column}' at row {row}") from None
        if require_finite and not math.isfinite(value):
            raise IngestionError(f"Non-finite value {raw!r} in column '{column}' at row {row}")
        values[row - 1] = value
    return values


def load_csv(
    path: Path,
    feature_cols: Sequence[str],
    group_col: str,
    target_col: Optional[str] = None,
) -> Tuple[LabeledDataset, int]:
    """Load typed samples; rows with a missing value in a used column are dropped."""
    used = list(feature_cols) + [group_col] + ([target_col] if target_col else [])
    frame = read_frame(path, used)

    dropped_mask = missing_mask(frame, used)
    n_dropped = int(dropped_mask.sum())
    if n_dropped:
        logger.warning(f"Dropped {n_dropped} row(s) with missing values from {Path(path).name}")
    frame = frame.loc[~dropped_mask].reset_index(drop=True)
    if len(frame) == 0:
        raise IngestionError(f"No usable rows in {Path(path).name}")

    if feature_cols:
        features = np.column_stack([numeric_column(frame, c) for c in feature_cols])
    else:
        features = np.zeros((len(frame), 0))
    groups = frame[group_col].str.strip().to_numpy(dtype=object)
    targets = numeric_column(frame, target_col) if target_col else None

    logger.info(f"Loaded {len(frame)} rows from {Path(path).name}")
    return LabeledDataset(features, groups, targets), n_dropped


def dataset_to_csv(dataset: LabeledDataset, feature_names: Optional[Sequence[str]] = None) -> str:
    names = list(feature_names or [f"x{j + 1}" for j in range(dataset.n_features)])
    fieldnames = names + ["s"] + (["y"] if dataset.targets is not None else [])
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(fieldnames)
    for i in range(len(dataset)):
        row = [format_float(v) for v in dataset.features[i]] + [dataset.groups[i]]
        if dataset.targets is not None:
            row.append(format_float(dataset.targets[i]))
        writer.writerow(row)
    return buffer.getvalue()


def write_csv(dataset: LabeledDataset, path: Path, feature_names: Optional[Sequence[str]] = None):
    """Write the interchange schema (x1..xd, s, y)."""
    atomic_write_text(Path(path), dataset_to_csv(dataset, feature_names))


def _cut_points(n: int, cfg: SplitConfig) -> Tuple[int, int]:
    first = math.floor(round(cfg.train * n, 9))
    second = math.floor(round((cfg.train + cfg.calibration) * n, 9))
    return first, second


def split(
    dataset: LabeledDataset,
    cfg: SplitConfig,
    declared_groups: Optional[Sequence[str]] = None,
) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Seeded shuffle and contiguous cut into (train, calibration, test).

    The calibration part is returned without targets.
    """
    n = len(dataset)
    if n < 3:
        raise IngestionError(f"Need at least 3 samples to split, got {n}")

    rng = seed_stream(cfg.seed, "split")
    if cfg.stratify:
        parts: List[List[np.ndarray]] = [[], [], []]
        for label in dataset.group_labels:
            members = np.flatnonzero(dataset.groups == label)
            members = members[rng.permutation(len(members))]
            first, second = _cut_points(len(members), cfg)
            for part, chunk in zip(parts, np.split(members, [first, second])):
                part.append(chunk)
        train_idx, calib_idx, test_idx = (np.sort(np.concatenate(p)) for p in parts)
    else:
        order = rng.permutation(n)
        first, second = _cut_points(n, cfg)
        train_idx, calib_idx, test_idx = np.split(order, [first, second])

    expected = set(declared_groups) if declared_groups is not None else set(dataset.group_labels)
    for name, idx in (("train", train_idx), ("calibration", calib_idx), ("test", test_idx)):
        present = set(dataset.groups[idx].tolist())
        vanished = sorted(expected - present)
        if vanished:
            raise EmptyGroupError(
                f"Group(s) {vanished} have no sample in the {name} part; "
                f"try another seed or enable stratified splitting"
            )

    return (
        dataset.subset(train_idx),
        dataset.subset(calib_idx).without_targets(),
        dataset.subset(test_idx),
    )
