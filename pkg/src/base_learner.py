"""Built-in CART regression tree and external score ingestion"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.data import LabeledDataset, ScoreTable, missing_mask, numeric_column, read_frame
from src.errors import IngestionError, SchemaVersionError, UnknownGroupError
from src.utils import atomic_write_text, logger

TREE_SCHEMA_VERSION = 2


@dataclass
class TreeNode:
    index: int
    parent: Optional[int]
    depth: int
    n_samples: int
    value: float
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


class NodeModel(BaseModel):
    index: int
    parent: Optional[int]
    depth: int
    n_samples: int
    value: float
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None


class TreeDocument(BaseModel):
    kind: Literal["regression_tree"] = "regression_tree"
    schema_version: int = TREE_SCHEMA_VERSION
    n_features: int
    # group labels in code order; empty for a tree trained on the features only
    group_labels: List[str] = Field(default_factory=list)
    min_samples_leaf: int = Field(ge=1)
    max_depth: Optional[int] = None
    nodes: List[NodeModel]


def _best_split(features: np.ndarray, targets: np.ndarray, min_samples_leaf: int):
    """Largest SSE reduction over midpoints of consecutive distinct values.

    Ties keep the first candidate found: lowest feature index, then lowest threshold.
    """
    n, d = features.shape
    total = targets.sum()
    total_sq = np.square(targets).sum()
    parent_sse = float(np.square(targets - targets.mean()).sum())
    min_gain = 1e-12 * max(parent_sse, 1.0)

    best_gain, best_feature, best_threshold = min_gain, None, None
    left_n = np.arange(1, n, dtype=float)
    right_n = n - left_n
    size_ok = (left_n >= min_samples_leaf) & (right_n >= min_samples_leaf)
    if not size_ok.any():
        return None, None

    for j in range(d):
        order = np.argsort(features[:, j], kind="stable")
        xs = features[order, j]
        ys = targets[order]
        left_sum = np.cumsum(ys)[:-1]
        left_sq = np.cumsum(np.square(ys))[:-1]
        right_sum = total - left_sum
        right_sq = total_sq - left_sq
        sse = (left_sq - left_sum ** 2 / left_n) + (right_sq - right_sum ** 2 / right_n)

        valid = size_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        gains = np.where(valid, parent_sse - sse, -np.inf)
        i = int(np.argmax(gains))
        if gains[i] > best_gain:
            threshold = 0.5 * (xs[i] + xs[i + 1])
            if not xs[i] <= threshold < xs[i + 1]:
                threshold = xs[i]
            best_gain, best_feature, best_threshold = float(gains[i]), j, float(threshold)

    return best_feature, best_threshold


class RegressionTree:
    """Greedy squared-loss tree; every leaf predicts the mean of its training targets.

    When fitted with groups, the group enters as one extra input column holding its
    index in ``group_labels``, so node feature ``n_features`` splits on the group.
    """

    def __init__(self, min_samples_leaf: int = 20, max_depth: Optional[int] = None):
        if min_samples_leaf < 1:
            raise IngestionError(f"min_samples_leaf must be >= 1, got {min_samples_leaf}")
        if max_depth is not None and max_depth < 0:
            raise IngestionError(f"max_depth must be >= 0, got {max_depth}")
        self.min_samples_leaf = min_samples_leaf
        self.max_depth = max_depth
        self.n_features: Optional[int] = None
        self.group_labels: Tuple[str, ...] = ()
        self.nodes: List[TreeNode] = []

    @property
    def uses_groups(self) -> bool:
        return bool(self.group_labels)

    def _inputs(self, features: np.ndarray, groups: Optional[Sequence[str]]) -> np.ndarray:
        if not self.uses_groups:
            return features
        if groups is None:
            raise IngestionError("This tree takes the group as an input; pass the group labels")
        groups = [str(g) for g in groups]
        if len(groups) != features.shape[0]:
            raise IngestionError(f"Got {len(groups)} group labels for {features.shape[0]} samples")
        codes = {label: float(i) for i, label in enumerate(self.group_labels)}
        unknown = sorted(set(groups) - codes.keys())
        if unknown:
            raise UnknownGroupError(f"Unknown group(s) {unknown}; the tree was trained on {list(self.group_labels)}")
        return np.column_stack([features, [codes[g] for g in groups]])

    def fit(
        self, features: np.ndarray, targets: np.ndarray, groups: Optional[Sequence[str]] = None
    ) -> "RegressionTree":
        features = np.asarray(features, dtype=float)
        targets = np.asarray(targets, dtype=float)
        if features.ndim != 2 or features.shape[0] == 0 or features.shape[1] == 0:
            raise IngestionError(f"Expected a non-empty (n, d) feature matrix, got shape {features.shape}")
        if targets.shape != (features.shape[0],):
            raise IngestionError(f"Got {targets.shape} targets for {features.shape[0]} samples")

        self.n_features = features.shape[1]
        self.group_labels = () if groups is None else tuple(sorted({str(g) for g in groups}))
        features = self._inputs(features, groups)
        self.nodes = []
        # depth-first, so node indices follow preorder
        stack = [(np.arange(features.shape[0]), None, 0, None)]
        while stack:
            rows, parent, depth, side = stack.pop()
            node = TreeNode(
                index=len(self.nodes),
                parent=parent,
                depth=depth,
                n_samples=len(rows),
                value=float(np.mean(targets[rows])),
            )
            self.nodes.append(node)
            if parent is not None:
                setattr(self.nodes[parent], side, node.index)

            if self.max_depth is not None and depth >= self.max_depth:
                continue
            if len(rows) < 2 * self.min_samples_leaf or np.ptp(targets[rows]) == 0:
                continue
            feature, threshold = _best_split(features[rows], targets[rows], self.min_samples_leaf)
            if feature is None:
                continue

            node.feature, node.threshold = feature, threshold
            go_left = features[rows, feature] <= threshold
            stack.append((rows[~go_left], node.index, depth + 1, "right"))
            stack.append((rows[go_left], node.index, depth + 1, "left"))

        logger.debug(f"Tree fitted: {self.n_leaves} leaves, depth {self.depth}")
        return self

    @property
    def n_leaves(self) -> int:
        return sum(1 for node in self.nodes if node.is_leaf)

    @property
    def depth(self) -> int:
        return max((node.depth for node in self.nodes), default=0)

    def _check_fitted(self):
        if not self.nodes:
            raise IngestionError("The tree has not been fitted")

    def predict(self, features: np.ndarray, groups: Optional[Sequence[str]] = None) -> np.ndarray:
        self._check_fitted()
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features[None, :]
        if features.shape[1] != self.n_features:
            raise IngestionError(f"Expected {self.n_features} features, got {features.shape[1]}")
        features = self._inputs(features, groups)

        feature = np.array([-1 if n.is_leaf else n.feature for n in self.nodes])
        threshold = np.array([0.0 if n.is_leaf else n.threshold for n in self.nodes])
        left = np.array([-1 if n.is_leaf else n.left for n in self.nodes])
        right = np.array([-1 if n.is_leaf else n.right for n in self.nodes])
        value = np.array([n.value for n in self.nodes])

        position = np.zeros(features.shape[0], dtype=int)
        for _ in range(self.depth):
            rows = np.flatnonzero(feature[position] >= 0)
            if rows.size == 0:
                break
            at = position[rows]
            go_left = features[rows, feature[at]] <= threshold[at]
            position[rows] = np.where(go_left, left[at], right[at])
        return value[position]

    def training_sse(self, dataset: LabeledDataset) -> float:
        return float(np.square(dataset.targets - self.predict(dataset.features, dataset.groups)).sum())

    def to_document(self) -> TreeDocument:
        self._check_fitted()
        return TreeDocument(
            n_features=self.n_features,
            group_labels=list(self.group_labels),
            min_samples_leaf=self.min_samples_leaf,
            max_depth=self.max_depth,
            nodes=[NodeModel(**vars(node)) for node in self.nodes],
        )

    @classmethod
    def from_document(cls, document: TreeDocument) -> "RegressionTree":
        tree = cls(document.min_samples_leaf, document.max_depth)
        tree.n_features = document.n_features
        tree.group_labels = tuple(document.group_labels)
        n_inputs = document.n_features + (1 if document.group_labels else 0)
        if any(node.feature is not None and not 0 <= node.feature < n_inputs for node in document.nodes):
            raise SchemaVersionError(f"Tree document splits on a feature outside [0, {n_inputs})")
        tree.nodes = [TreeNode(**node.model_dump()) for node in document.nodes]
        return tree

    def save(self, path: Path):
        atomic_write_text(Path(path), self.to_document().model_dump_json(indent=2))

    @classmethod
    def load(cls, path: Path) -> "RegressionTree":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("kind") != "regression_tree" or payload.get("schema_version") != TREE_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"{path} is not a regression tree document of schema version {TREE_SCHEMA_VERSION}"
            )
        return cls.from_document(TreeDocument.model_validate(payload))


def fit_tree(
    dataset: LabeledDataset,
    min_samples_leaf: int = 20,
    max_depth: Optional[int] = None,
    use_groups: bool = True,
) -> RegressionTree:
    """Fit f(x, s); with ``use_groups=False`` the tree sees the features only."""
    if len(dataset) == 0:
        raise IngestionError("Cannot fit a tree on an empty dataset")
    if dataset.targets is None:
        raise IngestionError("Tree fitting needs a labeled dataset")
    groups = dataset.groups if use_groups else None
    return RegressionTree(min_samples_leaf, max_depth).fit(dataset.features, dataset.targets, groups)


def predict_tree(tree: RegressionTree, x: np.ndarray, s: Optional[str] = None) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise IngestionError(f"Expected a single feature vector, got shape {x.shape}")
    return float(tree.predict(x, None if s is None else [s])[0])


def predict_many(
    tree: RegressionTree,
    features: np.ndarray,
    groups: Optional[Sequence[str]] = None,
    clip: Optional[float] = None,
) -> np.ndarray:
    predictions = tree.predict(features, groups)
    if clip is not None:
        predictions = np.clip(predictions, -clip, clip)
    return predictions


def scores_from_file(path: Path, pred_col: str, group_col: str) -> ScoreTable:
    """(score, group) pairs taken from an external model's prediction column."""
    frame = read_frame(Path(path), [pred_col, group_col])
    if len(frame) == 0:
        logger.warning(f"No rows in {Path(path).name}")
        return ScoreTable(np.empty(0), np.empty(0, dtype=object))

    blank_groups = np.flatnonzero(missing_mask(frame, [group_col]))
    if blank_groups.size:
        raise IngestionError(f"Missing value in column '{group_col}' at row {int(blank_groups[0]) + 1}")
    scores = numeric_column(frame, pred_col)
    groups = frame[group_col].str.strip().to_numpy(dtype=object)
    return ScoreTable(scores, groups)
