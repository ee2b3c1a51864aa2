"""Binary gradient-boosted regression trees over feature vectors.

Second-order boosting on logistic loss: each round fits one tree to the
gradient/hessian statistics of the current margins, with exact greedy split
search over sorted feature values, gain regularized by ``lambda_reg``, and
leaf values -G/(H+lambda).  Margins are additive: base score plus the
shrinkage-scaled sum of leaf values along each tree's routing.  Fully
deterministic for a fixed (data, config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class BoostConfig:
    num_trees: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    subsample: float = 1.0
    feature_subsample: float = 1.0
    min_child_weight: float = 1.0
    lambda_reg: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.subsample <= 1.0 or not 0.0 < self.feature_subsample <= 1.0:
            raise ValueError("subsample fractions must be in (0, 1]")
        if self.min_child_weight < 0 or self.lambda_reg < 0:
            raise ValueError("min_child_weight and lambda_reg must be non-negative")


@dataclass
class RegressionTree:
    """Flat preorder node arrays; feature < 0 marks a leaf."""

    feature: np.ndarray  # int32, -1 for leaves
    threshold: np.ndarray  # float64, 0 for leaves
    left: np.ndarray  # int32 child indices, -1 for leaves
    right: np.ndarray
    value: np.ndarray  # float64 leaf values, 0 for internal nodes

    def num_nodes(self) -> int:
        return len(self.feature)

    def route(self, x: np.ndarray) -> float:
        """Leaf value for a single feature vector (x < threshold goes left)."""
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] < self.threshold[i] else self.right[i]
        return float(self.value[i])

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            f = self.feature[node[active]]
            go_left = x[np.flatnonzero(active), f] < self.threshold[node[active]]
            node[active] = np.where(go_left, self.left[node[active]], self.right[node[active]])
            active = self.feature[node] >= 0
        return self.value[node]


@dataclass
class BoostModel:
    trees: list[RegressionTree]
    base_score: float
    config: BoostConfig
    train_losses: list[float] = field(default_factory=list)


@dataclass
class SearchSpace:
    """Uniform sampling ranges for random hyperparameter search.

    Integer ranges are inclusive; ``learning_rate`` is sampled log-uniformly.
    """

    num_trees: tuple[int, int] = (50, 500)
    max_depth: tuple[int, int] = (3, 10)
    learning_rate: tuple[float, float] = (0.01, 0.3)
    subsample: tuple[float, float] = (0.5, 1.0)
    feature_subsample: tuple[float, float] = (0.5, 1.0)
    min_child_weight: tuple[float, float] = (1.0, 10.0)
    lambda_reg: tuple[float, float] = (0.0, 5.0)
    num_trials: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.num_trials < 1:
            raise ValueError("num_trials must be >= 1")
        for name in ("num_trees", "max_depth", "learning_rate", "subsample",
                     "feature_subsample", "min_child_weight", "lambda_reg"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}")
        if self.learning_rate[0] <= 0:
            raise ValueError("learning_rate range must be positive (log-uniform)")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _leaf_value(g_sum: float, h_sum: float, lam: float) -> float:
    denom = h_sum + lam
    return -g_sum / denom if denom > 0 else 0.0


class _TreeGrower:
    """Grows one tree from presorted per-feature row orderings.

    ``order`` columns list row ids in ascending feature value; children reuse
    the parent's ordering via a stable counting partition, so no re-sorting
    happens below the root.
    """

    def __init__(self, x_sorted_cols, order, col_ids, g, h, config):
        self.xcols = x_sorted_cols  # N x F float64 feature matrix (subsampled columns)
        self.order = order  # N x F int32
        self.col_ids = col_ids  # original feature index per column
        self.g = g
        self.h = h
        self.cfg = config
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.leaf_rows: list[tuple[np.ndarray, float]] = []

    def _append_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def _make_leaf(self, idx: int, rows: np.ndarray, g_sum: float, h_sum: float) -> None:
        val = _leaf_value(g_sum, h_sum, self.cfg.lambda_reg)
        self.value[idx] = val
        self.leaf_rows.append((rows, val))

    def _best_split(self, order: np.ndarray, g_sum: float, h_sum: float):
        """Scan every candidate split; returns (col, pos, threshold) or None."""
        lam = self.cfg.lambda_reg
        mcw = self.cfg.min_child_weight
        xs = np.take_along_axis(self.xcols, order, axis=0)
        gl = np.cumsum(self.g[order], axis=0)[:-1]
        hl = np.cumsum(self.h[order], axis=0)[:-1]
        gr = g_sum - gl
        hr = h_sum - hl
        valid = (xs[1:] != xs[:-1]) & (hl >= mcw) & (hr >= mcw)
        denom_l = hl + lam
        denom_r = hr + lam
        parent_term = (g_sum * g_sum / (h_sum + lam)) if (h_sum + lam) > 0 else 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (
                np.where(denom_l > 0, gl * gl / np.where(denom_l > 0, denom_l, 1.0), 0.0)
                + np.where(denom_r > 0, gr * gr / np.where(denom_r > 0, denom_r, 1.0), 0.0)
                - parent_term
            )
        gain[~valid] = -np.inf
        best_pos = gain.argmax(axis=0)  # first max per column -> lowest threshold
        col_gains = gain[best_pos, np.arange(gain.shape[1])]
        col = int(col_gains.argmax())  # first max -> lowest feature index
        if not col_gains[col] > 0.0:
            return None
        pos = int(best_pos[col])
        thr = 0.5 * (xs[pos, col] + xs[pos + 1, col])
        return col, pos, float(thr), float(col_gains[col])

    def _partition(self, order: np.ndarray, col: int, pos: int):
        n_left = pos + 1
        member = np.zeros(len(self.g), dtype=bool)
        member[order[:n_left, col]] = True
        in_left = member[order]
        dest = np.where(
            in_left,
            np.cumsum(in_left, axis=0) - 1,
            n_left + np.cumsum(~in_left, axis=0) - 1,
        )
        out = np.empty_like(order)
        np.put_along_axis(out, dest, order, axis=0)
        return out[:n_left], out[n_left:]

    def _grow(self, order: np.ndarray, depth: int) -> int:
        rows = order[:, 0]
        g_sum = float(self.g[rows].sum())
        h_sum = float(self.h[rows].sum())
        idx = self._append_node()
        if depth >= self.cfg.max_depth or len(rows) < 2:
            self._make_leaf(idx, rows, g_sum, h_sum)
            return idx
        best = self._best_split(order, g_sum, h_sum)
        if best is None:
            self._make_leaf(idx, rows, g_sum, h_sum)
            return idx
        col, pos, thr, _ = best
        left_order, right_order = self._partition(order, col, pos)
        self.feature[idx] = int(self.col_ids[col])
        self.threshold[idx] = thr
        self.left[idx] = self._grow(left_order, depth + 1)
        self.right[idx] = self._grow(right_order, depth + 1)
        return idx

    def grow(self) -> RegressionTree:
        self._grow(self.order, 0)
        return RegressionTree(
            feature=np.array(self.feature, dtype=np.int32),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int32),
            right=np.array(self.right, dtype=np.int32),
            value=np.array(self.value, dtype=np.float64),
        )


def fit(features: np.ndarray, labels: np.ndarray, config: BoostConfig) -> BoostModel:
    """Boost ``num_trees`` rounds on logistic loss.

    The base score is the log-odds of the class prior.  Row subsampling
    zeroes gradient/hessian contributions of left-out rows; feature
    subsampling draws a column subset per round.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    n, d = x.shape
    if n < 2:
        raise ValueError("need at least 2 samples")
    pos = y.sum()
    if pos == 0 or pos == n:
        raise ValueError("labels must contain both classes")

    base_score = math.log(pos / (n - pos))
    full_order = np.argsort(x, axis=0, kind="stable").astype(np.int32)
    rng = np.random.default_rng(config.seed)
    margins = np.full(n, base_score)
    trees: list[RegressionTree] = []
    losses: list[float] = []

    for _ in range(config.num_trees):
        p = _sigmoid(margins)
        losses.append(float(np.mean(np.logaddexp(0.0, margins) - y * margins)))
        g = p - y
        h = p * (1.0 - p)
        if config.subsample < 1.0:
            keep = rng.choice(n, size=max(1, int(config.subsample * n)), replace=False)
            mask = np.zeros(n, dtype=bool)
            mask[keep] = True
            g = np.where(mask, g, 0.0)
            h = np.where(mask, h, 0.0)
        if config.feature_subsample < 1.0:
            k = max(1, int(round(config.feature_subsample * d)))
            col_ids = np.sort(rng.choice(d, size=k, replace=False))
        else:
            col_ids = np.arange(d)
        grower = _TreeGrower(
            x_sorted_cols=x[:, col_ids],
            order=full_order[:, col_ids],
            col_ids=col_ids,
            g=g,
            h=h,
            config=config,
        )
        tree = grower.grow()
        trees.append(tree)
        for rows, val in grower.leaf_rows:
            margins[rows] += config.learning_rate * val

    return BoostModel(trees=trees, base_score=base_score, config=config, train_losses=losses)


def predict_margin(model: BoostModel, feature: np.ndarray) -> float:
    """base_score + learning_rate * sum of routed leaf values."""
    feature = np.asarray(feature, dtype=np.float64).reshape(-1)
    _check_dim(model, feature.shape[0])
    total = model.base_score
    for tree in model.trees:
        total += model.config.learning_rate * tree.route(feature)
    return float(total)


def predict_margins(model: BoostModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("expected an N x D feature matrix")
    _check_dim(model, features.shape[1])
    margins = np.full(len(features), model.base_score)
    for tree in model.trees:
        margins += model.config.learning_rate * tree.predict_batch(features)
    return margins


def predict(model: BoostModel, feature: np.ndarray, threshold: float = 0.0) -> str:
    """'spam' iff margin strictly exceeds the threshold, else 'ham'."""
    return "spam" if predict_margin(model, feature) > threshold else "ham"


def _check_dim(model: BoostModel, dim: int) -> None:
    max_f = max((int(t.feature.max()) for t in model.trees if len(t.feature)), default=-1)
    if max_f >= dim:
        raise ValueError(f"feature vector of length {dim} but model splits on index {max_f}")


@dataclass
class SearchTrial:
    config: BoostConfig
    f1: float


def _f1(preds: np.ndarray, truth: np.ndarray) -> float:
    tp = int(np.sum((preds == 1) & (truth == 1)))
    fp = int(np.sum((preds == 1) & (truth == 0)))
    fn = int(np.sum((preds == 0) & (truth == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _stratified_indices(labels: np.ndarray, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    holdout = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        k = max(1, int(round(fraction * len(idx))))
        holdout.extend(rng.permutation(idx)[:k].tolist())
    mask = np.zeros(len(labels), dtype=bool)
    mask[holdout] = True
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def _sample_config(space: SearchSpace, rng, trial: int) -> BoostConfig:
    lo, hi = space.learning_rate
    lr = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return BoostConfig(
        num_trees=int(rng.integers(space.num_trees[0], space.num_trees[1] + 1)),
        max_depth=int(rng.integers(space.max_depth[0], space.max_depth[1] + 1)),
        learning_rate=lr,
        subsample=float(rng.uniform(*space.subsample)),
        feature_subsample=float(rng.uniform(*space.feature_subsample)),
        min_child_weight=float(rng.uniform(*space.min_child_weight)),
        lambda_reg=float(rng.uniform(*space.lambda_reg)),
        seed=trial,
    )


def random_search(
    features: np.ndarray,
    labels: np.ndarray,
    space: SearchSpace,
    folds_or_holdout: float | int = 0.25,
) -> tuple[BoostConfig, list[SearchTrial]]:
    """Sample configs uniformly and return the best by validation F1.

    ``folds_or_holdout`` is either a holdout fraction in (0, 1) or an integer
    fold count >= 2 for cross-validated scoring.  The data partition is fixed
    across trials; ties keep the earlier trial.
    """
    y = np.asarray(labels).astype(int).reshape(-1)
    x = np.asarray(features, dtype=np.float64)
    if len(set(y.tolist())) < 2:
        raise ValueError("labels must contain both classes")
    rng = np.random.default_rng(space.seed)

    if isinstance(folds_or_holdout, int) and not isinstance(folds_or_holdout, bool) and folds_or_holdout >= 2:
        k = folds_or_holdout
        perm_by_class = [rng.permutation(np.flatnonzero(y == cls)) for cls in (0, 1)]
        folds = [np.concatenate([p[i::k] for p in perm_by_class]) for i in range(k)]

        def evaluate(cfg: BoostConfig) -> float:
            scores = []
            for i in range(k):
                val_idx = folds[i]
                tr_idx = np.concatenate([folds[j] for j in range(k) if j != i])
                if len(set(y[tr_idx].tolist())) < 2:
                    continue
                model = fit(x[tr_idx], y[tr_idx], cfg)
                preds = (predict_margins(model, x[val_idx]) > 0).astype(int)
                scores.append(_f1(preds, y[val_idx]))
            return float(np.mean(scores)) if scores else 0.0
    else:
        fraction = float(folds_or_holdout)
        if not 0.0 < fraction < 1.0:
            raise ValueError("holdout fraction must be in (0, 1)")
        tr_idx, val_idx = _stratified_indices(y, fraction, rng)

        def evaluate(cfg: BoostConfig) -> float:
            model = fit(x[tr_idx], y[tr_idx], cfg)
            preds = (predict_margins(model, x[val_idx]) > 0).astype(int)
            return _f1(preds, y[val_idx])

    trials: list[SearchTrial] = []
    best_idx = 0
    for t in range(space.num_trials):
        cfg = _sample_config(space, rng, t)
        score = evaluate(cfg)
        trials.append(SearchTrial(config=cfg, f1=score))
        if score > trials[best_idx].f1:
            best_idx = t
    return replace(trials[best_idx].config), trials
