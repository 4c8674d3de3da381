"""Shallow classifiers over precomputed utterance embeddings: multinomial
logistic regression, shrunken-covariance linear discriminant analysis, and a
CART random forest.

Training is deterministic: records are canonically sorted by utterance_id
before anything touches an RNG, so results are independent of manifest row
order. Forest tree t draws its bootstrap and feature subsets from its own
stream seeded with seed + t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .embeddings import EmbeddingRecord
from .labels import softmax


def _design_matrix(records: list[EmbeddingRecord], labels: dict[str, int], k: int):
    if not records:
        raise ValueError("no embedding records")
    recs = sorted(records, key=lambda r: r.utterance_id)
    dims = {len(r.vector) for r in recs}
    if len(dims) != 1:
        raise ValueError(f"mixed embedding dimensions {sorted(dims)}")
    d = dims.pop()
    if d == 0:
        raise ValueError("zero-dimensional embeddings")
    x = np.stack([r.vector.astype(np.float64) for r in recs])
    y = np.empty(len(recs), dtype=int)
    for i, r in enumerate(recs):
        if r.utterance_id not in labels:
            raise ValueError(f"no label for utterance {r.utterance_id!r}")
        lab = int(labels[r.utterance_id])
        if not 0 <= lab < k:
            raise ValueError(f"{r.utterance_id}: label {lab} outside task range")
        y[i] = lab
    return x, y, d


@dataclass
class LogRegHead:
    kind = "logreg"
    n_classes: int
    weights: np.ndarray  # [K, d]
    biases: np.ndarray   # [K]


@dataclass
class LdaHead:
    kind = "lda"
    n_classes: int
    classes: np.ndarray      # class ids present in training
    coef: np.ndarray         # [m, d], rows are Sigma^-1 mu_c
    intercepts: np.ndarray   # [m], -mu_c' Sigma^-1 mu_c / 2 + log prior_c
    means: np.ndarray        # [m, d]
    priors: np.ndarray       # [m]
    cov_chol: np.ndarray     # lower Cholesky factor of the shrunken covariance
    shrinkage: float


@dataclass
class Tree:
    feature: np.ndarray    # int32, -1 marks a leaf
    threshold: np.ndarray  # float32
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    counts: np.ndarray     # uint32 [n_nodes, K]


@dataclass
class ForestHead:
    kind = "forest"
    n_classes: int
    dim: int
    trees: list[Tree]
    in_bag: np.ndarray | None = None  # [n_trees, n_train], not serialized


HeadModel = LogRegHead | LdaHead | ForestHead


def train_logreg(
    records: list[EmbeddingRecord],
    labels: dict[str, int],
    k: int,
    l2_lambda: float = 1e-4,
    tol: float = 1e-6,
    max_iters: int = 10000,
) -> LogRegHead:
    """Full-batch Adam (lr 0.1, halved whenever the loss rises) on mean
    cross-entropy + (l2_lambda/2) ||W||^2, until the gradient max-norm falls
    under tol or max_iters."""
    x, y, d = _design_matrix(records, labels, k)
    if len(np.unique(y)) < 2:
        raise ValueError("need at least 2 distinct labels")
    n = len(y)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    w = np.zeros((k, d))
    b = np.zeros(k)
    m_w, v_w = np.zeros_like(w), np.zeros_like(w)
    m_b, v_b = np.zeros_like(b), np.zeros_like(b)
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8

    def loss_of():
        logits = x @ w.T + b
        shift = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shift).sum(axis=1))
        ce = float(np.mean(lse - shift[np.arange(n), y]))
        return ce + 0.5 * l2_lambda * float(np.sum(w * w))

    prev_loss = loss_of()
    for t in range(1, max_iters + 1):
        p = softmax(x @ w.T + b)
        g = (p - onehot) / n
        g_w = g.T @ x + l2_lambda * w
        g_b = g.sum(axis=0)
        if max(np.abs(g_w).max(), np.abs(g_b).max()) < tol or lr < 1e-15:
            break
        m_w = b1 * m_w + (1 - b1) * g_w
        v_w = b2 * v_w + (1 - b2) * g_w**2
        m_b = b1 * m_b + (1 - b1) * g_b
        v_b = b2 * v_b + (1 - b2) * g_b**2
        c1, c2 = 1 - b1**t, 1 - b2**t
        step_w = lr * (m_w / c1) / (np.sqrt(v_w / c2) + eps)
        step_b = lr * (m_b / c1) / (np.sqrt(v_b / c2) + eps)
        w -= step_w
        b -= step_b
        loss = loss_of()
        if loss > prev_loss:
            # reject the step and restart the moments; the objective is
            # convex, so only the step size can be at fault
            w += step_w
            b += step_b
            lr *= 0.5
            m_w[:], v_w[:], m_b[:], v_b[:] = 0, 0, 0, 0
        else:
            prev_loss = loss
    return LogRegHead(n_classes=k, weights=w, biases=b)


def train_lda(
    records: list[EmbeddingRecord],
    labels: dict[str, int],
    k: int,
    shrinkage: float = 0.1,
) -> LdaHead:
    """Closed-form LDA with pooled within-class covariance (normalized by
    n - n_classes_present) shrunk toward (tr Sigma / d) I."""
    if not 0 <= shrinkage <= 1:
        raise ValueError("shrinkage must lie in [0, 1]")
    x, y, d = _design_matrix(records, labels, k)
    classes = np.unique(y)
    n = len(y)
    for c in classes:
        if np.sum(y == c) < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")

    m = len(classes)
    means = np.stack([x[y == c].mean(axis=0) for c in classes])
    priors = np.array([np.mean(y == c) for c in classes])
    cov = np.zeros((d, d))
    for i, c in enumerate(classes):
        diff = x[y == c] - means[i]
        cov += diff.T @ diff
    cov /= max(n - m, 1)
    shrunk = (1 - shrinkage) * cov + shrinkage * (np.trace(cov) / d) * np.eye(d)

    chol, lower = cho_factor(shrunk, lower=True)
    coef = cho_solve((chol, lower), means.T).T  # rows: Sigma^-1 mu_c
    intercepts = -0.5 * np.einsum("md,md->m", means, coef) + np.log(priors)
    return LdaHead(
        n_classes=k,
        classes=classes,
        coef=coef,
        intercepts=intercepts,
        means=means,
        priors=priors,
        cov_chol=np.tril(chol),
        shrinkage=float(shrinkage),
    )


def _grow_tree(
    x: np.ndarray,
    y: np.ndarray,
    k: int,
    min_leaf: int,
    max_features: int,
    rng: np.random.Generator,
) -> Tree:
    n, d = x.shape
    feature, threshold, left, right, counts = [], [], [], [], []

    def leaf(idx) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=k))
        return node

    def build(idx: np.ndarray) -> int:
        node_counts = np.bincount(y[idx], minlength=k)
        if node_counts.max() == len(idx) or len(idx) < min_leaf:
            return leaf(idx)
        feats = rng.choice(d, size=min(max_features, d), replace=False)
        best = None  # (gini, feature, threshold)
        for f in feats:
            vals = x[idx, f]
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            sy = y[idx][order]
            cut = np.nonzero(sv[:-1] < sv[1:])[0]
            if len(cut) == 0:
                continue
            prefix = np.cumsum(np.eye(k, dtype=np.int64)[sy], axis=0)
            left_c = prefix[cut]
            total = prefix[-1]
            right_c = total - left_c
            nl = left_c.sum(axis=1)
            nr = right_c.sum(axis=1)
            g_l = 1.0 - ((left_c / nl[:, None]) ** 2).sum(axis=1)
            g_r = 1.0 - ((right_c / nr[:, None]) ** 2).sum(axis=1)
            score = (nl * g_l + nr * g_r) / len(idx)
            j = int(np.argmin(score))
            if best is None or score[j] < best[0]:
                best = (float(score[j]), int(f), float((sv[cut[j]] + sv[cut[j] + 1]) / 2))
        if best is None:  # all candidate features constant in this node
            return leaf(idx)
        _, f, thr = best
        node = len(feature)
        feature.append(f)
        threshold.append(thr)
        left.append(-1)
        right.append(-1)
        counts.append(node_counts)
        mask = x[idx, f] < thr
        left_id = build(idx[mask])
        right_id = build(idx[~mask])
        left[node] = left_id
        right[node] = right_id
        return node

    build(np.arange(n))
    return Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float32),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        counts=np.asarray(counts, dtype=np.uint32),
    )


def train_forest(
    records: list[EmbeddingRecord],
    labels: dict[str, int],
    k: int,
    n_trees: int = 100,
    min_leaf: int = 2,
    seed: int = 0,
) -> ForestHead:
    """Bootstrap CART forest with Gini splits over ceil(sqrt(d)) features per
    node; bootstrap indices are drawn by record position after the canonical
    sort, so training does not depend on input order."""
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if k < 2:
        raise ValueError("need a task with at least 2 classes")
    x, y, d = _design_matrix(records, labels, k)
    n = len(y)
    max_features = math.ceil(math.sqrt(d))
    trees = []
    in_bag = np.zeros((n_trees, n), dtype=bool)
    for t in range(n_trees):
        rng = np.random.default_rng(seed + t)
        idx = rng.integers(0, n, size=n)
        in_bag[t, np.unique(idx)] = True
        trees.append(_grow_tree(x[idx], y[idx], k, min_leaf, max_features, rng))
    return ForestHead(n_classes=k, dim=d, trees=trees, in_bag=in_bag)


def _tree_leaf_counts(tree: Tree, v: np.ndarray) -> np.ndarray:
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if v[tree.feature[node]] < tree.threshold[node] else tree.right[node]
    return tree.counts[node]


def _forest_probs(trees: list[Tree], v: np.ndarray, k: int) -> np.ndarray:
    """Mean of per-tree leaf distributions, accumulated in exact rational
    arithmetic; the float vector sums to exactly 1."""
    acc = [Fraction(0)] * k
    for tree in trees:
        c = _tree_leaf_counts(tree, v)
        total = int(c.sum())
        for j in range(k):
            acc[j] += Fraction(int(c[j]), total)
    t = len(trees)
    out = np.empty(k, dtype=np.float64)
    for j in range(k - 1):
        out[j] = float(acc[j] / t)
    out[k - 1] = 1.0 - out[: k - 1].sum()
    return out


def predict_scores(model: HeadModel, record: EmbeddingRecord) -> np.ndarray:
    """Class scores for one embedding; always a valid probability vector."""
    v = np.asarray(record.vector, dtype=np.float64)
    if isinstance(model, LogRegHead):
        if v.shape[0] != model.weights.shape[1]:
            raise ValueError(
                f"dimension mismatch: {v.shape[0]} vs model {model.weights.shape[1]}"
            )
        return softmax(model.weights @ v + model.biases)
    if isinstance(model, LdaHead):
        if v.shape[0] != model.coef.shape[1]:
            raise ValueError(
                f"dimension mismatch: {v.shape[0]} vs model {model.coef.shape[1]}"
            )
        disc = model.coef @ v + model.intercepts
        probs = np.zeros(model.n_classes)
        probs[model.classes] = softmax(disc)
        return probs
    if isinstance(model, ForestHead):
        if v.shape[0] != model.dim:
            raise ValueError(f"dimension mismatch: {v.shape[0]} vs model {model.dim}")
        return _forest_probs(model.trees, v, model.n_classes)
    raise TypeError(f"unknown head model {type(model).__name__}")


def forest_oob_accuracy(
    model: ForestHead, records: list[EmbeddingRecord], labels: dict[str, int]
) -> float:
    """Out-of-bag accuracy over the training records."""
    if model.in_bag is None:
        raise ValueError("model carries no bootstrap bookkeeping")
    x, y, _ = _design_matrix(records, labels, model.n_classes)
    correct, counted = 0, 0
    for i in range(len(y)):
        out_trees = [t for t, tree in enumerate(model.trees) if not model.in_bag[t, i]]
        if not out_trees:
            continue
        acc = np.zeros(model.n_classes)
        for t in out_trees:
            c = _tree_leaf_counts(model.trees[t], x[i]).astype(np.float64)
            acc += c / c.sum()
        correct += int(np.argmax(acc) == y[i])
        counted += 1
    if counted == 0:
        raise ValueError("no out-of-bag samples")
    return correct / counted
