"""Accelerated classification engines held to the linear-scan contract.

Two routes, both guaranteed-correct by construction:

* a cut/split decision tree whose every leaf holds a superset of the rules
  matching any key that reaches it, and
* an optional learned partition index: a piecewise-linear model over one
  dimension predicting a rule's position among a disjoint subset of rule
  intervals, with the maximum prediction error measured exactly at build
  time. Lookups scan the predicted position +/- that bound, so the model
  can only narrow the candidate set, never exclude a matching rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rules import MatchResult, RuleSet


@dataclass(frozen=True)
class EngineConfig:
    leaf_max_rules: int | None = 16   # None = single-leaf linear scan
    use_learned_index: bool = False
    max_depth: int = 40
    index_segments: int = 64
    max_nodes: int = 200_000


class _Leaf:
    __slots__ = ("order", "lo", "hi", "score")

    def __init__(self, rule_idx: np.ndarray, lo: np.ndarray, hi: np.ndarray, score: np.ndarray):
        order = rule_idx[np.argsort(-score[rule_idx], kind="stable")]
        self.order = order                  # global rule positions, best score first
        self.lo = lo[order]
        self.hi = hi[order]
        self.score = score[order]


class _Node:
    __slots__ = ("dim", "threshold", "left", "right")

    def __init__(self, dim: int, threshold: int, left, right):
        self.dim = dim
        self.threshold = threshold
        self.left = left
        self.right = right


class _LearnedIndex:
    """Single-dimension piecewise-linear position model with verified error bound."""

    def __init__(self, dim: int, sel: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                 score: np.ndarray, segments: int, domain_max: int):
        self.dim = dim
        order = sel[np.argsort(lo[sel, dim], kind="stable")]
        self.rule_pos = order                  # global rule positions sorted by interval lo
        self.ilo = lo[order, dim]
        self.ihi = hi[order, dim]
        self.lo = lo[order]
        self.hi = hi[order]
        self.score = score[order]
        m = len(order)
        if m == 0:
            self.edges = np.empty(0)
            self.coef = np.zeros((1, 2))
            self.window = 0
            self.max_error = 0.0
            return
        # Training points: both ends of each constant stretch of the true
        # position function pos(k) = searchsorted(ilo, k, 'right') - 1.
        stretch_hi = np.append(self.ilo[1:] - 1, np.int64(domain_max))
        xs = np.column_stack([self.ilo, stretch_hi]).reshape(-1).astype(np.float64)
        ys = np.repeat(np.arange(m, dtype=np.float64), 2)
        n_seg = max(1, min(segments, m))
        edge_idx = np.linspace(0, m - 1, n_seg + 1).astype(np.int64)
        self.edges = self.ilo[edge_idx[1:-1]].astype(np.float64) if n_seg > 1 else np.empty(0)
        self.coef = np.zeros((n_seg, 2))
        seg_of_x = np.searchsorted(self.edges, xs, side="right")
        for s in range(n_seg):
            mask = seg_of_x == s
            px, py = xs[mask], ys[mask]
            if len(px) == 0:
                continue
            mx, my = px.mean(), py.mean()
            var = float(((px - mx) ** 2).sum())
            if var == 0.0:
                self.coef[s] = (0.0, my)
            else:
                a = float(((px - mx) * (py - my)).sum()) / var
                self.coef[s] = (a, my - a * mx)
        # Exact worst-case error: the model is linear and the true position
        # constant between eval points, so checking stretch ends plus both
        # sides of every interior segment edge bounds the error everywhere
        # a matching rule exists.
        eval_x = [xs]
        for e in self.edges:
            eval_x.append(np.array([e, max(e - 1, 0)]))
        ex = np.concatenate(eval_x)
        truth = np.searchsorted(self.ilo, ex, side="right") - 1
        err = np.abs(self._predict(ex) - truth)
        self.window = int(math.ceil(float(err.max()))) + 1
        self.max_error = float(err.max())

    def _predict(self, x: np.ndarray) -> np.ndarray:
        seg = np.searchsorted(self.edges, x, side="right")
        return self.coef[seg, 0] * x + self.coef[seg, 1]

    def candidates(self, value: int) -> range:
        m = len(self.rule_pos)
        if m == 0:
            return range(0)
        p = int(round(float(self._predict(np.array([float(value)]))[0])))
        lo = max(0, p - self.window)
        hi = min(m - 1, p + self.window)
        return range(lo, hi + 1)


class ClassifierEngine:
    def __init__(self, ruleset: RuleSet, config: EngineConfig = EngineConfig()):
        self.ruleset = ruleset
        self.config = config
        lo, hi, score, ids = ruleset.arrays()
        self._lo, self._hi, self._score, self._ids = lo, hi, score, ids
        n = len(ruleset)
        all_idx = np.arange(n, dtype=np.int64)
        self.index: _LearnedIndex | None = None
        tree_idx = all_idx
        if config.use_learned_index and n:
            sel = _greedy_disjoint(lo[:, 0], hi[:, 0])
            domain_max = (1 << ruleset.schema[0].bits) - 1
            self.index = _LearnedIndex(0, sel, lo, hi, score, config.index_segments, domain_max)
            in_index = np.zeros(n, dtype=bool)
            in_index[sel] = True
            tree_idx = all_idx[~in_index]
        self._node_budget = config.max_nodes
        box = [fd_interval(b) for b in (fd.bits for fd in ruleset.schema)]
        self.root = self._build(tree_idx, box, 0)
        self.depth = _tree_depth(self.root)
        self.leaf_count = _leaf_count(self.root)

    # -- build ---------------------------------------------------------------

    def _build(self, idx: np.ndarray, box: list[tuple[int, int]], depth: int):
        cfg = self.config
        leaf_max = cfg.leaf_max_rules if cfg.leaf_max_rules is not None else math.inf
        if len(idx) <= leaf_max or depth >= cfg.max_depth or self._node_budget <= 0:
            return _Leaf(idx, self._lo, self._hi, self._score)
        best = None
        for dim in range(len(box)):
            blo, bhi = box[dim]
            if blo == bhi:
                continue
            pts = np.unique(
                np.concatenate(
                    [np.clip(self._lo[idx, dim], blo, bhi), np.clip(self._hi[idx, dim], blo, bhi)]
                )
            )
            cands = pts[pts < bhi]
            if len(cands) == 0:
                continue
            t = int(cands[(len(cands) - 1) // 2])
            n_left = int(np.count_nonzero(self._lo[idx, dim] <= t))
            n_right = int(np.count_nonzero(self._hi[idx, dim] >= t + 1))
            quality = (max(n_left, n_right), n_left + n_right)
            if quality[0] >= len(idx):
                continue
            if best is None or quality < best[0]:
                best = (quality, dim, t)
        if best is None:
            return _Leaf(idx, self._lo, self._hi, self._score)
        _, dim, t = best
        self._node_budget -= 2
        left_idx = idx[self._lo[idx, dim] <= t]
        right_idx = idx[self._hi[idx, dim] >= t + 1]
        blo, bhi = box[dim]
        box[dim] = (blo, t)
        left = self._build(left_idx, box, depth + 1)
        box[dim] = (t + 1, bhi)
        right = self._build(right_idx, box, depth + 1)
        box[dim] = (blo, bhi)
        return _Node(dim, t, left, right)

    # -- scalar classification ----------------------------------------------

    def _leaf_for(self, key: Sequence[int]) -> _Leaf:
        node = self.root
        while isinstance(node, _Node):
            node = node.left if key[node.dim] <= node.threshold else node.right
        return node

    def _best_in_leaf(self, leaf: _Leaf, key) -> tuple[int, int]:
        # Leaf rules are score-sorted, so the first full match wins.
        for i in range(len(leaf.order)):
            ok = True
            for d in range(len(key)):
                if not leaf.lo[i, d] <= key[d] <= leaf.hi[i, d]:
                    ok = False
                    break
            if ok:
                return int(leaf.score[i]), int(leaf.order[i])
        return -1, -1

    def classify(self, key: Sequence[int]) -> MatchResult | None:
        if len(key) != len(self.ruleset.schema):
            raise ValueError(f"key arity {len(key)} != schema {len(self.ruleset.schema)}")
        best, best_pos = self._best_in_leaf(self._leaf_for(key), key)
        if self.index is not None:
            idx = self.index
            for pos in idx.candidates(int(key[idx.dim])):
                ok = all(idx.lo[pos, d] <= key[d] <= idx.hi[pos, d] for d in range(len(key)))
                if ok and idx.score[pos] > best:
                    best = int(idx.score[pos])
                    best_pos = int(idx.rule_pos[pos])
        if best < 0:
            return None
        rule = self.ruleset.rules[best_pos]
        return MatchResult(rule.rule_id, rule.priority, rule.action)

    # -- batch classification -------------------------------------------------

    def classify_batch(self, keys: np.ndarray) -> np.ndarray:
        """Matched rule_id per key (-1 for none); semantics identical to classify."""
        if keys.ndim != 2 or keys.shape[1] != len(self.ruleset.schema):
            raise ValueError(f"keys must be (n, {len(self.ruleset.schema)})")
        n = keys.shape[0]
        best = np.full(n, -1, dtype=np.int64)
        self._batch_walk(self.root, keys, np.arange(n, dtype=np.int64), best)
        if self.index is not None and len(self.index.rule_pos):
            idx = self.index
            vals = keys[:, idx.dim].astype(np.float64)
            p0 = np.rint(idx._predict(vals)).astype(np.int64)
            m = len(idx.rule_pos)
            for off in range(-idx.window, idx.window + 1):
                pos = np.clip(p0 + off, 0, m - 1)
                ok = np.ones(n, dtype=bool)
                for d in range(keys.shape[1]):
                    ok &= keys[:, d] >= idx.lo[pos, d]
                    ok &= keys[:, d] <= idx.hi[pos, d]
                cand = np.where(ok, idx.score[pos], -1)
                best = np.maximum(best, cand)
        out = np.full(n, -1, dtype=np.int64)
        got = best >= 0
        if got.any():
            pos = _rule_pos_from_score_batch(self._score, best[got])
            out[got] = self._ids[pos]
        return out

    def _batch_walk(self, node, keys: np.ndarray, rows: np.ndarray, best: np.ndarray) -> None:
        if len(rows) == 0:
            return
        if isinstance(node, _Node):
            mask = keys[rows, node.dim] <= node.threshold
            self._batch_walk(node.left, keys, rows[mask], best)
            self._batch_walk(node.right, keys, rows[~mask], best)
            return
        leaf: _Leaf = node
        if len(leaf.order) == 0:
            return
        kc = keys[rows]
        match = np.ones((len(rows), len(leaf.order)), dtype=bool)
        for d in range(keys.shape[1]):
            col = kc[:, d : d + 1]
            match &= col >= leaf.lo[:, d]
            match &= col <= leaf.hi[:, d]
        masked = np.where(match, leaf.score, -1)
        best[rows] = np.maximum(best[rows], masked.max(axis=1))


def fd_interval(bits: int) -> tuple[int, int]:
    return 0, (1 << bits) - 1


def _greedy_disjoint(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Max-cardinality pairwise-disjoint intervals (earliest-deadline greedy)."""
    if len(lo) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((lo, hi))
    sel = []
    last_hi = -1
    for i in order:
        if int(lo[i]) > last_hi:
            sel.append(int(i))
            last_hi = int(hi[i])
    return np.array(sorted(sel), dtype=np.int64)


def _rule_pos_from_score_batch(score: np.ndarray, wanted: np.ndarray) -> np.ndarray:
    order = np.argsort(score, kind="stable")
    pos = np.searchsorted(score[order], wanted)
    return order[pos]


def _tree_depth(node) -> int:
    if isinstance(node, _Leaf):
        return 0
    return 1 + max(_tree_depth(node.left), _tree_depth(node.right))


def _leaf_count(node) -> int:
    if isinstance(node, _Leaf):
        return 1
    return _leaf_count(node.left) + _leaf_count(node.right)


def build_engine(ruleset: RuleSet, config: EngineConfig = EngineConfig()) -> ClassifierEngine:
    return ClassifierEngine(ruleset, config)


def classify(engine: ClassifierEngine, key: Sequence[int]) -> MatchResult | None:
    return engine.classify(key)
