"""Tree-constrained inference and evaluation metrics.

Beam search walks the class tree level by level, extending hypotheses only to
children of their last node.  Fixed mode keeps full-depth paths and scores by
summed log-probabilities.  General mode must compare paths of different
lengths, so every root-to-node prefix is a completion candidate and stopping
itself is scored: ending at an internal node adds the log-probability that
the next level's mass falls outside that node's children, so cutting a path
short right before a confidently predicted child is heavily penalized while
stopping at a leaf costs nothing.  With a beam at least as wide as the leaf
count both modes reduce to exhaustive search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .tensor import _sigmoid as _stable_sigmoid
from .tree import ClassTree, enumerate_paths

__all__ = [
    "BeamHypothesis", "MetricsReport", "beam_search",
    "select_paths_by_threshold", "tune_threshold", "path_accuracy",
    "node_accuracy", "lift_final_node", "path_f1", "node_f1",
]


@dataclass(frozen=True)
class BeamHypothesis:
    path: tuple  # node ids, a valid root-down prefix
    log_prob: float


@dataclass
class MetricsReport:
    kind: str
    numerator: float
    denominator: float
    score: float
    threshold: float | None = None
    precision: float | None = None
    recall: float | None = None
    per_level: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"kind": self.kind, "numerator": self.numerator,
               "denominator": self.denominator, "score": self.score}
        for name in ("threshold", "precision", "recall"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.per_level:
            out["per_level"] = self.per_level
        return out


def _log_softmax(v: np.ndarray) -> np.ndarray:
    s = v - v.max()
    return s - np.log(np.exp(s).sum())


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return _stable_sigmoid(np.asarray(v, dtype=np.float64))


def _stop_penalty(path: tuple, log_probs: list, tree: ClassTree) -> float:
    """Log-probability of stopping at the path's last node.

    Free at leaves and at the deepest level; at an internal node it is the
    log of the next level's probability mass outside that node's children.
    """
    node, depth = path[-1], len(path)
    children = tree.children(node)
    if not children or depth >= len(log_probs):
        return 0.0
    mass = sum(np.exp(log_probs[depth][c - 1]) for c in children)
    return float(np.log(max(1.0 - mass, 1e-300)))


def beam_search(per_step_logits, tree: ClassTree, beam_width: int,
                mode: str = "fixed") -> tuple:
    """Most likely tree-consistent path given per-level logit vectors.

    Ties break toward lexicographically smaller node-id sequences.
    """
    if beam_width < 1:
        raise UsageError(f"beam width must be >= 1, got {beam_width}")
    if mode not in ("fixed", "general"):
        raise UsageError(f"unknown beam search mode {mode!r}")
    log_probs = [_log_softmax(np.asarray(v, dtype=np.float64)) for v in per_step_logits]
    depth = len(log_probs)

    def rank_key(h: BeamHypothesis):
        return (-h.log_prob, h.path)

    def final_score(h: BeamHypothesis) -> float:
        if mode == "general":
            return h.log_prob + _stop_penalty(h.path, log_probs, tree)
        return h.log_prob

    # Nested beams: the width-k beam is the width-(k-1) beam plus the best
    # candidate not already kept.  Beams for smaller widths are therefore
    # always subsets of wider ones, which makes the returned score
    # non-decreasing in the width; at width >= leaf count every valid prefix
    # survives, so the search is exhaustive.
    root = BeamHypothesis((), 0.0)
    chains = [[root] for _ in range(beam_width)]
    complete: list[BeamHypothesis] = []
    for t in range(depth):
        new_chains: list[list] = []
        for k in range(beam_width):
            candidates = []
            for hyp in chains[k]:
                parent = hyp.path[-1] if hyp.path else tree.root
                for child in tree.children(parent):
                    score = hyp.log_prob + log_probs[t][child - 1]
                    candidates.append(BeamHypothesis(hyp.path + (child,), score))
            candidates.sort(key=rank_key)
            if k == 0:
                chosen = candidates[:1]
            else:
                chosen = list(new_chains[k - 1])
                kept = {h.path for h in chosen}
                extra = next((c for c in candidates if c.path not in kept), None)
                if extra is not None:
                    chosen.append(extra)
            new_chains.append(chosen)
        chains = new_chains
        if not chains[-1]:
            break
        for hyp in chains[-1]:
            is_leaf = tree.is_leaf(hyp.path[-1])
            if mode == "general" or is_leaf or t == depth - 1:
                complete.append(hyp)
    if not complete:
        raise UsageError("no tree-consistent path of the requested depth exists")
    best = min(complete, key=lambda h: (-final_score(h), h.path))
    return best.path


def exhaustive_best_path(per_step_logits, tree: ClassTree, mode: str = "fixed") -> tuple:
    """Brute-force argmax over all enumerated paths; oracle for beam search."""
    log_probs = [_log_softmax(np.asarray(v, dtype=np.float64)) for v in per_step_logits]
    depth = len(log_probs)
    if mode == "fixed":
        paths = [p for p in enumerate_paths(tree, leaves_only=True) if len(p) <= depth]
        paths = [p for p in paths if len(p) == depth or tree.is_leaf(p[-1])]
    else:
        paths = [p for p in enumerate_paths(tree, leaves_only=False) if len(p) <= depth]
    best, best_key = None, None
    for p in paths:
        score = sum(log_probs[t][v - 1] for t, v in enumerate(p))
        if mode == "general":
            score += _stop_penalty(p, log_probs, tree)
        key = (-score, p)
        if best_key is None or key < best_key:
            best, best_key = p, key
    return best


def select_paths_by_threshold(per_step_logits, tree: ClassTree, threshold: float) -> set:
    """Maximal root-to-node paths whose nodes all clear the sigmoid threshold."""
    if not np.isfinite(threshold):
        raise UsageError(f"threshold must be finite, got {threshold}")
    probs = [_sigmoid(np.asarray(v, dtype=np.float64)) for v in per_step_logits]
    depth = len(probs)

    def is_on(node, level):  # level is 1-based
        return level <= depth and probs[level - 1][node - 1] >= threshold

    selected = set()

    def visit(node, level, prefix):
        extended = False
        for child in tree.children(node):
            if is_on(child, level + 1):
                extended = True
                visit(child, level + 1, prefix + (child,))
        if prefix and not extended:
            selected.add(prefix)

    for child in tree.children(tree.root):
        if is_on(child, 1):
            visit(child, 1, (child,))
    return selected


def tune_threshold(predictions, truths, tree: ClassTree,
                   grid_step: float = 0.01) -> float:
    """Grid-scan the threshold maximizing path F1 on a validation set.

    ``predictions`` holds per-sample lists of per-level logit vectors;
    ``truths`` per-sample sets of label paths.  Ties go to the smallest
    threshold on the grid.
    """
    if not 0.0 < grid_step < 1.0:
        raise UsageError(f"grid step must lie in (0, 1), got {grid_step}")
    if len(predictions) == 0:
        raise UsageError("cannot tune a threshold on an empty validation set")
    if len(predictions) != len(truths):
        raise UsageError(f"{len(predictions)} predictions vs {len(truths)} truths")
    grid = np.arange(0.0, 1.0 + grid_step / 2, grid_step)
    best_tau, best_f1 = None, -1.0
    for tau in grid:
        preds = [select_paths_by_threshold(p, tree, tau) for p in predictions]
        f1 = path_f1(preds, truths).score
        if f1 > best_f1:
            best_tau, best_f1 = float(tau), f1
    return best_tau


# -- accuracy metrics --------------------------------------------------------


def _check_counts(preds, truths):
    if len(preds) != len(truths):
        raise UsageError(f"{len(preds)} predictions vs {len(truths)} ground truths")


def path_accuracy(preds, truths) -> MetricsReport:
    """Fraction of samples whose predicted path equals the ground truth."""
    _check_counts(preds, truths)
    hits = sum(1 for p, t in zip(preds, truths) if tuple(p) == tuple(t))
    n = len(truths)
    return MetricsReport("path_accuracy", hits, n, hits / n if n else 0.0)


def node_accuracy(preds, truths) -> MetricsReport:
    """Micro-averaged depth-positional node matches over all target nodes."""
    _check_counts(preds, truths)
    correct = total = 0
    per_level: dict[int, list] = {}
    for p, t in zip(preds, truths):
        for depth, node in enumerate(t):
            total += 1
            hit = depth < len(p) and p[depth] == node
            correct += hit
            lvl = per_level.setdefault(depth + 1, [0, 0])
            lvl[0] += hit
            lvl[1] += 1
    score = correct / total if total else 0.0
    breakdown = {lvl: c / n for lvl, (c, n) in sorted(per_level.items())}
    return MetricsReport("node_accuracy", correct, total, score, per_level=breakdown)


def lift_final_node(final_node: int, tree: ClassTree) -> tuple:
    """Expand a final-node prediction to its unique root-to-node path."""
    return tree.path_to(final_node)


# -- F1 metrics --------------------------------------------------------------


def _f1(tp: float, pred_count: float, truth_count: float) -> tuple:
    precision = tp / pred_count if pred_count else 0.0
    recall = tp / truth_count if truth_count else 0.0
    denom = precision + recall
    return (2 * precision * recall / denom if denom else 0.0), precision, recall


def path_f1(pred_sets, truth_sets, threshold: float | None = None) -> MetricsReport:
    """Micro-averaged F1 over exact path matches."""
    _check_counts(pred_sets, truth_sets)
    tp = pred_count = truth_count = 0
    for p, t in zip(pred_sets, truth_sets):
        p, t = set(map(tuple, p)), set(map(tuple, t))
        tp += len(p & t)
        pred_count += len(p)
        truth_count += len(t)
    score, precision, recall = _f1(tp, pred_count, truth_count)
    return MetricsReport("path_f1", tp, max(pred_count, truth_count), score,
                         threshold=threshold, precision=precision, recall=recall)


def node_f1(pred_sets, truth_sets, threshold: float | None = None) -> MetricsReport:
    """Micro-averaged F1 over depth-positioned (level, node) pairs."""
    _check_counts(pred_sets, truth_sets)

    def nodes_of(paths):
        out = set()
        for path in paths:
            for depth, node in enumerate(path):
                out.add((depth + 1, node))
        return out

    tp = pred_count = truth_count = 0
    for p, t in zip(pred_sets, truth_sets):
        pn, tn = nodes_of(p), nodes_of(t)
        tp += len(pn & tn)
        pred_count += len(pn)
        truth_count += len(tn)
    score, precision, recall = _f1(tp, pred_count, truth_count)
    return MetricsReport("node_f1", tp, max(pred_count, truth_count), score,
                         threshold=threshold, precision=precision, recall=recall)
