"""Relation matrix decoders and task metrics."""

import math
from collections import Counter
from typing import List, Sequence, Set, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from src.core.exceptions import ParameterError
from src.models.document import Document
from src.models.relation import RelationKind, RelationMatrix

KVLink = Tuple[int, int, str, str]


def _require(rel: RelationMatrix, *kinds: RelationKind) -> None:
    if rel.kind not in kinds:
        raise ParameterError(f"expected a {'/'.join(k.value for k in kinds)} matrix, got {rel.kind.value}")


def decode_groups(rel: RelationMatrix) -> List[Tuple[int, ...]]:
    """Connected components of the symmetrised decisions, ignoring the diagonal.

    Groups are sorted tuples, ordered by their smallest member.
    """
    _require(rel, RelationKind.ROW, RelationKind.COL)
    adjacency = np.array(rel.decisions, dtype=bool)
    np.fill_diagonal(adjacency, False)
    _, labels = connected_components(csr_matrix(adjacency | adjacency.T), directed=False)
    groups = {}
    for entity, label in enumerate(labels):
        groups.setdefault(label, []).append(entity)
    return sorted((tuple(sorted(members)) for members in groups.values()), key=lambda g: g[0])


def groups_to_matrix(kind: RelationKind, groups: Sequence[Sequence[int]], n: int) -> RelationMatrix:
    decisions = np.zeros((n, n), dtype=bool)
    for group in groups:
        members = np.array(group)
        decisions[np.ix_(members, members)] = True
    return RelationMatrix.from_decisions(kind, decisions)


def _f1(predicted: Set, truth: Set) -> float:
    if not predicted and not truth:
        return 1.0
    if not predicted or not truth:
        return 0.0
    hits = len(predicted & truth)
    if hits == 0:
        return 0.0
    precision = hits / len(predicted)
    recall = hits / len(truth)
    return 2.0 * precision * recall / (precision + recall)


def _unordered_pairs(rel: RelationMatrix) -> Set[Tuple[int, int]]:
    upper = np.triu(rel.decisions | rel.decisions.T, k=1)
    return set(zip(*map(lambda a: a.tolist(), np.nonzero(upper))))


def _ordered_pairs(rel: RelationMatrix) -> Set[Tuple[int, int]]:
    off = np.array(rel.decisions, dtype=bool)
    np.fill_diagonal(off, False)
    return set(zip(*map(lambda a: a.tolist(), np.nonzero(off))))


def group_f1(pred: RelationMatrix, gt: RelationMatrix) -> float:
    """F1 over unordered linked pairs (i < j)."""
    if pred.n != gt.n:
        raise ParameterError(f"matrices of size {pred.n} and {gt.n}")
    return _f1(_unordered_pairs(pred), _unordered_pairs(gt))


def table_f1(pred_row: RelationMatrix, pred_col: RelationMatrix, gt_row: RelationMatrix,
             gt_col: RelationMatrix) -> float:
    """Mean of the row-wise and column-wise pair F1."""
    return (group_f1(pred_row, gt_row) + group_f1(pred_col, gt_col)) / 2.0


def pairwise_f1(pred: RelationMatrix, gt: RelationMatrix) -> float:
    """F1 over ordered true pairs i != j; row/col matrices count unordered pairs."""
    if pred.kind != gt.kind:
        raise ParameterError(f"cannot compare a {pred.kind.value} matrix with a {gt.kind.value} one")
    if pred.n != gt.n:
        raise ParameterError(f"matrices of size {pred.n} and {gt.n}")
    if pred.kind in (RelationKind.ROW, RelationKind.COL):
        return group_f1(pred, gt)
    return _f1(_ordered_pairs(pred), _ordered_pairs(gt))


def decode_kv(rel: RelationMatrix, doc: Document) -> List[KVLink]:
    """Greedy links by descending score; each key keeps one value and each value one key."""
    _require(rel, RelationKind.KV)
    entities = doc.by_id()
    candidates = [(float(rel.scores[i, j]), i, j) for i, j in zip(*np.nonzero(rel.decisions)) if i != j]
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    keys, values = set(), set()
    links = []
    for _, i, j in candidates:
        if i in keys or j in values:
            continue
        keys.add(i)
        values.add(j)
        links.append((int(i), int(j), entities[i].text, entities[j].text))
    return sorted(links)


def links_to_matrix(links: Sequence[KVLink], n: int) -> RelationMatrix:
    decisions = np.zeros((n, n), dtype=bool)
    for key, value, *_ in links:
        decisions[key, value] = True
    return RelationMatrix.from_decisions(RelationKind.KV, decisions)


def decode_reading_order(rel: RelationMatrix) -> List[int]:
    """Repeatedly place the unplaced entity that is ahead of the most other unplaced ones.

    Ties go to the higher mean ahead-score over the unplaced others, then to the lower id.
    """
    _require(rel, RelationKind.ORDER)
    remaining = list(range(rel.n))
    order = []
    while remaining:
        best, best_key = None, None
        for i in remaining:
            others = [j for j in remaining if j != i]
            wins = int(sum(rel.decisions[i, j] for j in others))
            mean_score = float(np.mean([rel.scores[i, j] for j in others])) if others else 0.0
            key = (wins, mean_score, -i)
            if best_key is None or key > best_key:
                best, best_key = i, key
        order.append(best)
        remaining.remove(best)
    return order


def _ngrams(sequence: Sequence[int], n: int) -> Counter:
    return Counter(tuple(sequence[i : i + n]) for i in range(len(sequence) - n + 1))


def bleu(pred: Sequence[int], ref: Sequence[int], max_n: int = 4) -> float:
    """Sentence BLEU on id sequences: clipped n-gram precisions, geometric mean, brevity penalty.

    Orders run up to ``min(max_n, len(pred), len(ref))``; any zero precision gives 0.
    """
    pred, ref = list(pred), list(ref)
    if not pred or not ref:
        raise ParameterError("bleu needs nonempty sequences")
    orders = min(max_n, len(pred), len(ref))
    log_total = 0.0
    for n in range(1, orders + 1):
        candidate = _ngrams(pred, n)
        reference = _ngrams(ref, n)
        clipped = sum(min(count, reference[gram]) for gram, count in candidate.items())
        if clipped == 0:
            return 0.0
        log_total += math.log(clipped / sum(candidate.values()))
    penalty = 1.0 if len(pred) > len(ref) else math.exp(1.0 - len(ref) / len(pred))
    return penalty * math.exp(log_total / orders)


def heuristic_order(doc: Document) -> List[int]:
    """Top-to-bottom, left-to-right by (y0, x0)."""
    return [e.id for e in sorted(doc.entities, key=lambda e: (e.bbox.y0, e.bbox.x0, e.id))]
