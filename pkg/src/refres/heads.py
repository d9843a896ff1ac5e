"""Per-relation similarity heads, first-subword pooling, losses, ranking.

Each relation label owns a linear expansion of the shared representations.
For the textual task the score matrix is the Gram matrix of the expanded
token vectors (symmetric by construction); for the multimodal task it is
the inner product between expanded token vectors (rows) and expanded,
fused candidate vectors (columns).  Losses are per-row softmax
cross-entropies against binary ground matrices: textual rows get an extra
learned null column for mentions with no antecedent, multimodal rows with
no positive candidate are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .datamodel import LABELS, GroundTruth, RelationLabel


@dataclass
class Prediction:
    """Ranked targets for one (mention, relation) query.  Targets are
    candidate indices for object queries, mention ids (or None for the null
    antecedent) for antecedent queries.  Confidences are softmax
    probabilities, non-increasing, ties broken by earlier index."""

    mention_id: str
    label: RelationLabel
    ranked: list[tuple[object, float]]


class TRRHead:
    """Per-label square expansion over encoder outputs plus a learned scalar
    null-antecedent score per label."""

    def __init__(self, d: int, rng: np.random.Generator,
                 labels: tuple[RelationLabel, ...] = LABELS, dtype: str = "float32"):
        self.labels = labels
        self.d = d
        dt = np.dtype(dtype)
        self.w = {l: T.Tensor(T.truncated_normal(rng, (d, d), dtype=dt), requires_grad=True)
                  for l in labels}
        self.null_score = {l: T.Tensor(np.zeros((1, 1), dtype=dt), requires_grad=True)
                           for l in labels}

    def parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for l in self.labels:
            out[f"w.{l.name}"] = self.w[l]
            out[f"null.{l.name}"] = self.null_score[l]
        return out


class MRRHead:
    """Per-label square expansions: one over encoder outputs, one over fused
    candidate vectors."""

    def __init__(self, d: int, rng: np.random.Generator,
                 labels: tuple[RelationLabel, ...] = LABELS, dtype: str = "float32"):
        self.labels = labels
        self.d = d
        dt = np.dtype(dtype)
        self.wt = {l: T.Tensor(T.truncated_normal(rng, (d, d), dtype=dt), requires_grad=True)
                   for l in labels}
        self.wo = {l: T.Tensor(T.truncated_normal(rng, (d, d), dtype=dt), requires_grad=True)
                   for l in labels}

    def parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for l in self.labels:
            out[f"wt.{l.name}"] = self.wt[l]
            out[f"wo.{l.name}"] = self.wo[l]
        return out


@dataclass
class SimilarityStack:
    """Per-label score matrices plus the pooling bookkeeping.

    kind is "mm" (mention-mention, square, symmetric) or "mc"
    (mention-candidate).  Before pooling the row space is the full token
    sequence; after pooling rows (and for "mm" also columns) are restricted
    to mention first subwords, in `mention_ids` order.
    """

    kind: str
    labels: tuple[RelationLabel, ...]
    mats: dict[RelationLabel, T.Tensor]
    mention_ids: tuple[str, ...] = ()
    pooled: bool = False


def trr_expand(tprime: T.Tensor, head: TRRHead) -> dict[RelationLabel, T.Tensor]:
    """Per-label expanded token representations (n x d each)."""
    return {l: T.matmul(tprime, head.w[l]) for l in head.labels}


def trr_similarity(expanded: dict[RelationLabel, T.Tensor],
                   labels: tuple[RelationLabel, ...] | None = None) -> SimilarityStack:
    """Token-level Gram matrices.  Averaging with the transpose makes the
    stored matrix bitwise symmetric without changing its value."""
    labels = labels or tuple(expanded.keys())
    mats = {}
    for l in labels:
        e = expanded[l]
        s = T.matmul(e, T.transpose(e))
        mats[l] = (s + T.transpose(s)) * 0.5
    return SimilarityStack("mm", tuple(labels), mats)


def mrr_expand(t_shared: T.Tensor, x_fused: T.Tensor, head: MRRHead
               ) -> tuple[dict[RelationLabel, T.Tensor], dict[RelationLabel, T.Tensor]]:
    t_exp = {l: T.matmul(t_shared, head.wt[l]) for l in head.labels}
    x_exp = {l: T.matmul(x_fused, head.wo[l]) for l in head.labels}
    return t_exp, x_exp


def mrr_similarity(t_exp: dict[RelationLabel, T.Tensor],
                   x_exp: dict[RelationLabel, T.Tensor]) -> SimilarityStack:
    """Mention-candidate scores, rows = token positions, columns = candidates."""
    labels = tuple(t_exp.keys())
    mats = {l: T.matmul(t_exp[l], T.transpose(x_exp[l])) for l in labels}
    return SimilarityStack("mc", labels, mats)


def pool_first_subword(stack: SimilarityStack, gt: GroundTruth) -> SimilarityStack:
    """Keep the rows (and for mention-mention stacks, columns) sitting at
    each mention's first subword, in ground-truth mention order."""
    if stack.pooled:
        return stack
    rows = gt.mention_rows
    mats = {}
    for l in stack.labels:
        m = T.gather_rows(stack.mats[l], rows)
        if stack.kind == "mm":
            m = T.gather_cols(m, rows)
        mats[l] = m
    return SimilarityStack(stack.kind, stack.labels, mats, gt.mention_ids, pooled=True)


def _normalize_rows(target: np.ndarray) -> np.ndarray:
    """Uniform mass over each row's positive entries; zero rows stay zero."""
    sums = target.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(sums > 0, target / np.maximum(sums, 1e-12), 0.0)
    return out.astype(target.dtype, copy=False)


def loss_trr(pooled: SimilarityStack, gt: GroundTruth, head: TRRHead,
             active_labels: tuple[RelationLabel, ...] | None = None) -> T.Tensor:
    """Sum over active labels of a per-mention-row softmax cross-entropy over
    antecedent columns plus one learned null column.

    The diagonal (self-selection) is masked out of every softmax.  A mention
    with no positive column under a label gets the null column as its sole
    target.  Target mass is uniform over positives.
    """
    if not pooled.pooled or pooled.kind != "mm":
        raise ValueError("loss_trr needs a pooled mention-mention stack")
    active = tuple(active_labels) if active_labels is not None else pooled.labels
    m = len(pooled.mention_ids)
    total: T.Tensor | None = None
    if m > 0:
        col_mask = np.concatenate([~np.eye(m, dtype=bool), np.ones((m, 1), dtype=bool)], axis=1)
        ones_col = T.Tensor(np.ones((m, 1), dtype=next(iter(pooled.mats.values())).dtype))
        rows = gt.mention_rows
    for l in active:
        if l not in pooled.mats:
            raise ValueError(f"label {l} missing from similarity stack")
        if m == 0:
            continue
        null_col = T.matmul(ones_col, head.null_score[l])
        logits = T.concat_cols([pooled.mats[l], null_col])
        probs = T.softmax_rows(logits, mask=col_mask)
        tgt = gt.s_target[l][np.ix_(rows, rows)].copy()
        np.fill_diagonal(tgt, 0.0)
        null_tgt = (tgt.sum(axis=1) == 0).astype(tgt.dtype)[:, None]
        target = _normalize_rows(np.concatenate([tgt, null_tgt], axis=1))
        term = T.cross_entropy_rows(probs, target)
        total = term if total is None else total + term
    if total is None:
        total = T.Tensor(np.zeros((), dtype=np.float32))
    return total


def loss_mrr(pooled: SimilarityStack, gt: GroundTruth,
             active_labels: tuple[RelationLabel, ...] | None = None) -> T.Tensor:
    """Sum over active labels of a per-mention-row softmax cross-entropy over
    candidate columns.  Rows with no positive candidate are excluded from
    the mean; there is no null column."""
    if not pooled.pooled or pooled.kind != "mc":
        raise ValueError("loss_mrr needs a pooled mention-candidate stack")
    if gt.u_target is None:
        raise ValueError("ground truth has no candidate targets")
    active = tuple(active_labels) if active_labels is not None else pooled.labels
    rows = gt.mention_rows
    total: T.Tensor | None = None
    for l in active:
        if l not in pooled.mats:
            raise ValueError(f"label {l} missing from similarity stack")
        if len(rows) == 0 or pooled.mats[l].data.shape[1] == 0:
            continue
        tgt = gt.u_target[l][rows]
        row_mask = tgt.sum(axis=1) > 0
        if not row_mask.any():
            continue
        probs = T.softmax_rows(pooled.mats[l])
        term = T.cross_entropy_rows(probs, _normalize_rows(tgt), row_mask)
        total = term if total is None else total + term
    if total is None:
        total = T.Tensor(np.zeros((), dtype=np.float32))
    return total


def _rank(conf: np.ndarray) -> np.ndarray:
    """Indices by descending confidence; equal scores keep index order."""
    return np.argsort(-conf, kind="stable")


def predict_objects(pooled: SimilarityStack, label: RelationLabel) -> list[Prediction]:
    """Softmax over candidate columns per mention row, ranked descending."""
    if not pooled.pooled or pooled.kind != "mc":
        raise ValueError("predict_objects needs a pooled mention-candidate stack")
    if not pooled.mention_ids or pooled.mats[label].data.shape[1] == 0:
        return []
    with T.no_grad():
        probs = T.softmax_rows(T.Tensor(pooled.mats[label].data)).data
    out = []
    for i, mid in enumerate(pooled.mention_ids):
        order = _rank(probs[i])
        out.append(Prediction(mid, label, [(int(j), float(probs[i, j])) for j in order]))
    return out


def predict_antecedents(pooled: SimilarityStack, head: TRRHead,
                        label: RelationLabel) -> list[Prediction]:
    """Rank antecedent mentions plus the null option (target None).  The
    mention itself is never a candidate."""
    if not pooled.pooled or pooled.kind != "mm":
        raise ValueError("predict_antecedents needs a pooled mention-mention stack")
    ids = pooled.mention_ids
    m = len(ids)
    if m == 0:
        return []
    col_mask = np.concatenate([~np.eye(m, dtype=bool), np.ones((m, 1), dtype=bool)], axis=1)
    with T.no_grad():
        null = np.full((m, 1), float(head.null_score[label].data[0, 0]),
                       dtype=pooled.mats[label].data.dtype)
        logits = np.concatenate([pooled.mats[label].data, null], axis=1)
        probs = T.softmax_rows(T.Tensor(logits), mask=col_mask).data
    out = []
    targets: list[object] = list(ids) + [None]
    for i, mid in enumerate(ids):
        order = [j for j in _rank(probs[i]) if j != i]
        out.append(Prediction(mid, label, [(targets[j], float(probs[i, j])) for j in order]))
    return out
