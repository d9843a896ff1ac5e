"""Recall@k evaluation with box-overlap matching, category and relation
tables, window-length sweeps, and confidence summaries.

The counting unit is the query: one (mention, relation, frame) triple taken
from a frame's gold visual relations.  A query is a hit at rank k iff any of
the top-k predicted boxes overlaps any of its gold boxes at or above the
threshold.  Queries whose mention was truncated out of the text window stay
in the denominator as misses, so recall is comparable across window lengths.
Groups with no queries are absent from the report, never reported as zero.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import (
    INDIRECT_LABELS,
    LABELS,
    BoundingBox,
    DialogueDocument,
    MMInstance,
    RelationLabel,
    build_mm_instances,
    iou,
)

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    k_values: tuple[int, ...] = (1, 5, 10)
    iou_threshold: float = 0.5
    window_utterances: int = 1
    lengths: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise EvaluationError(f"k values must be positive, got {self.k_values}")
        if list(self.k_values) != sorted(set(self.k_values)):
            raise EvaluationError(f"k values must be ascending, got {self.k_values}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise EvaluationError(
                f"iou threshold must be in (0, 1], got {self.iou_threshold}")
        if self.window_utterances < 1:
            raise EvaluationError(
                f"window must be >= 1, got {self.window_utterances}")
        if any(l < 1 for l in self.lengths):
            raise EvaluationError(f"sweep lengths must be >= 1, got {self.lengths}")

    def as_dict(self) -> dict:
        return {"k_values": list(self.k_values),
                "iou_threshold": self.iou_threshold,
                "window_utterances": self.window_utterances,
                "lengths": list(self.lengths)}


@dataclass(frozen=True)
class Query:
    doc_id: str
    frame_index: int
    mention_id: str
    label: RelationLabel
    gold_boxes: tuple[BoundingBox, ...]
    mention_pos: str
    zero_reference: bool
    truncated: bool

    @property
    def category(self) -> str:
        if self.mention_pos in ("noun", "pronoun"):
            return self.mention_pos
        return "other"


@dataclass(frozen=True)
class Answer:
    """One query with its ranked predictions, best first.  Truncated queries
    carry empty rankings and can never hit."""

    query: Query
    boxes: tuple[BoundingBox, ...]
    confidences: tuple[float, ...]


@dataclass(frozen=True)
class ReportRow:
    relation: str
    category: str
    k: int
    recall: float
    n: int

    def as_dict(self) -> dict:
        return {"relation": self.relation, "category": self.category,
                "k": self.k, "recall": self.recall, "n": self.n}


@dataclass
class EvalReport:
    config: dict
    rows: list[ReportRow]
    confidence: dict = field(default_factory=dict)

    def row(self, relation: str, category: str, k: int) -> ReportRow | None:
        for r in self.rows:
            if (r.relation, r.category, r.k) == (relation, category, k):
                return r
        return None

    def recall(self, relation: str, category: str, k: int) -> float:
        r = self.row(relation, category, k)
        if r is None:
            raise EvaluationError(f"no row for ({relation!r}, {category!r}, k={k})")
        return r.recall

    def as_dict(self) -> dict:
        return {"config": self.config,
                "rows": [r.as_dict() for r in self.rows],
                "confidence": self.confidence}


# ------------------------------------------------------------- prediction

def _as_predict_fn(predictor):
    if hasattr(predictor, "predict"):
        return predictor.predict
    if callable(predictor):
        return predictor
    raise EvaluationError(f"predictor {predictor!r} is neither a model nor a callable")


def collect_answers(predictor, docs: list[DialogueDocument],
                    labels: tuple[RelationLabel, ...] = LABELS,
                    window_utterances: int = 1,
                    pairing: str = "eval") -> list[Answer]:
    """Run the predictor over windowed instances and pair every gold query
    with its ranked boxes.  The predictor maps an instance to
    {(mention id, label): [(candidate index, confidence), ...]}.

    `pairing` selects the window construction: "eval" grades every frame
    under its trailing window (the reporting default); "train" replays the
    exact instances a training run optimizes, which is the right denominator
    for training-set recall."""
    predict = _as_predict_fn(predictor)
    wanted = set(labels)
    answers: list[Answer] = []
    for doc in docs:
        pos_of = {m.id: m.pos for m in doc.mentions}
        for inst in build_mm_instances(doc, window_utterances, mode=pairing):
            preds = None
            in_window = {m.id for m in inst.mentions}
            for vr in inst.frame.visual_relations:
                if vr.label not in wanted:
                    continue
                query = Query(doc_id=doc.doc_id, frame_index=inst.frame_index,
                              mention_id=vr.src, label=vr.label,
                              gold_boxes=vr.boxes, mention_pos=pos_of[vr.src],
                              zero_reference=vr.zero_reference,
                              truncated=vr.src not in in_window)
                if query.truncated:
                    answers.append(Answer(query, (), ()))
                    continue
                if preds is None:
                    preds = predict(inst)
                ranked = preds.get((vr.src, vr.label))
                if ranked is None:
                    raise EvaluationError(
                        f"{doc.doc_id}: predictor returned nothing for mention "
                        f"{vr.src!r} under {vr.label.value}")
                boxes = tuple(inst.frame.candidates[i].box for i, _ in ranked)
                confs = tuple(float(c) for _, c in ranked)
                answers.append(Answer(query, boxes, confs))
    return answers


# ----------------------------------------------------------------- recall

def hit_at_k(answer: Answer, k: int, iou_threshold: float = 0.5) -> bool:
    for box in answer.boxes[:k]:
        for gold in answer.query.gold_boxes:
            if iou(box, gold) >= iou_threshold:
                return True
    return False


def recall_at_k(answers: list[Answer], k: int, iou_threshold: float = 0.5) -> float:
    """Fraction of queries hit within the top k.  Undefined on an empty
    query set; callers leave such groups out of their reports."""
    if not answers:
        raise EvaluationError("recall over an empty query set is undefined")
    hits = sum(hit_at_k(a, k, iou_threshold) for a in answers)
    return hits / len(answers)


# ----------------------------------------------------------------- reports

def _group_rows(answers: list[Answer], relations: tuple[RelationLabel, ...],
                config: EvalConfig) -> list[ReportRow]:
    rows: list[ReportRow] = []
    for rel in relations:
        rel_answers = [a for a in answers if a.query.label is rel]
        if not rel_answers:
            continue
        groups: list[tuple[str, list[Answer]]] = [("overall", rel_answers)]
        for cat in ("noun", "pronoun", "other"):
            sub = [a for a in rel_answers if a.query.category == cat]
            if sub:
                groups.append((cat, sub))
        zero = [a for a in rel_answers if a.query.zero_reference]
        if zero:
            # subset slice, deliberately outside the category partition
            groups.append(("zero", zero))
        for cat, sub in groups:
            for k in config.k_values:
                rows.append(ReportRow(rel.value, cat, k,
                                      recall_at_k(sub, k, config.iou_threshold),
                                      len(sub)))
    return rows


def _report(predictor, docs, relations: tuple[RelationLabel, ...],
            config: EvalConfig) -> EvalReport:
    answers = collect_answers(predictor, docs, relations,
                              config.window_utterances)
    rows = _group_rows(answers, relations, config)
    conf = confidence_stats([list(a.confidences) for a in answers
                             if a.confidences], config.k_values)
    return EvalReport(config=config.as_dict(), rows=rows, confidence=conf)


def evaluate_grounding(predictor, docs: list[DialogueDocument],
                       config: EvalConfig | None = None) -> EvalReport:
    """Direct-reference table split into overall, noun, and pronoun queries;
    single-utterance windows unless the config widens them."""
    config = config or EvalConfig()
    report = _report(predictor, docs, (RelationLabel.DIRECT,), config)
    present = {r.category for r in report.rows}
    for cat in ("noun", "pronoun"):
        if report.rows and cat not in present:
            log.warning("no %s queries in the corpus; category omitted", cat)
    return report


def evaluate_mrr(predictor, docs: list[DialogueDocument],
                 config: EvalConfig | None = None) -> EvalReport:
    """Per-relation tables over all six labels.  Dropped-argument queries
    are graded exactly like overt ones and also surfaced as a 'zero'
    subset row per relation."""
    config = config or EvalConfig()
    return _report(predictor, docs, LABELS, config)


def utterance_length_ablation(predictor, docs: list[DialogueDocument],
                              lengths: tuple[int, ...],
                              config: EvalConfig | None = None,
                              relations: tuple[RelationLabel, ...] = (RelationLabel.DIRECT,),
                              ) -> dict[int, EvalReport]:
    """Re-window the corpus at each length and re-run the evaluator.  Every
    report keeps the full query denominator, so curves are comparable."""
    if not lengths or any(l < 1 for l in lengths):
        raise EvaluationError(f"lengths must be >= 1, got {lengths}")
    config = config or EvalConfig()
    out: dict[int, EvalReport] = {}
    for length in lengths:
        cfg = EvalConfig(k_values=config.k_values,
                         iou_threshold=config.iou_threshold,
                         window_utterances=length, lengths=config.lengths)
        out[length] = _report(predictor, docs, relations, cfg)
    return out


# ------------------------------------------------------------- confidence

def confidence_stats(ranked_confidences: list[list[float]],
                     k_values: tuple[int, ...] = (1, 5, 10)) -> dict:
    """Mean confidence over the top-k, bottom-k, and all predictions, pooled
    across queries, plus quantiles of the pooled scores.  A k larger than a
    list uses the whole list."""
    if not ranked_confidences:
        return {"n": 0}
    tops = {k: [] for k in k_values}
    bottoms = {k: [] for k in k_values}
    flat: list[float] = []
    for confs in ranked_confidences:
        ordered = sorted(confs, reverse=True)
        flat.extend(ordered)
        for k in k_values:
            kk = min(k, len(ordered))
            tops[k].extend(ordered[:kk])
            bottoms[k].extend(ordered[-kk:])
    arr = np.asarray(flat, dtype=np.float64)
    qs = (0.0, 0.25, 0.5, 0.75, 1.0)
    return {
        "n": int(arr.size),
        "all_mean": float(arr.mean()),
        "top_mean": {str(k): float(np.mean(tops[k])) for k in k_values},
        "bottom_mean": {str(k): float(np.mean(bottoms[k])) for k in k_values},
        "quantiles": {f"{q:.2f}": float(np.quantile(arr, q)) for q in qs},
    }


# ---------------------------------------------------------- serialization

def format_report(report: EvalReport) -> str:
    """Aligned text table, one line per (relation, category) group."""
    ks = sorted({r.k for r in report.rows})
    head = f"{'relation':<10}{'category':<10}" + "".join(
        f"{'R@' + str(k):>8}" for k in ks) + f"{'n':>8}"
    lines = [head, "-" * len(head)]
    seen: list[tuple[str, str]] = []
    for r in report.rows:
        key = (r.relation, r.category)
        if key not in seen:
            seen.append(key)
    for rel, cat in seen:
        cells = ""
        n = 0
        for k in ks:
            row = report.row(rel, cat, k)
            cells += f"{row.recall:>8.3f}" if row else f"{'-':>8}"
            if row:
                n = row.n
        lines.append(f"{rel:<10}{cat:<10}{cells}{n:>8}")
    return "\n".join(lines)


def write_report(report: EvalReport, json_path: str | Path,
                 csv_path: str | Path | None = None) -> Path:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["relation", "category", "k", "recall", "n"])
            for r in report.rows:
                writer.writerow([r.relation, r.category, r.k,
                                 f"{r.recall:.6f}", r.n])
    return json_path


def load_report(json_path: str | Path) -> EvalReport:
    with open(json_path, encoding="utf-8") as fh:
        raw = json.load(fh)
    rows = [ReportRow(**r) for r in raw["rows"]]
    return EvalReport(config=raw["config"], rows=rows,
                      confidence=raw.get("confidence", {}))
