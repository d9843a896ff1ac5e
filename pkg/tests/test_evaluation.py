"""Evaluation harness tests: brute-force recall oracle, rank semantics,
partition identities, window sweeps, confidence summaries, serialization."""

from __future__ import annotations

import numpy as np
import pytest

from refres.datamodel import (
    BoundingBox,
    DialogueDocument,
    Frame,
    GoldTextRelation,
    GoldVisualRelation,
    Mention,
    ObjectCandidate,
    RelationLabel,
    Utterance,
    iou,
    validate_document,
)
from refres.evaluation import (
    Answer,
    EvalConfig,
    EvalReport,
    EvaluationError,
    Query,
    collect_answers,
    confidence_stats,
    evaluate_grounding,
    evaluate_mrr,
    format_report,
    hit_at_k,
    load_report,
    recall_at_k,
    utterance_length_ablation,
    write_report,
)
from refres.synthgen import SynthConfig, generate, monotone_corpus


def rank_by(scores: np.ndarray) -> list[tuple[int, float]]:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return [(int(i), float(scores[i])) for i in order]


def perfect_predictor(inst):
    """Scores every candidate by overlap with the query's gold box."""
    out = {}
    for vr in inst.frame.visual_relations:
        scores = np.array([max(iou(c.box, g) for g in vr.boxes)
                           for c in inst.frame.candidates])
        out[(vr.src, vr.label)] = rank_by(scores)
    return out


def uniform_predictor(inst):
    q = len(inst.frame.candidates)
    out = {}
    for vr in inst.frame.visual_relations:
        out[(vr.src, vr.label)] = rank_by(np.full(q, 0.5))
    return out


def random_box(rng) -> BoundingBox:
    x = float(rng.uniform(0.0, 90.0))
    y = float(rng.uniform(0.0, 90.0))
    return BoundingBox(x, y, x + float(rng.uniform(5.0, 40.0)),
                       y + float(rng.uniform(5.0, 40.0)))


def make_answer(rng, q: int, thr_ignored=None) -> Answer:
    golds = tuple(random_box(rng) for _ in range(int(rng.integers(1, 3))))
    boxes = [random_box(rng) for _ in range(q)]
    confs = rng.uniform(0.0, 1.0, size=q)
    order = np.argsort(-confs, kind="stable")
    query = Query(doc_id="d", frame_index=0, mention_id="m", label=RelationLabel.DIRECT,
                  gold_boxes=golds, mention_pos="noun", zero_reference=False,
                  truncated=False)
    return Answer(query, tuple(boxes[i] for i in order),
                  tuple(float(confs[i]) for i in order))


class TestRecallCore:
    def test_matches_brute_force_oracle_on_random_instances(self):
        rng = np.random.default_rng(123)
        for _ in range(200):
            q = int(rng.integers(1, 11))
            thr = float(rng.choice([0.3, 0.5, 0.75]))
            ans = make_answer(rng, q)
            k = int(rng.integers(1, q + 1))
            oracle = any(iou(b, g) >= thr
                         for b in ans.boxes[:k] for g in ans.query.gold_boxes)
            assert recall_at_k([ans], k, thr) == float(oracle)

    def test_non_decreasing_in_k(self):
        rng = np.random.default_rng(7)
        answers = [make_answer(rng, 10) for _ in range(60)]
        values = [recall_at_k(answers, k, 0.4) for k in range(1, 11)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_rank_semantics(self):
        rng = np.random.default_rng(5)
        gold = BoundingBox(10, 10, 30, 30)
        boxes = [random_box(rng) for _ in range(10)]
        boxes = [b for b in boxes if iou(b, gold) < 0.5]
        boxes = (boxes * 2)[:9]
        # the only match sits at rank 7
        boxes.insert(6, gold)
        query = Query("d", 0, "m", RelationLabel.DIRECT, (gold,), "noun",
                      False, False)
        ans = Answer(query, tuple(boxes), tuple(np.linspace(1, 0.1, 10)))
        assert not hit_at_k(ans, 5)
        assert hit_at_k(ans, 7)
        assert hit_at_k(ans, 10)

    def test_gold_at_rank_one(self):
        gold = BoundingBox(0, 0, 20, 20)
        query = Query("d", 0, "m", RelationLabel.DIRECT, (gold,), "noun",
                      False, False)
        ans = Answer(query, (gold, BoundingBox(50, 50, 70, 70)), (0.9, 0.1))
        assert recall_at_k([ans], 1) == 1.0

    def test_ranking_invariant_under_monotone_transform(self):
        docs, _ = generate(SynthConfig(dialogues=2, utterances=(6, 8),
                                       object_vocab=8, scene_objects=3,
                                       candidates_per_frame=7, feature_dim=12,
                                       seed=11, pronoun_rate=0.3))
        rng = np.random.default_rng(0)
        raw_scores = {}

        def base(inst):
            out = {}
            for vr in inst.frame.visual_relations:
                key = (inst.frame_index, vr.src, vr.label)
                if key not in raw_scores:
                    raw_scores[key] = rng.uniform(0.0, 1.0,
                                                  len(inst.frame.candidates))
                out[(vr.src, vr.label)] = rank_by(raw_scores[key])
            return out

        def transformed(inst):
            out = {}
            for (m, l), ranked in base(inst).items():
                out[(m, l)] = [(i, float(np.exp(3.0 * c) + 5.0)) for i, c in ranked]
            return out

        a = evaluate_mrr(base, docs)
        b = evaluate_mrr(transformed, docs)
        assert [(r.relation, r.category, r.k, r.recall, r.n) for r in a.rows] == \
               [(r.relation, r.category, r.k, r.recall, r.n) for r in b.rows]

    def test_empty_query_set_is_undefined(self):
        with pytest.raises(EvaluationError, match="empty"):
            recall_at_k([], 1)


def synth_docs(**kw):
    base = dict(dialogues=4, utterances=(8, 10), object_vocab=8, scene_objects=3,
                candidates_per_frame=7, feature_dim=12, seed=9)
    base.update(kw)
    return generate(SynthConfig(**base))[0]


class TestReports:
    def test_perfect_predictor_scores_one_everywhere(self):
        docs = synth_docs(pronoun_rate=0.4, zero_reference_rate=0.2)
        report = evaluate_mrr(perfect_predictor, docs)
        assert report.rows
        for r in report.rows:
            assert r.recall == 1.0

    def test_partition_identity_and_corpus_counts(self):
        docs = synth_docs(pronoun_rate=0.4, zero_reference_rate=0.2)
        report = evaluate_mrr(perfect_predictor, docs)
        gold_counts = {}
        for d in docs:
            for f in d.frames:
                for vr in f.visual_relations:
                    gold_counts[vr.label.value] = gold_counts.get(vr.label.value, 0) + 1
        relations = {r.relation for r in report.rows}
        for rel in relations:
            overall = report.row(rel, "overall", 1)
            assert overall.n == gold_counts[rel]
            parts = [report.row(rel, c, 1) for c in ("noun", "pronoun", "other")]
            assert sum(p.n for p in parts if p) == overall.n

    def test_zero_subset_rows(self):
        docs = synth_docs(zero_reference_rate=0.5)
        report = evaluate_mrr(perfect_predictor, docs)
        zeros = sum(vr.zero_reference for d in docs for f in d.frames
                    for vr in f.visual_relations)
        acc = report.row(RelationLabel.ACC.value, "zero", 1)
        assert acc is not None and acc.n == zeros and acc.recall == 1.0

    def test_absent_groups_have_no_rows(self):
        docs = synth_docs()  # rates zero: no pronouns anywhere
        report = evaluate_grounding(perfect_predictor, docs)
        assert report.row(RelationLabel.DIRECT.value, "pronoun", 1) is None
        assert {r.relation for r in report.rows} == {RelationLabel.DIRECT.value}

    def test_grounding_report_has_noun_and_overall(self):
        docs = synth_docs(pronoun_rate=0.5)
        report = evaluate_grounding(perfect_predictor, docs)
        for cat in ("overall", "noun", "pronoun"):
            row = report.row(RelationLabel.DIRECT.value, cat, 1)
            assert row is not None and row.recall == 1.0
        # single-utterance windows by default
        assert report.config["window_utterances"] == 1

    def test_uniform_confidence_follows_index_order(self):
        docs = synth_docs()
        config = EvalConfig(k_values=(1, 2, 3))
        report = evaluate_grounding(uniform_predictor, docs, config)
        for k in (1, 2, 3):
            hits = total = 0
            for d in docs:
                for f in d.frames:
                    for vr in f.visual_relations:
                        if vr.label is not RelationLabel.DIRECT:
                            continue
                        total += 1
                        first_k = f.candidates[:k]
                        if any(iou(c.box, g) >= 0.5 for c in first_k
                               for g in vr.boxes):
                            hits += 1
            assert report.recall(RelationLabel.DIRECT.value, "overall", k) \
                == hits / total

    def test_missing_prediction_is_an_error(self):
        docs = synth_docs(dialogues=1)

        def silent(inst):
            return {}

        with pytest.raises(EvaluationError, match="returned nothing"):
            evaluate_grounding(silent, docs)


class TestTruncation:
    def make_doc(self):
        """The frame in the last utterance queries a mention from two
        utterances earlier."""
        utts = [Utterance(i, t, tuple(t.split()), 2.0 * i, 2.0 * i + 2.0)
                for i, t in enumerate(["look at the cup", "please wait",
                                       "take it now"])]
        gold = BoundingBox(100, 100, 160, 160)
        other = BoundingBox(300, 300, 360, 360)
        m0 = Mention("m0", 0, (3, 4), "noun", "cup")
        feats = np.eye(2, 4, dtype=np.float32)
        frame = Frame(t_s=5.0, candidates=[
            ObjectCandidate(gold, 0.9, feats[0]),
            ObjectCandidate(other, 0.8, feats[1]),
        ], visual_relations=[
            GoldVisualRelation("m0", RelationLabel.DIRECT, (gold,)),
        ])
        doc = DialogueDocument("trunc", utts, [m0], [], [frame])
        validate_document(doc)
        return doc

    def test_truncated_query_counts_as_miss(self):
        doc = self.make_doc()
        narrow = evaluate_grounding(perfect_predictor, [doc],
                                    EvalConfig(k_values=(1,)))
        assert narrow.recall(RelationLabel.DIRECT.value, "overall", 1) == 0.0
        assert narrow.row(RelationLabel.DIRECT.value, "overall", 1).n == 1
        wide = evaluate_grounding(perfect_predictor, [doc],
                                  EvalConfig(k_values=(1,), window_utterances=3))
        assert wide.recall(RelationLabel.DIRECT.value, "overall", 1) == 1.0

    def test_truncated_answer_has_empty_ranking(self):
        doc = self.make_doc()
        answers = collect_answers(perfect_predictor, [doc],
                                  (RelationLabel.DIRECT,), window_utterances=1)
        assert len(answers) == 1
        assert answers[0].query.truncated and answers[0].boxes == ()


class TestAblation:
    @staticmethod
    def context_oracle(docs):
        """Resolves a pronoun iff its antecedent's surface token made it
        into the window; otherwise ranks the gold box last."""
        ante = {}
        surf = {}
        for d in docs:
            for r in d.text_relations:
                ante[(d.doc_id, r.src)] = r.tgt
            for m in d.mentions:
                surf[(d.doc_id, m.id)] = (m.pos, m.surface)

        def predict(inst):
            tokens = {t for u in inst.utterances for t in u.tokens}
            out = {}
            for vr in inst.frame.visual_relations:
                scores = np.array([max(iou(c.box, g) for g in vr.boxes)
                                   for c in inst.frame.candidates])
                pos, _ = surf[(inst.doc_id, vr.src)]
                if pos == "pronoun":
                    tgt = ante[(inst.doc_id, vr.src)]
                    _, noun_tok = surf[(inst.doc_id, tgt)]
                    if noun_tok not in tokens:
                        scores = 1.0 - scores
                out[(vr.src, vr.label)] = rank_by(scores)
            return out

        return predict

    def test_length_one_equals_default(self):
        docs = synth_docs(pronoun_rate=0.4)
        sweep = utterance_length_ablation(perfect_predictor, docs, (1,))
        default = evaluate_grounding(perfect_predictor, docs)
        assert sweep[1].rows == default.rows

    def test_monotone_corpus_gives_non_decreasing_pronoun_recall(self):
        docs = monotone_corpus(gaps=(1, 2, 3, 4), repeats=3)
        predict = self.context_oracle(docs)
        lengths = (1, 2, 3, 4, 5)
        sweep = utterance_length_ablation(predict, docs, lengths)
        curve = [sweep[l].recall(RelationLabel.DIRECT.value, "pronoun", 1)
                 for l in lengths]
        assert all(b >= a for a, b in zip(curve, curve[1:]))
        assert curve[0] < curve[-1]
        assert curve[-1] == 1.0

    def test_row_counts(self):
        docs = synth_docs(pronoun_rate=0.4)
        lengths = (1, 2, 3)
        sweep = utterance_length_ablation(perfect_predictor, docs, lengths)
        assert set(sweep) == set(lengths)
        ks = len(EvalConfig().k_values)
        for report in sweep.values():
            cats = {(r.relation, r.category) for r in report.rows}
            assert len(report.rows) == len(cats) * ks

    def test_bad_lengths_rejected(self):
        with pytest.raises(EvaluationError):
            utterance_length_ablation(perfect_predictor, [], (0, 1))


class TestConfidenceStats:
    def test_single_prediction(self):
        stats = confidence_stats([[0.7]], (1, 5))
        assert stats["all_mean"] == pytest.approx(0.7)
        assert stats["top_mean"]["1"] == pytest.approx(0.7)
        assert stats["bottom_mean"]["5"] == pytest.approx(0.7)

    def test_clamp_when_k_exceeds_length(self):
        stats = confidence_stats([[0.9, 0.5, 0.1]], (5,))
        assert stats["top_mean"]["5"] == pytest.approx(0.5)
        assert stats["bottom_mean"]["5"] == pytest.approx(0.5)

    def test_matches_sort_then_average_oracle(self):
        rng = np.random.default_rng(42)
        lists = [list(rng.uniform(0, 1, rng.integers(1, 12)))
                 for _ in range(50)]
        ks = (1, 5, 10)
        stats = confidence_stats(lists, ks)
        for k in ks:
            top_pool, bottom_pool = [], []
            for confs in lists:
                s = sorted(confs)
                kk = min(k, len(s))
                bottom_pool += s[:kk]
                top_pool += s[-kk:]
            assert stats["top_mean"][str(k)] == pytest.approx(np.mean(top_pool))
            assert stats["bottom_mean"][str(k)] == pytest.approx(np.mean(bottom_pool))
        flat = [c for confs in lists for c in confs]
        assert stats["all_mean"] == pytest.approx(np.mean(flat))
        assert stats["quantiles"]["0.50"] == pytest.approx(np.median(flat))
        assert stats["n"] == len(flat)

    def test_empty_input(self):
        assert confidence_stats([]) == {"n": 0}


class TestSerialization:
    def test_json_roundtrip(self, tmp_path):
        docs = synth_docs(pronoun_rate=0.3)
        report = evaluate_mrr(perfect_predictor, docs)
        path = write_report(report, tmp_path / "report.json",
                            tmp_path / "report.csv")
        back = load_report(path)
        assert back.rows == report.rows
        assert back.confidence == report.confidence
        lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert len(lines) == len(report.rows) + 1

    def test_text_table_is_aligned(self):
        docs = synth_docs(pronoun_rate=0.3)
        report = evaluate_grounding(perfect_predictor, docs)
        table = format_report(report)
        lines = table.splitlines()
        assert "R@1" in lines[0] and "R@10" in lines[0]
        widths = {len(l) for l in lines if l and not l.startswith("-")}
        assert len(widths) == 1

    def test_config_validation(self):
        with pytest.raises(EvaluationError):
            EvalConfig(k_values=(5, 1))
        with pytest.raises(EvaluationError):
            EvalConfig(k_values=())
        with pytest.raises(EvaluationError):
            EvalConfig(iou_threshold=0.0)
        with pytest.raises(EvaluationError):
            EvalConfig(window_utterances=0)
