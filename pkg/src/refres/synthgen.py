"""Synthetic visually grounded dialogue generator.

Dialogues are scripted over a small sampled scene: two speakers alternate
utterances built from event templates (introduce an object, act on it, act
with an instrument, hand it over, comment on a part).  Repeat references to
an object surface as a full noun phrase, as the shared pronoun, or are
dropped entirely at configured rates; dropped arguments keep their gold
links.  Every utterance gets one frame whose candidate list holds a jittered
detection per scene object, random off-scene distractors, and the two
reserved speaker slots.

Two resolvability invariants hold by construction and are re-checked by
`resolvability_audit`: every pronoun chain steps back to a visually grounded
noun with each hop inside the training window, and every dropped argument
has a textual antecedent inside the same reach.  Pronouns share one surface
form, so the pronoun token alone carries no object identity; only context
does.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import (
    SPEAKER_A_BOX,
    SPEAKER_B_BOX,
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
    save_corpus,
    validate_document,
)

CANVAS_W = 640.0
CANVAS_H = 480.0

NOUNS = ("cup", "plate", "box", "book", "lamp", "chair",
         "bottle", "phone", "towel", "knife", "basket", "mirror")
ATTRIBUTES = ("red", "blue", "green", "white", "black", "yellow", "small", "big")
PART_OF = {"cup": "handle", "box": "lid", "bottle": "cap", "chair": "cushion"}
PRONOUN = "it"

# antecedents are kept within this many utterances so a three-utterance
# window always contains them
CHAIN_REACH = 2

_SPEAKER_TOKENS = ("[a]", "[b]")


class GenerationError(ValueError):
    """Raised for infeasible generator configurations."""


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for one corpus.

    `candidates_per_frame` counts everything in a frame: one detection per
    scene object, the two speaker slots, and random distractors filling the
    remainder.  `pronoun_rate` and `zero_reference_rate` apply per eligible
    slot: a repeat reference whose previous mention is within chain reach.
    The drop decision is made first; the pronoun decision applies to the
    slots that were not dropped.
    """

    dialogues: int = 20
    utterances: tuple[int, int] = (10, 16)
    object_vocab: int = 12
    scene_objects: int = 4
    candidates_per_frame: int = 8
    pronoun_rate: float = 0.0
    zero_reference_rate: float = 0.0
    feature_dim: int = 16
    feature_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.dialogues < 1:
            raise GenerationError(f"dialogues must be >= 1, got {self.dialogues}")
        lo, hi = self.utterances
        if not (1 <= lo <= hi):
            raise GenerationError(f"bad utterance range {self.utterances}")
        if not 0 < self.object_vocab <= len(NOUNS):
            raise GenerationError(
                f"object_vocab must be in 1..{len(NOUNS)}, got {self.object_vocab}")
        if not 1 <= self.scene_objects <= self.object_vocab:
            raise GenerationError(
                f"scene_objects must be in 1..object_vocab, got {self.scene_objects}")
        if self.candidates_per_frame < self.scene_objects + 2:
            raise GenerationError(
                f"infeasible: {self.candidates_per_frame} candidates cannot hold "
                f"{self.scene_objects} scene objects plus two speaker slots")
        if (self.candidates_per_frame > self.scene_objects + 2
                and self.object_vocab <= self.scene_objects):
            raise GenerationError(
                "distractors need object classes outside the scene; raise object_vocab")
        for name in ("pronoun_rate", "zero_reference_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GenerationError(f"{name} must be in [0, 1], got {v}")
        if self.feature_dim < self.object_vocab + 2:
            raise GenerationError(
                f"feature_dim must be >= object_vocab + 2 so classes and speaker "
                f"slots get separated axes, got {self.feature_dim}")
        if self.feature_noise < 0.0:
            raise GenerationError(f"feature_noise must be >= 0, got {self.feature_noise}")


@dataclass
class GenStats:
    """Realization bookkeeping, written next to the corpus as JSON."""

    dialogues: int = 0
    utterances: int = 0
    mentions: int = 0
    nouns: int = 0
    pronouns: int = 0
    predicates: int = 0
    eligible_slots: int = 0
    zero_references: int = 0
    pronoun_draws: int = 0
    pronoun_realizations: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def class_features(config: SynthConfig) -> np.ndarray:
    """Prototype feature per object class plus two speaker rows, shape
    (object_vocab + 2, feature_dim).  Each class owns one strong axis, so
    prototypes stay separated for any vocab size; mild off-axis texture
    keeps features from being exactly one-hot."""
    rng = np.random.default_rng([config.seed, 999331])
    n = config.object_vocab + 2
    feats = np.zeros((n, config.feature_dim), dtype=np.float64)
    for i in range(n):
        feats[i, i] = 2.0
    feats += rng.normal(0.0, 0.1, size=feats.shape)
    return feats.astype(np.float32)


# ------------------------------------------------------------ scene layout

@dataclass
class _SceneObject:
    class_id: int
    noun: str
    attr: str
    box: BoundingBox


def _sample_box(rng: np.random.Generator, avoid: list[BoundingBox]) -> BoundingBox:
    # objects live below y=60 so they never touch the reserved speaker strip
    for _ in range(500):
        w = float(rng.uniform(50.0, 90.0))
        h = float(rng.uniform(50.0, 90.0))
        x = float(rng.uniform(10.0, CANVAS_W - 10.0 - w))
        y = float(rng.uniform(60.0, CANVAS_H - 10.0 - h))
        b = BoundingBox(x, y, x + w, y + h)
        if all(iou(b, other) < 0.3 for other in avoid):
            return b
    raise GenerationError("could not place a box clear of existing ones")


def _sample_scene(rng: np.random.Generator, config: SynthConfig) -> list[_SceneObject]:
    classes = rng.choice(config.object_vocab, size=config.scene_objects, replace=False)
    attrs = rng.choice(len(ATTRIBUTES), size=config.scene_objects, replace=False)
    scene: list[_SceneObject] = []
    for c, a in zip(classes, attrs):
        box = _sample_box(rng, [o.box for o in scene])
        scene.append(_SceneObject(int(c), NOUNS[int(c)], ATTRIBUTES[int(a)], box))
    return scene


def _jitter(rng: np.random.Generator, box: BoundingBox) -> BoundingBox:
    # +-5 px on >=50 px boxes keeps the detection above 0.5 overlap with its
    # gold box and below 0.5 with every other gold box
    dx, dy = rng.uniform(-5.0, 5.0, size=2)
    return BoundingBox(box.x1 + dx, box.y1 + dy, box.x2 + dx, box.y2 + dy)


def _make_frame(rng: np.random.Generator, t_s: float, scene: list[_SceneObject],
                config: SynthConfig, bases: np.ndarray,
                relations: list[GoldVisualRelation]) -> Frame:
    d = config.feature_dim
    noise = config.feature_noise

    def feat(row: int) -> np.ndarray:
        return (bases[row] + rng.normal(0.0, noise, size=d)).astype(np.float32)

    cands = [ObjectCandidate(_jitter(rng, o.box), float(rng.uniform(0.6, 0.99)),
                             feat(o.class_id)) for o in scene]
    in_scene = {o.class_id for o in scene}
    off_scene = [c for c in range(config.object_vocab) if c not in in_scene]
    for _ in range(config.candidates_per_frame - len(scene) - 2):
        cls = int(rng.choice(off_scene))
        box = _sample_box(rng, [o.box for o in scene])
        cands.append(ObjectCandidate(box, float(rng.uniform(0.3, 0.9)), feat(cls)))
    cands.append(ObjectCandidate(BoundingBox(*SPEAKER_A_BOX), 1.0, feat(config.object_vocab)))
    cands.append(ObjectCandidate(BoundingBox(*SPEAKER_B_BOX), 1.0, feat(config.object_vocab + 1)))
    order = rng.permutation(len(cands))
    return Frame(t_s=t_s, candidates=[cands[i] for i in order],
                 visual_relations=relations)


# ------------------------------------------------------- dialogue scripting

class _DialogueBuilder:
    def __init__(self, doc_id: str, rng: np.random.Generator, config: SynthConfig,
                 bases: np.ndarray, stats: GenStats):
        self.doc_id = doc_id
        self.rng = rng
        self.config = config
        self.bases = bases
        self.stats = stats
        self.scene = _sample_scene(rng, config)
        self.utterances: list[Utterance] = []
        self.mentions: list[Mention] = []
        self.text_relations: list[GoldTextRelation] = []
        self.frames: list[Frame] = []
        self.introduced: list[int] = []
        # object index -> (mention id, utterance index) of its latest mention
        self.last_mention: dict[int, tuple[str, int]] = {}
        self._mid = 0

    # -- low-level emission helpers

    def _new_mention(self, utt: int, span: tuple[int, int], pos: str,
                     surface: str) -> Mention:
        m = Mention(id=f"m{self._mid}", utt=utt, span=span, pos=pos, surface=surface)
        self._mid += 1
        self.mentions.append(m)
        return m

    def _emit_object_mention(self, utt: int, span: tuple[int, int], pos: str,
                             surface: str, obj_i: int) -> Mention:
        m = self._new_mention(utt, span, pos, surface)
        if obj_i in self.last_mention:
            self.text_relations.append(GoldTextRelation(
                src=m.id, tgt=self.last_mention[obj_i][0], label=RelationLabel.DIRECT))
        self.last_mention[obj_i] = (m.id, utt)
        return m

    def _choose_form(self, utt: int, obj_i: int) -> str:
        prev = self.last_mention.get(obj_i)
        if prev is None or utt - prev[1] > CHAIN_REACH:
            return "noun"
        self.stats.eligible_slots += 1
        if self.rng.random() < self.config.zero_reference_rate:
            self.stats.zero_references += 1
            return "zero"
        self.stats.pronoun_draws += 1
        if self.rng.random() < self.config.pronoun_rate:
            self.stats.pronoun_realizations += 1
            return "pronoun"
        return "noun"

    def _noun_phrase(self, obj_i: int) -> list[str]:
        o = self.scene[obj_i]
        return ["the", o.attr, o.noun]

    # -- event templates; each returns (tokens, visual relations) and appends
    #    mentions / text relations as a side effect

    def _intro(self, utt: int, obj_i: int):
        tokens = ["look", "at"] + self._noun_phrase(obj_i)
        m = self._emit_object_mention(utt, (len(tokens) - 1, len(tokens)), "noun",
                                      tokens[-1], obj_i)
        self.introduced.append(obj_i)
        return tokens, [GoldVisualRelation(m.id, RelationLabel.DIRECT,
                                           (self.scene[obj_i].box,))]

    def _object_slot(self, utt: int, prefix: list[str], obj_i: int,
                     verb: Mention, case: RelationLabel,
                     relations: list[GoldVisualRelation]) -> list[str]:
        """Realize one eligible object argument after `prefix` and record its
        textual and visual gold."""
        form = self._choose_form(utt, obj_i)
        box = (self.scene[obj_i].box,)
        if form == "zero":
            ante = self.last_mention[obj_i][0]
            self.text_relations.append(GoldTextRelation(verb.id, ante, case))
            relations.append(GoldVisualRelation(verb.id, case, box, zero_reference=True))
            return prefix
        if form == "pronoun":
            tokens = prefix + [PRONOUN]
            m = self._emit_object_mention(utt, (len(tokens) - 1, len(tokens)),
                                          "pronoun", PRONOUN, obj_i)
        else:
            tokens = prefix + self._noun_phrase(obj_i)
            m = self._emit_object_mention(utt, (len(tokens) - 1, len(tokens)),
                                          "noun", tokens[-1], obj_i)
        self.text_relations.append(GoldTextRelation(verb.id, m.id, case))
        relations.append(GoldVisualRelation(m.id, RelationLabel.DIRECT, box))
        relations.append(GoldVisualRelation(verb.id, case, box))
        return tokens

    def _secondary_object(self, utt: int, prefix: list[str], obj_i: int,
                          verb: Mention, case: RelationLabel,
                          relations: list[GoldVisualRelation]) -> list[str]:
        """Instrument or destination: always a full noun phrase."""
        tokens = prefix + self._noun_phrase(obj_i)
        m = self._emit_object_mention(utt, (len(tokens) - 1, len(tokens)), "noun",
                                      tokens[-1], obj_i)
        box = (self.scene[obj_i].box,)
        self.text_relations.append(GoldTextRelation(verb.id, m.id, case))
        relations.append(GoldVisualRelation(m.id, RelationLabel.DIRECT, box))
        relations.append(GoldVisualRelation(verb.id, case, box))
        return tokens

    def _listener_box(self, utt: int) -> tuple[BoundingBox, ...]:
        slot = SPEAKER_B_BOX if utt % 2 == 0 else SPEAKER_A_BOX
        return (BoundingBox(*slot),)

    def _speaker_box(self, utt: int) -> tuple[BoundingBox, ...]:
        slot = SPEAKER_A_BOX if utt % 2 == 0 else SPEAKER_B_BOX
        return (BoundingBox(*slot),)

    def _act_take(self, utt: int, obj_i: int):
        relations: list[GoldVisualRelation] = []
        verb = self._new_mention(utt, (1, 2), "predicate", "take")
        tokens = self._object_slot(utt, ["please", "take"], obj_i, verb,
                                   RelationLabel.ACC, relations)
        relations.append(GoldVisualRelation(verb.id, RelationLabel.NOM,
                                            self._listener_box(utt)))
        return tokens, relations

    def _act_give(self, utt: int, obj_i: int):
        relations: list[GoldVisualRelation] = []
        verb = self._new_mention(utt, (0, 1), "predicate", "give")
        tokens = self._object_slot(utt, ["give", "me"], obj_i, verb,
                                   RelationLabel.ACC, relations)
        relations.append(GoldVisualRelation(verb.id, RelationLabel.NOM,
                                            self._listener_box(utt)))
        relations.append(GoldVisualRelation(verb.id, RelationLabel.DAT,
                                            self._speaker_box(utt)))
        return tokens, relations

    def _act_wipe(self, utt: int, obj_i: int, tool_i: int):
        relations: list[GoldVisualRelation] = []
        verb = self._new_mention(utt, (1, 2), "predicate", "wipe")
        tokens = self._object_slot(utt, ["now", "wipe"], obj_i, verb,
                                   RelationLabel.ACC, relations)
        tokens = self._secondary_object(utt, tokens + ["with"], tool_i, verb,
                                        RelationLabel.INS_LOC, relations)
        relations.append(GoldVisualRelation(verb.id, RelationLabel.NOM,
                                            self._listener_box(utt)))
        return tokens, relations

    def _act_put(self, utt: int, obj_i: int, dest_i: int):
        relations: list[GoldVisualRelation] = []
        verb = self._new_mention(utt, (0, 1), "predicate", "put")
        tokens = self._object_slot(utt, ["put"], obj_i, verb,
                                   RelationLabel.ACC, relations)
        tokens = self._secondary_object(utt, tokens + ["on"], dest_i, verb,
                                        RelationLabel.INS_LOC, relations)
        relations.append(GoldVisualRelation(verb.id, RelationLabel.NOM,
                                            self._listener_box(utt)))
        return tokens, relations

    def _part(self, utt: int, obj_i: int):
        part = PART_OF[self.scene[obj_i].noun]
        tokens = ["check", "the", part]
        m = self._new_mention(utt, (2, 3), "noun", part)
        self.text_relations.append(GoldTextRelation(
            m.id, self.last_mention[obj_i][0], RelationLabel.BRIDGING))
        return tokens, [GoldVisualRelation(m.id, RelationLabel.BRIDGING,
                                           (self.scene[obj_i].box,))]

    # -- top-level script

    def _recent_objects(self, utt: int) -> list[int]:
        return [i for i in self.introduced
                if utt - self.last_mention[i][1] <= CHAIN_REACH]

    def _pick_event(self, utt: int):
        rng = self.rng
        remaining = [i for i in range(len(self.scene)) if i not in self.introduced]
        if utt == 0 or (remaining and rng.random() < 0.45):
            return self._intro(utt, remaining[0])
        if rng.random() < 0.08:
            return ["okay", "thanks"], []
        recent = self._recent_objects(utt)
        pool = recent if recent else self.introduced
        obj_i = int(rng.choice(pool))
        others = [i for i in self.introduced if i != obj_i]
        acts = ["take", "give"]
        if others:
            acts += ["wipe", "put"]
        if self.scene[obj_i].noun in PART_OF and obj_i in recent:
            acts.append("part")
        act = str(rng.choice(acts))
        if act == "take":
            return self._act_take(utt, obj_i)
        if act == "give":
            return self._act_give(utt, obj_i)
        if act == "part":
            return self._part(utt, obj_i)
        second = int(rng.choice(others))
        if act == "wipe":
            return self._act_wipe(utt, obj_i, second)
        return self._act_put(utt, obj_i, second)

    def build(self) -> DialogueDocument:
        lo, hi = self.config.utterances
        n_utts = int(self.rng.integers(lo, hi + 1))
        for u in range(n_utts):
            tag = _SPEAKER_TOKENS[u % 2]
            before = len(self.mentions)
            body, relations = self._pick_event(u)
            tokens = [tag] + body
            # mention spans were laid out relative to the utterance body
            for k in range(before, len(self.mentions)):
                m = self.mentions[k]
                self.mentions[k] = Mention(m.id, m.utt, (m.span[0] + 1, m.span[1] + 1),
                                           m.pos, m.surface)
            self.utterances.append(Utterance(
                idx=u, text=" ".join(tokens), tokens=tuple(tokens),
                start_s=2.0 * u, end_s=2.0 * u + 2.0))
            self.frames.append(_make_frame(self.rng, 2.0 * u + 1.0, self.scene,
                                           self.config, self.bases, relations))
        doc = DialogueDocument(doc_id=self.doc_id, utterances=self.utterances,
                               mentions=self.mentions,
                               text_relations=self.text_relations,
                               frames=self.frames)
        validate_document(doc)
        return doc


def generate(config: SynthConfig) -> tuple[list[DialogueDocument], GenStats]:
    """Build the corpus in memory.  The same config yields the same corpus;
    each dialogue draws from its own seed stream."""
    bases = class_features(config)
    stats = GenStats()
    docs = []
    for idx in range(config.dialogues):
        rng = np.random.default_rng([config.seed, 1000 + idx])
        builder = _DialogueBuilder(f"dlg{idx:04d}", rng, config, bases, stats)
        docs.append(builder.build())
    stats.dialogues = len(docs)
    stats.utterances = sum(len(d.utterances) for d in docs)
    stats.mentions = sum(len(d.mentions) for d in docs)
    for d in docs:
        for m in d.mentions:
            if m.pos == "noun":
                stats.nouns += 1
            elif m.pos == "pronoun":
                stats.pronouns += 1
            elif m.pos == "predicate":
                stats.predicates += 1
    return docs, stats


def generate_to_dir(config: SynthConfig, out_dir: str | Path) -> tuple[Path, GenStats]:
    """Write corpus.jsonl plus feature sidecars and stats.json under
    `out_dir`; returns the corpus path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    docs, stats = generate(config)
    corpus_path = save_corpus(docs, out_dir / "corpus.jsonl")
    with open(out_dir / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return corpus_path, stats


# -------------------------------------------------------------------- audit

@dataclass
class AuditReport:
    ok: bool
    problems: list[str]
    # "doc_id/mention_id" -> hops from a pronoun to its grounded noun
    chain_lengths: dict[str, int] = field(default_factory=dict)


def resolvability_audit(docs: list[DialogueDocument],
                        window_utterances: int = 3) -> AuditReport:
    """Check that the corpus is solvable by a window-limited model: pronoun
    chains step back to a visually grounded noun with every hop inside the
    window, and dropped arguments keep an in-reach textual antecedent.
    Problems name the offending mention."""
    reach = window_utterances - 1
    problems: list[str] = []
    chains: dict[str, int] = {}
    for doc in docs:
        ante = {r.src: r.tgt for r in doc.text_relations
                if r.label is RelationLabel.DIRECT}
        grounded = {vr.src for fr in doc.frames for vr in fr.visual_relations
                    if vr.label is RelationLabel.DIRECT}
        info = {m.id: m for m in doc.mentions}
        for m in doc.mentions:
            if m.pos != "pronoun":
                continue
            key = f"{doc.doc_id}/{m.id}"
            cur, hops, broken = m.id, 0, False
            while info[cur].pos != "noun":
                nxt = ante.get(cur)
                if nxt is None:
                    problems.append(f"{key}: chain breaks at {cur}, no antecedent")
                    broken = True
                    break
                gap = info[cur].utt - info[nxt].utt
                if gap > reach:
                    problems.append(f"{key}: antecedent {nxt} is {gap} utterances "
                                    f"back, reach is {reach}")
                    broken = True
                    break
                cur = nxt
                hops += 1
                if hops > len(doc.mentions):
                    problems.append(f"{key}: antecedent chain does not terminate")
                    broken = True
                    break
            if broken:
                continue
            if cur not in grounded:
                problems.append(f"{key}: chain ends at {cur} which has no "
                                f"direct visual gold")
            else:
                chains[key] = hops
        textual = {}
        for r in doc.text_relations:
            textual.setdefault((r.src, r.label), []).append(r.tgt)
        for fr in doc.frames:
            for vr in fr.visual_relations:
                if not vr.zero_reference:
                    continue
                key = f"{doc.doc_id}/{vr.src}"
                tgts = textual.get((vr.src, vr.label), [])
                if not tgts:
                    problems.append(f"{key}: dropped {vr.label.value} argument has "
                                    f"no textual antecedent")
                    continue
                gap = info[vr.src].utt - info[tgts[0]].utt
                if gap > reach:
                    problems.append(f"{key}: dropped {vr.label.value} antecedent "
                                    f"{tgts[0]} is {gap} utterances back, reach is {reach}")
    return AuditReport(ok=not problems, problems=problems, chain_lengths=chains)


# ------------------------------------------------- controlled-gap corpus

def monotone_corpus(gaps: tuple[int, ...] = (1, 2, 3, 4), repeats: int = 2,
                    candidates_per_frame: int = 6, feature_dim: int = 16,
                    seed: int = 0) -> list[DialogueDocument]:
    """Corpus for the window-length sweep: every pronoun's noun antecedent
    sits exactly `gap` utterances back, one block per gap.  A window of w
    utterances contains the antecedent iff gap <= w - 1, so widening the
    window only ever adds resolvable pronouns."""
    if max(gaps) < 1:
        raise GenerationError("gaps must be >= 1")
    n_objects = len(gaps)
    if n_objects > len(NOUNS):
        raise GenerationError(f"at most {len(NOUNS)} gap blocks")
    if candidates_per_frame < n_objects + 1:
        raise GenerationError("need room for scene objects plus a distractor")
    if feature_dim < len(NOUNS):
        raise GenerationError(f"feature_dim must be >= {len(NOUNS)}")
    docs = []
    for rep in range(repeats):
        rng = np.random.default_rng([seed, 555, rep])
        scene = []
        for i in range(n_objects):
            x = 40.0 + 140.0 * (i % 4)
            y = 100.0 + 130.0 * (i // 4)
            cls = (rep + i * 3) % len(NOUNS)
            scene.append(_SceneObject(cls, NOUNS[cls], ATTRIBUTES[i % len(ATTRIBUTES)],
                                      BoundingBox(x, y, x + 80.0, y + 80.0)))
        bases = np.zeros((len(NOUNS), feature_dim), dtype=np.float64)
        for i in range(len(NOUNS)):
            bases[i, i] = 2.0
        utterances: list[Utterance] = []
        mentions: list[Mention] = []
        text_relations: list[GoldTextRelation] = []
        frames: list[Frame] = []
        mid = 0

        def add_utt(tokens, relations):
            u = len(utterances)
            utterances.append(Utterance(idx=u, text=" ".join(tokens),
                                        tokens=tuple(tokens),
                                        start_s=2.0 * u, end_s=2.0 * u + 2.0))
            in_scene = {o.class_id for o in scene}
            cands = [ObjectCandidate(_jitter(rng, o.box), 0.9,
                                     (bases[o.class_id]
                                      + rng.normal(0.0, 0.05, feature_dim)
                                      ).astype(np.float32))
                     for o in scene]
            off = [c for c in range(len(NOUNS)) if c not in in_scene]
            for _ in range(candidates_per_frame - n_objects):
                cls = int(rng.choice(off))
                cands.append(ObjectCandidate(
                    _sample_box(rng, [o.box for o in scene]), 0.5,
                    (bases[cls] + rng.normal(0.0, 0.05, feature_dim)
                     ).astype(np.float32)))
            order = rng.permutation(len(cands))
            frames.append(Frame(t_s=2.0 * u + 1.0,
                                candidates=[cands[i] for i in order],
                                visual_relations=relations))

        for i, gap in enumerate(gaps):
            o = scene[i]
            intro_tokens = ["look", "at", "the", o.attr, o.noun]
            noun = Mention(id=f"m{mid}", utt=len(utterances), span=(4, 5),
                           pos="noun", surface=o.noun)
            mid += 1
            mentions.append(noun)
            add_utt(intro_tokens, [GoldVisualRelation(noun.id, RelationLabel.DIRECT,
                                                      (o.box,))])
            for _ in range(gap - 1):
                add_utt(["please", "wait"], [])
            pro = Mention(id=f"m{mid}", utt=len(utterances), span=(1, 2),
                          pos="pronoun", surface=PRONOUN)
            mid += 1
            mentions.append(pro)
            text_relations.append(GoldTextRelation(pro.id, noun.id,
                                                   RelationLabel.DIRECT))
            add_utt(["take", PRONOUN],
                    [GoldVisualRelation(pro.id, RelationLabel.DIRECT, (o.box,))])
        doc = DialogueDocument(doc_id=f"mono{rep:02d}", utterances=utterances,
                               mentions=mentions, text_relations=text_relations,
                               frames=frames)
        validate_document(doc)
        docs.append(doc)
    return docs
