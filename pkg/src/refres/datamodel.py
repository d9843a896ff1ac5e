"""Corpus schema, serialization, windowing, and ground-truth assembly.

A corpus is a JSONL file of dialogue documents plus one binary sidecar file
per video frame holding the detected candidate boxes and features.  Windowed
instances pair a span of consecutive utterances with (for the multimodal
task) one frame; ground-truth matrices are binary per-relation matrices over
token rows and mention/candidate columns.

Documents are validated on load and treated as immutable afterwards.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

SIDECAR_MAGIC = b"RFNF"
SIDECAR_VERSION = 1

# Exophoric speaker/listener slots are ordinary candidates distinguished by
# these reserved boxes (image coordinates; kept clear of scene placement).
SPEAKER_A_BOX = (0.0, 0.0, 24.0, 24.0)
SPEAKER_B_BOX = (616.0, 0.0, 640.0, 24.0)


class SchemaError(ValueError):
    """Corpus content violates the schema; message names document and field."""


class RelationLabel(Enum):
    """Relation label set: direct reference plus five indirect relations.

    Instrumental and locative share a surface marker and are merged into a
    single label, giving six labels in total.
    """

    DIRECT = "="
    NOM = "NOM"
    ACC = "ACC"
    DAT = "DAT"
    INS_LOC = "INS-LOC"
    BRIDGING = "BRIDGING"


LABELS: tuple[RelationLabel, ...] = tuple(RelationLabel)
INDIRECT_LABELS: tuple[RelationLabel, ...] = tuple(
    l for l in RelationLabel if l is not RelationLabel.DIRECT)

_LABEL_BY_VALUE = {l.value: l for l in RelationLabel}

POS_CLASSES = ("noun", "pronoun", "predicate", "other")


def label_from_value(value: str) -> RelationLabel:
    if value not in _LABEL_BY_VALUE:
        raise SchemaError(f"unknown relation label {value!r}")
    return _LABEL_BY_VALUE[value]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with strictly positive extent (x1 < x2, y1 < y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise SchemaError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union with continuous areas."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Utterance:
    idx: int
    text: str
    tokens: tuple[str, ...]
    start_s: float
    end_s: float


@dataclass(frozen=True)
class Mention:
    """A token span inside one utterance.  `span` is [start, end) over the
    utterance's own tokens; the first token is the span's representative."""

    id: str
    utt: int
    span: tuple[int, int]
    pos: str
    surface: str = ""


@dataclass(frozen=True)
class GoldTextRelation:
    src: str
    tgt: str
    label: RelationLabel


@dataclass(frozen=True)
class GoldVisualRelation:
    src: str
    label: RelationLabel
    boxes: tuple[BoundingBox, ...]
    zero_reference: bool = False


@dataclass
class ObjectCandidate:
    box: BoundingBox
    confidence: float
    feature: np.ndarray  # float32, length d_O


@dataclass
class Frame:
    t_s: float
    candidates: list[ObjectCandidate]
    visual_relations: list[GoldVisualRelation]
    candidates_ref: str = ""


@dataclass
class DialogueDocument:
    doc_id: str
    utterances: list[Utterance]
    mentions: list[Mention]
    text_relations: list[GoldTextRelation]
    frames: list[Frame]

    def mention_by_id(self, mid: str) -> Mention:
        return self._mention_index[mid]

    def __post_init__(self):
        self._mention_index = {m.id: m for m in self.mentions}


# ------------------------------------------------------------ validation

def validate_document(doc: DialogueDocument) -> None:
    did = doc.doc_id
    if not doc.utterances:
        raise SchemaError(f"{did}: document has no utterances")
    for i, utt in enumerate(doc.utterances):
        if utt.idx != i:
            raise SchemaError(f"{did}: utterances[{i}].idx is {utt.idx}, expected {i}")
        if utt.end_s < utt.start_s:
            raise SchemaError(f"{did}: utterances[{i}] ends before it starts")
    seen: set[str] = set()
    for m in doc.mentions:
        if m.id in seen:
            raise SchemaError(f"{did}: duplicate mention id {m.id!r}")
        seen.add(m.id)
        if not 0 <= m.utt < len(doc.utterances):
            raise SchemaError(f"{did}: mention {m.id!r} references utterance {m.utt}")
        s, e = m.span
        n = len(doc.utterances[m.utt].tokens)
        if not (0 <= s < e <= n):
            raise SchemaError(f"{did}: mention {m.id!r} span {m.span} outside token range 0..{n}")
        if m.pos not in POS_CLASSES:
            raise SchemaError(f"{did}: mention {m.id!r} has unknown pos {m.pos!r}")
    for r in doc.text_relations:
        for end in (r.src, r.tgt):
            if end not in seen:
                raise SchemaError(f"{did}: text relation endpoint {end!r} is not a mention")
    t_lo = min(u.start_s for u in doc.utterances)
    t_hi = max(u.end_s for u in doc.utterances)
    for j, fr in enumerate(doc.frames):
        if not (t_lo <= fr.t_s <= t_hi):
            raise SchemaError(f"{did}: frames[{j}].t_s={fr.t_s} outside dialogue span "
                              f"[{t_lo}, {t_hi}]")
        d_o = {c.feature.shape for c in fr.candidates}
        if len(d_o) > 1:
            raise SchemaError(f"{did}: frames[{j}] mixes candidate feature lengths {d_o}")
        for vr in fr.visual_relations:
            if vr.src not in seen:
                raise SchemaError(f"{did}: frames[{j}] visual relation source {vr.src!r} "
                                  f"is not a mention")
            if vr.zero_reference and vr.label is RelationLabel.DIRECT:
                raise SchemaError(f"{did}: frames[{j}] zero_reference on a DIRECT relation "
                                  f"(source {vr.src!r})")
            if not vr.boxes:
                raise SchemaError(f"{did}: frames[{j}] visual relation {vr.src!r} has no boxes")


# --------------------------------------------------------- sidecar format

def write_candidates(path: Path, candidates: list[ObjectCandidate]) -> None:
    """Binary candidate file: magic, version, q, d_O, then per candidate a
    float32 box (x1, y1, x2, y2), confidence, and feature vector.  All
    little-endian."""
    d_o = len(candidates[0].feature) if candidates else 0
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<III", SIDECAR_VERSION, len(candidates), d_o))
        for c in candidates:
            if len(c.feature) != d_o:
                raise SchemaError(f"{path}: candidate feature length {len(c.feature)} != {d_o}")
            fh.write(struct.pack("<5f", *c.box.as_tuple(), c.confidence))
            fh.write(np.asarray(c.feature, dtype="<f4").tobytes())


def read_candidates(path: Path) -> list[ObjectCandidate]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SIDECAR_MAGIC:
            raise SchemaError(f"{path}: bad magic {magic!r}")
        version, q, d_o = struct.unpack("<III", fh.read(12))
        if version != SIDECAR_VERSION:
            raise SchemaError(f"{path}: unsupported sidecar version {version}")
        out = []
        rec = struct.Struct("<5f")
        for _ in range(q):
            x1, y1, x2, y2, conf = rec.unpack(fh.read(rec.size))
            feat = np.frombuffer(fh.read(4 * d_o), dtype="<f4").copy()
            out.append(ObjectCandidate(BoundingBox(x1, y1, x2, y2), conf, feat))
        if fh.read(1):
            raise SchemaError(f"{path}: trailing bytes after {q} candidate records")
    return out


# ----------------------------------------------------------- corpus JSONL

def _doc_to_json(doc: DialogueDocument) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "doc_id": doc.doc_id,
        "utterances": [
            {"idx": u.idx, "text": u.text, "tokens": list(u.tokens),
             "start_s": u.start_s, "end_s": u.end_s}
            for u in doc.utterances
        ],
        "mentions": [
            {"id": m.id, "utt": m.utt, "span": list(m.span), "pos": m.pos}
            for m in doc.mentions
        ],
        "text_relations": [
            {"src": r.src, "tgt": r.tgt, "label": r.label.value}
            for r in doc.text_relations
        ],
        "frames": [
            {"t_s": fr.t_s, "candidates_ref": fr.candidates_ref,
             "visual_relations": [
                 {"src": vr.src, "label": vr.label.value,
                  "boxes": [list(b.as_tuple()) for b in vr.boxes],
                  "zero_ref": vr.zero_reference}
                 for vr in fr.visual_relations
             ]}
            for fr in doc.frames
        ],
    }


def _doc_from_json(rec: dict, base_dir: Path) -> DialogueDocument:
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{rec.get('doc_id', '?')}: schema_version "
                          f"{rec.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    did = rec["doc_id"]
    try:
        utterances = [Utterance(u["idx"], u["text"], tuple(u["tokens"]),
                                float(u["start_s"]), float(u["end_s"]))
                      for u in rec["utterances"]]
        mentions = []
        for m in rec["mentions"]:
            utt_tokens = None
            if 0 <= m["utt"] < len(utterances):
                utt_tokens = utterances[m["utt"]].tokens
            s, e = m["span"]
            surface = " ".join(utt_tokens[s:e]) if utt_tokens else ""
            mentions.append(Mention(m["id"], m["utt"], (s, e), m["pos"], surface))
        relations = [GoldTextRelation(r["src"], r["tgt"], label_from_value(r["label"]))
                     for r in rec["text_relations"]]
        frames = []
        for fr in rec["frames"]:
            cands = read_candidates(base_dir / fr["candidates_ref"])
            vrs = [GoldVisualRelation(
                       vr["src"], label_from_value(vr["label"]),
                       tuple(BoundingBox(*b) for b in vr["boxes"]),
                       bool(vr.get("zero_ref", False)))
                   for vr in fr["visual_relations"]]
            frames.append(Frame(float(fr["t_s"]), cands, vrs, fr["candidates_ref"]))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{did}: malformed record ({exc})") from exc
    doc = DialogueDocument(did, utterances, mentions, relations, frames)
    validate_document(doc)
    return doc


def save_corpus(docs: list[DialogueDocument], path: str | Path,
                features_dirname: str = "features") -> Path:
    """Write the JSONL file and one sidecar per frame next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feat_dir = path.parent / features_dirname
    feat_dir.mkdir(exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            for j, fr in enumerate(doc.frames):
                fr.candidates_ref = f"{features_dirname}/{doc.doc_id}_f{j:03d}.rfnf"
                write_candidates(path.parent / fr.candidates_ref, fr.candidates)
            fh.write(json.dumps(_doc_to_json(doc), separators=(",", ":")) + "\n")
    return path


def load_corpus(path: str | Path) -> list[DialogueDocument]:
    path = Path(path)
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            docs.append(_doc_from_json(rec, path.parent))
    return docs


# ------------------------------------------------------------- instances

@dataclass
class TextInstance:
    """A window of consecutive utterances with the mentions and gold textual
    relations that fall entirely inside it.  `encoding` is attached by the
    encoder's tokenizer before ground-truth assembly or training."""

    doc_id: str
    utterance_indices: tuple[int, ...]
    utterances: list[Utterance]
    mentions: list[Mention]
    relations: list[GoldTextRelation]
    encoding: object | None = field(default=None, compare=False)


@dataclass
class MMInstance(TextInstance):
    """A text window paired with one frame's candidates and gold visual
    relations."""

    frame: Frame | None = None
    frame_index: int = -1


def _window_slice(doc: DialogueDocument, lo: int, hi: int) -> tuple:
    idxs = tuple(range(lo, hi))
    in_win = set(idxs)
    mentions = [m for m in doc.mentions if m.utt in in_win]
    mids = {m.id for m in mentions}
    relations = [r for r in doc.text_relations if r.src in mids and r.tgt in mids]
    return idxs, doc.utterances[lo:hi], mentions, relations


def build_text_instances(doc: DialogueDocument, window_sentences: int = 3) -> list[TextInstance]:
    """Sliding windows of `window_sentences` utterances, stride one.  A
    document shorter than the window yields a single truncated window."""
    if window_sentences < 1:
        raise ValueError(f"window_sentences must be >= 1, got {window_sentences}")
    n = len(doc.utterances)
    w = min(window_sentences, n)
    out = []
    for lo in range(0, n - w + 1):
        idxs, utts, mentions, relations = _window_slice(doc, lo, lo + w)
        out.append(TextInstance(doc.doc_id, idxs, utts, mentions, relations))
    return out


def frames_of_utterance(doc: DialogueDocument, utt_idx: int) -> list[tuple[int, Frame]]:
    """Frames whose timestamp falls inside the utterance's time span."""
    u = doc.utterances[utt_idx]
    last = utt_idx == len(doc.utterances) - 1
    out = []
    for j, fr in enumerate(doc.frames):
        if u.start_s <= fr.t_s < u.end_s or (last and fr.t_s == u.end_s):
            out.append((j, fr))
    return out


def build_mm_instances(doc: DialogueDocument, window_utterances: int = 3,
                       mode: str = "train") -> list[MMInstance]:
    """Pair utterance windows with frames.

    train mode: full sliding windows (stride one; short documents give one
    truncated window), each paired with every frame that falls in the
    window's last utterance.  eval mode: every utterance is graded
    individually, taking up to `window_utterances - 1` preceding utterances
    as context, so each frame appears exactly once regardless of the window
    length.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n = len(doc.utterances)
    w = min(window_utterances, n)
    out = []
    if mode == "train":
        anchors = [(lo, lo + w - 1) for lo in range(0, n - w + 1)]
    else:
        anchors = [(max(0, u - w + 1), u) for u in range(n)]
    for lo, last in anchors:
        frame_pairs = frames_of_utterance(doc, last)
        if not frame_pairs:
            continue
        idxs, utts, mentions, relations = _window_slice(doc, lo, last + 1)
        for j, fr in frame_pairs:
            out.append(MMInstance(doc.doc_id, idxs, utts, mentions, relations,
                                  frame=fr, frame_index=j))
    return out


# ----------------------------------------------------- ground-truth matrices

@dataclass
class GroundTruth:
    """Binary target matrices over encoded token rows.

    `s_target[l]` is (n, n): row i, column j set when the mention whose
    first subword sits at row i stands in relation l to the mention whose
    first subword sits at column j.  `u_target[l]` is (n, q): column j set
    when candidate j overlaps a gold box for (mention at row i, l) with
    IoU >= threshold.  `row_flags` marks mention first-subword rows; all
    other rows are excluded from losses.
    """

    labels: tuple[RelationLabel, ...]
    row_flags: np.ndarray
    mention_rows: np.ndarray
    mention_ids: tuple[str, ...]
    s_target: dict[RelationLabel, np.ndarray] | None = None
    u_target: dict[RelationLabel, np.ndarray] | None = None


def ground_truth_matrices(instance: TextInstance, labels: tuple[RelationLabel, ...] = LABELS,
                          iou_threshold: float = 0.5) -> GroundTruth:
    enc = instance.encoding
    if enc is None:
        raise ValueError("instance has no encoding; tokenize it first")
    n = len(enc.token_ids)
    mention_ids = tuple(enc.mention_rows.keys())
    rows = np.array([enc.mention_rows[mid] for mid in mention_ids], dtype=np.intp)
    row_flags = np.zeros(n, dtype=bool)
    row_flags[rows] = True
    gt = GroundTruth(labels, row_flags, rows, mention_ids)

    row_of = dict(enc.mention_rows)
    gt.s_target = {l: np.zeros((n, n), dtype=np.float32) for l in labels}
    for r in instance.relations:
        if r.label not in gt.s_target:
            continue
        if r.src in row_of and r.tgt in row_of:
            gt.s_target[r.label][row_of[r.src], row_of[r.tgt]] = 1.0
    # coreference is an equivalence: expand annotated links to every ordered
    # pair inside a chain, so the target is consistent with a symmetric score
    # matrix (a directed target would pit a chain head's null column against
    # the very entry its successor must maximize)
    if RelationLabel.DIRECT in gt.s_target:
        tgt = gt.s_target[RelationLabel.DIRECT]
        reach = (tgt[np.ix_(rows, rows)] + tgt[np.ix_(rows, rows)].T) > 0
        m = len(rows)
        comp = np.arange(m)
        for i in range(m):
            for j in range(m):
                if reach[i, j]:
                    a, b = comp[i], comp[j]
                    if a != b:
                        comp[comp == b] = a
        for i in range(m):
            for j in range(m):
                if i != j and comp[i] == comp[j]:
                    tgt[rows[i], rows[j]] = 1.0

    if isinstance(instance, MMInstance) and instance.frame is not None:
        cands = instance.frame.candidates
        q = len(cands)
        gt.u_target = {l: np.zeros((n, q), dtype=np.float32) for l in labels}
        for vr in instance.frame.visual_relations:
            if vr.label not in gt.u_target or vr.src not in row_of:
                continue
            i = row_of[vr.src]
            for j, cand in enumerate(cands):
                if any(iou(cand.box, g) >= iou_threshold for g in vr.boxes):
                    gt.u_target[vr.label][i, j] = 1.0
    return gt
