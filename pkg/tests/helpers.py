"""Shared builders for integration-level tests."""

from __future__ import annotations

import numpy as np

from refres import datamodel as dm


def chain_doc(doc_id="doc0", n_utts=4, d_o=4, seed=7):
    """Document with one noun mention per utterance, a full coref chain, and
    one frame per utterance whose first candidate box matches the gold box."""
    utts, mentions, frames = [], [], []
    rng = np.random.default_rng(seed)
    for u in range(n_utts):
        utts.append(dm.Utterance(u, f"tok{u} the thing", (f"tok{u}", "the", "thing"),
                                 2.0 * u, 2.0 * u + 2.0))
        mentions.append(dm.Mention(f"m{u}", u, (1, 3), "noun", "the thing"))
        cands = [dm.ObjectCandidate(dm.BoundingBox(10.0 * c, 10.0, 10.0 * c + 8.0, 18.0),
                                    0.9, rng.normal(size=d_o).astype(np.float32))
                 for c in range(1, 4)]
        vrs = [dm.GoldVisualRelation(f"m{u}", dm.RelationLabel.DIRECT,
                                     (dm.BoundingBox(10.0, 10.0, 18.0, 18.0),))]
        frames.append(dm.Frame(2.0 * u + 0.5, cands, vrs))
    relations = [dm.GoldTextRelation(f"m{u}", f"m{u - 1}", dm.RelationLabel.DIRECT)
                 for u in range(1, n_utts)]
    return dm.DialogueDocument(doc_id, utts, mentions, relations, frames)
