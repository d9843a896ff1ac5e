"""Desk-scale textual and multimodal reference resolution.

Per-relation similarity heads over contextual token embeddings and detected
object candidates, trained with a small hand-written reverse-mode tensor
engine.  Subpackages cover the tensor engine, corpus data model, text
encoder, cross-attention fusion, similarity heads, training, evaluation,
and a synthetic dialogue generator.
"""

__version__ = "0.1.0"
