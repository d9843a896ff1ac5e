"""End-to-end models: shared text encoder plus task-specific heads.

The textual model scores mention-mention antecedent links; the multimodal
model fuses candidate features with the encoded window and scores
mention-candidate links.  Both expose a flat named-parameter map so
checkpoints and the optimizer can treat them uniformly.
"""

from __future__ import annotations

import numpy as np

from . import heads as H
from . import tensor as T
from .datamodel import (LABELS, GroundTruth, MMInstance, RelationLabel, TextInstance,
                        ground_truth_matrices)
from .encoder import EncoderConfig, TransformerEncoder, Vocab, attach_encoding
from .fusion import FusionConfig, FusionDecoder


def prepare_instance(instance: TextInstance, vocab: Vocab, max_len: int,
                     labels: tuple[RelationLabel, ...] = LABELS,
                     iou_threshold: float = 0.5) -> GroundTruth:
    """Tokenize the window and build its ground-truth matrices, cached on
    the instance."""
    if instance.encoding is None:
        attach_encoding(instance, vocab, max_len=max_len)
    gt = getattr(instance, "_ground", None)
    if gt is None:
        gt = ground_truth_matrices(instance, labels, iou_threshold)
        instance._ground = gt
    return gt


def load_parameters(model, arrays: dict[str, np.ndarray]) -> None:
    """Copy a complete named-array set into a model, bitwise.  The names
    must match the model's parameter map exactly."""
    own = model.parameters()
    missing = sorted(set(own) - set(arrays))
    extra = sorted(set(arrays) - set(own))
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing {missing}, extra {extra}")
    for name, arr in arrays.items():
        if own[name].data.shape != arr.shape:
            raise ValueError(f"parameter {name!r} shape {arr.shape} != "
                             f"{own[name].data.shape}")
        own[name].data = np.array(arr, dtype=own[name].data.dtype)


class TRRModel:
    """Encoder + textual similarity head."""

    def __init__(self, vocab: Vocab, enc_cfg: EncoderConfig, seed: int = 0,
                 labels: tuple[RelationLabel, ...] = LABELS):
        self.vocab = vocab
        self.enc_cfg = enc_cfg
        self.labels = labels
        rng = np.random.default_rng([seed, 0])
        self.encoder = TransformerEncoder(len(vocab), enc_cfg, rng)
        self.head = H.TRRHead(enc_cfg.d_model, rng, labels, enc_cfg.dtype)

    def parameters(self) -> dict[str, T.Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        out.update({f"trr.{k}": v for k, v in self.head.parameters().items()})
        return out

    def similarity(self, instance: TextInstance) -> tuple[H.SimilarityStack, GroundTruth]:
        gt = prepare_instance(instance, self.vocab, self.enc_cfg.max_len, self.labels)
        enc = instance.encoding
        tprime = self.encoder.forward(enc.token_ids, enc.pad_mask)
        stack = H.trr_similarity(H.trr_expand(tprime, self.head), self.labels)
        return H.pool_first_subword(stack, gt), gt

    def loss(self, instance: TextInstance,
             active_labels: tuple[RelationLabel, ...] | None = None) -> T.Tensor:
        pooled, gt = self.similarity(instance)
        return H.loss_trr(pooled, gt, self.head, active_labels)

    def predict(self, instance: TextInstance) -> dict[tuple[str, RelationLabel], list]:
        pooled, _ = self.similarity(instance)
        out = {}
        for label in self.labels:
            for pred in H.predict_antecedents(pooled, self.head, label):
                out[(pred.mention_id, label)] = pred.ranked
        return out


class MRRModel:
    """Encoder + fusion decoder + multimodal similarity head."""

    def __init__(self, vocab: Vocab, enc_cfg: EncoderConfig, fus_cfg: FusionConfig,
                 seed: int = 0, labels: tuple[RelationLabel, ...] = LABELS):
        if fus_cfg.d_text != enc_cfg.d_model:
            raise ValueError(f"fusion d_text {fus_cfg.d_text} != encoder d_model "
                             f"{enc_cfg.d_model}")
        self.vocab = vocab
        self.enc_cfg = enc_cfg
        self.fus_cfg = fus_cfg
        self.labels = labels
        rng = np.random.default_rng([seed, 1])
        self.encoder = TransformerEncoder(len(vocab), enc_cfg, rng)
        self.fusion = FusionDecoder(fus_cfg, rng)
        self.head = H.MRRHead(fus_cfg.d_shared, rng, labels, fus_cfg.dtype)

    def parameters(self) -> dict[str, T.Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        out.update({f"fusion.{k}": v for k, v in self.fusion.parameters().items()})
        out.update({f"mrr.{k}": v for k, v in self.head.parameters().items()})
        return out

    def load_encoder_weights(self, arrays: dict[str, np.ndarray]) -> int:
        """Copy pretrained encoder arrays (keys prefixed "encoder.") into
        this model, bitwise.  Returns the number of tensors copied."""
        own = self.parameters()
        copied = 0
        for name, arr in arrays.items():
            if not name.startswith("encoder."):
                continue
            if name not in own:
                raise KeyError(f"pretrained tensor {name!r} has no counterpart")
            if own[name].data.shape != arr.shape:
                raise ValueError(f"pretrained tensor {name!r} shape {arr.shape} != "
                                 f"{own[name].data.shape}")
            own[name].data = np.array(arr, dtype=own[name].data.dtype)
            copied += 1
        return copied

    def candidate_features(self, instance: MMInstance) -> T.Tensor:
        feats = np.stack([c.feature for c in instance.frame.candidates])
        if feats.shape[1] != self.fus_cfg.d_object:
            raise ValueError(f"candidate feature width {feats.shape[1]} != configured "
                             f"d_object {self.fus_cfg.d_object}")
        return T.Tensor(feats.astype(self.fus_cfg.dtype, copy=False))

    def similarity(self, instance: MMInstance) -> tuple[H.SimilarityStack, GroundTruth]:
        if not isinstance(instance, MMInstance) or instance.frame is None:
            raise ValueError("MRRModel needs a frame-bearing instance")
        gt = prepare_instance(instance, self.vocab, self.enc_cfg.max_len, self.labels)
        enc = instance.encoding
        tprime = self.encoder.forward(enc.token_ids, enc.pad_mask)
        t_shared, x = self.fusion.project_inputs(tprime, self.candidate_features(instance))
        fused = self.fusion.decode(x, t_shared, enc.pad_mask)
        t_exp, x_exp = H.mrr_expand(t_shared, fused, self.head)
        stack = H.mrr_similarity(t_exp, x_exp)
        return H.pool_first_subword(stack, gt), gt

    def loss(self, instance: MMInstance,
             active_labels: tuple[RelationLabel, ...] | None = None) -> T.Tensor:
        pooled, gt = self.similarity(instance)
        return H.loss_mrr(pooled, gt, active_labels)

    def predict(self, instance: MMInstance) -> dict[tuple[str, RelationLabel], list]:
        """Ranked (candidate index, confidence) lists for every mention in
        the window under every label."""
        with T.no_grad():
            pooled, _ = self.similarity(instance)
        out = {}
        for label in self.labels:
            for pred in H.predict_objects(pooled, label):
                out[(pred.mention_id, label)] = pred.ranked
        return out
