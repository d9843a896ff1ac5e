"""Configuration presets.

`full_scale` pins the full-scale hyperparameters the architecture is
documented against: 256-subword windows over 1024-wide representations,
128 or 256 object candidates per frame, and the AdamW recipe (lr 5e-5,
weight decay 0.01, 1000 warmup steps, 16 epochs, batch size 16 or 32).
Training at that scale is out of scope for this toy stack; the preset
exists so downstream configs can reference one authoritative snapshot.
`toy_scale` is the desk-sized default the test-suite trains.
"""

from __future__ import annotations

from .encoder import EncoderConfig
from .fusion import FusionConfig
from .training import TrainConfig

FULL_SCALE = {
    "max_subwords": 256,            # p
    "d_text": 1024,                 # d_T
    "d_object": 1024,               # d_O
    "d_shared": 1024,               # d_S
    "candidates_per_frame": (128, 256),  # q options
    "n_labels": 6,
    "learning_rate": 5e-5,
    "weight_decay": 0.01,
    "warmup_steps": 1000,
    "epochs": 16,
    "batch_sizes": (16, 32),
    "train_window_utterances": 3,
    "eval_window_utterances": 1,
    "recall_k": (1, 5, 10),
    "iou_threshold": 0.5,
}


def full_scale(q: int = 128, batch_size: int = 16):
    """Full-scale configs.  `q` and `batch_size` pick between the two
    documented options for each."""
    if q not in FULL_SCALE["candidates_per_frame"]:
        raise ValueError(f"q must be one of {FULL_SCALE['candidates_per_frame']}")
    if batch_size not in FULL_SCALE["batch_sizes"]:
        raise ValueError(f"batch size must be one of {FULL_SCALE['batch_sizes']}")
    enc = EncoderConfig(max_len=FULL_SCALE["max_subwords"],
                        d_model=FULL_SCALE["d_text"], layers=4, heads=8, ffn_mult=4)
    fus = FusionConfig(d_text=FULL_SCALE["d_text"], d_object=FULL_SCALE["d_object"],
                       d_shared=FULL_SCALE["d_shared"], blocks=2, heads=8, ffn_mult=4)
    train = TrainConfig(learning_rate=FULL_SCALE["learning_rate"],
                        weight_decay=FULL_SCALE["weight_decay"],
                        warmup_steps=FULL_SCALE["warmup_steps"],
                        epochs=FULL_SCALE["epochs"], batch_size=batch_size,
                        train_window=FULL_SCALE["train_window_utterances"])
    return enc, fus, train


def toy_scale(seed: int = 0):
    """Desk-scale configs used throughout the test-suite and examples."""
    enc = EncoderConfig(max_len=64, d_model=64, layers=2, heads=2, ffn_mult=2)
    fus = FusionConfig(d_text=64, d_object=64, d_shared=64, blocks=2, heads=2,
                       ffn_mult=2)
    train = TrainConfig(learning_rate=1e-3, weight_decay=0.01, warmup_steps=50,
                        epochs=16, batch_size=16, seed=seed, train_window=3)
    return enc, fus, train
