"""Training configuration and the container holding every parameter group."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .layers import Module
from .mixer import Mixer, UserTower
from .tokenizer import Codebook, Encoder, SidEmbeddingTable
from .u2t import U2tStats, U2tStudent

ABLATION_FLAGS = ("fixed_sid", "no_train_u2i", "no_infer_mlp_u2t", "final_layer_only",
                  "recall_loss_weight")


@dataclass
class TrainConfig:
    L: int = 4
    K: int = 256
    d: int = 64
    d_c: int = 6
    alpha: float = 0.99
    lambda1: float = 0.25
    lambda2: float = 0.1
    lambda3: float = 0.1
    lr: float = 1e-3
    batch_size: int = 2048
    epochs: int = 5
    neg_per_pos: int = 4
    beam_width: int = 32
    top_n: int = 100
    seed: int = 0
    # ablation switches
    fixed_sid: bool = False
    no_train_u2i: bool = False
    no_infer_mlp_u2t: bool = False
    final_layer_only: bool = False
    recall_loss_weight: float = 1.0
    # architecture
    enc_hidden: int = 64
    mixer_hidden: tuple[int, ...] = (64, 32)
    u2t_hidden: int = 64
    mixer_zero_init: bool = False
    history_len: int = 10
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    # codebook maintenance
    dead_code_threshold: float = 1e-3
    dead_code_grace: int = 200
    kmeans_rounds: int = 10
    # search / evaluation
    accumulate_beam_scores: bool = False
    beam_pruning: bool = True
    eval_users: int = 1000
    eval_k: int = 10
    divergence_limit: float = 1e3

    def __post_init__(self):
        self.mixer_hidden = tuple(int(h) for h in self.mixer_hidden)
        for name in ("L", "K", "d", "d_c", "batch_size", "beam_width", "top_n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.neg_per_pos < 0:
            raise ValueError("epochs and neg_per_pos must be non-negative")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small preset sized for a single CPU core on the 10k x 2k synthetic world."""
        base = dict(L=3, K=16, d=32, batch_size=1024, epochs=3, enc_hidden=32,
                    mixer_hidden=(64, 32), u2t_hidden=32, dead_code_grace=100)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["mixer_hidden"] = list(self.mixer_hidden)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


class DigModel(Module):
    """Encoder, SID embeddings, user tower, shared mixer and u2t student.

    The codebook and SID table live here too but sit outside the parameter
    traversal: the codebook is maintained by EMA only and the SID table is a
    derived artifact refreshed by retokenization.
    """

    def __init__(self, cfg: TrainConfig, item_cards: list[int], n_user_values: int,
                 n_items: int, rng: np.random.Generator):
        self.encoder = Encoder(item_cards, cfg.d, cfg.enc_hidden, rng)
        self.sid_emb = SidEmbeddingTable(cfg.L, cfg.K, cfg.d, rng)
        self.user_tower = UserTower(n_user_values, n_items, cfg.d, rng)
        self.mixer = Mixer(cfg.d, cfg.d, cfg.d_c, cfg.mixer_hidden, rng,
                           cfg.bn_momentum, cfg.bn_eps, zero_last=cfg.mixer_zero_init)
        self.student = U2tStudent(cfg.L, cfg.d, cfg.d, cfg.d_c, cfg.u2t_hidden, rng)
        self.codebook = Codebook(cfg.L, cfg.K, cfg.d, cfg.alpha, rng)
        self.sid_table = np.zeros((n_items, cfg.L), dtype=np.int64)
        self.stat_u2t: U2tStats | None = None
        self.L, self.K = cfg.L, cfg.K

    def item_embeddings(self, item_fields: np.ndarray, chunk: int = 4096) -> np.ndarray:
        parts = [self.encoder(item_fields[s:s + chunk]).value
                 for s in range(0, item_fields.shape[0], chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.encoder.d))
