"""Shared scoring network for the ranking and recall paths.

Both paths feed the same MLP; only the normalisation in front of it differs.
``bn_u`` is the single user-side BN used by both paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MLP, BatchNorm, Linear, Module


@dataclass
class UserBatch:
    """Request-side user inputs for n rows.

    fields: (n, P) categorical ids (profile fields plus context fields), already
    offset into the user tower's shared table. hist/hist_mask: (n, H) bag of
    previously clicked item ids.
    """

    fields: np.ndarray
    hist: np.ndarray
    hist_mask: np.ndarray

    def __len__(self):
        return self.fields.shape[0]

    def take(self, idx) -> "UserBatch":
        return UserBatch(self.fields[idx], self.hist[idx], self.hist_mask[idx])

    @staticmethod
    def concat(parts: list["UserBatch"]) -> "UserBatch":
        return UserBatch(np.concatenate([p.fields for p in parts]),
                         np.concatenate([p.hist for p in parts]),
                         np.concatenate([p.hist_mask for p in parts]))


class UserTower(Module):
    """Mean of profile/context embeddings and mean of history embeddings, then one ReLU layer."""

    def __init__(self, n_field_values: int, n_items: int, d: int, rng: np.random.Generator):
        self.fields = _table(n_field_values, d, rng, "user.fields")
        self.history = _table(n_items, d, rng, "user.history")
        self.proj = Linear(2 * d, d, rng, name="user.proj")

    def __call__(self, ub: UserBatch) -> Tensor:
        prof = ad.bag_mean(self.fields, ub.fields, np.ones(ub.fields.shape))
        hist = ad.bag_mean(self.history, ub.hist, ub.hist_mask)
        return ad.relu(self.proj(ad.concat([prof, hist])))


def _table(n: int, d: int, rng: np.random.Generator, name: str) -> ad.Param:
    return ad.Param(rng.normal(0.0, 0.1, size=(n, d)), name)


class Mixer(Module):
    def __init__(self, d_user: int, d_item: int, d_c: int, hidden: tuple[int, ...],
                 rng: np.random.Generator, momentum: float = 0.9, eps: float = 1e-5,
                 zero_last: bool = True):
        self.d_user, self.d_item, self.d_c = d_user, d_item, d_c
        self.mlp = MLP([d_user + d_item + d_c, *hidden, 1], rng, zero_last=zero_last, name="mixer")
        self.bn_u = BatchNorm(d_user, momentum, eps, "bn_u")
        self.bn_v = BatchNorm(d_item, momentum, eps, "bn_v")
        self.bn_u2i = BatchNorm(d_c, momentum, eps, "bn_u2i")
        self.bn_sid = BatchNorm(d_item, momentum, eps, "bn_sid")
        self.bn_u2t = BatchNorm(d_c, momentum, eps, "bn_u2t")

    def _check(self, e_u: Tensor, item: Tensor, cross: Tensor) -> None:
        n = e_u.shape[0]
        if (e_u.shape[1] != self.d_user or item.shape[1] != self.d_item
                or cross.shape[1] != self.d_c or item.shape[0] != n or cross.shape[0] != n):
            raise ValueError(f"mixer input dims {e_u.shape}/{item.shape}/{cross.shape} "
                             f"do not match ({self.d_user}, {self.d_item}, {self.d_c})")

    def score(self, e_u: Tensor, item: Tensor, cross: Tensor, item_bn: BatchNorm,
              cross_bn: BatchNorm, train: bool) -> Tensor:
        self._check(e_u, item, cross)
        x = ad.concat([self.bn_u(e_u, train), item_bn(item, train), cross_bn(cross, train)])
        return self.mlp(x)


def rank_score(e_u: Tensor, e_v: Tensor, c_uv, p: Mixer, train: bool = False) -> Tensor:
    """Ranking-path logits (n, 1) over [BN_u(e_u); BN_v(e_v); BN_u2i(c_uv)]."""
    return p.score(e_u, e_v, ad._wrap(c_uv), p.bn_v, p.bn_u2i, train)


def recall_score(e_u: Tensor, prefix_emb: Tensor, u2t, p: Mixer, train: bool = False) -> Tensor:
    """Recall-path logits (n, 1) over [BN_u(e_u); BN_sid(prefix); BN_u2t(u2t)]; same MLP."""
    return p.score(e_u, prefix_emb, ad._wrap(u2t), p.bn_sid, p.bn_u2t, train)
