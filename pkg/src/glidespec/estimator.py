"""Estimator-style wrapper around draft training against a fixed target.

``X`` is a 2-D integer array of token sequences. ``fit`` trains the draft,
``predict_proba`` returns its next-token distributions under the same
delayed view of the target used during training, and ``score`` is the
exact acceptance rate against the target on ``X``.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .bench import acceptance_rate_exact
from .errors import ContractError
from .model import GlideConfig, GlideDraft, TargetModel
from .training import TrainingConfig, draft_logits, train_draft


class GlideDraftEstimator(BaseEstimator):
    def __init__(self, target: TargetModel | None = None, n_layers: int = 1, draft_dim: int = 64,
                 n_heads: int = 4, ffn_dim: int = 128, block_length: int = 5,
                 cross_attention: bool = True, learning_rate: float = 5e-4, batch_size: int = 16,
                 epochs: int = 1, max_steps: int | None = None, random_state: int = 0):
        self.target = target
        self.n_layers = n_layers
        self.draft_dim = draft_dim
        self.n_heads = n_heads
        self.ffn_dim = ffn_dim
        self.block_length = block_length
        self.cross_attention = cross_attention
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.random_state = random_state

    def _tokens(self, X) -> np.ndarray:
        if self.target is None:
            raise ContractError("a target model is required")
        X = check_array(X, dtype=np.int64, ensure_min_features=2)
        V = self.target.cfg.vocab_size
        if X.min() < 0 or X.max() >= V:
            raise ContractError(f"token ids must lie in [0, {V})")
        if X.shape[1] > self.target.cfg.max_seq:
            raise ContractError("sequences longer than the target's max_seq")
        return X

    def fit(self, X, y=None):
        X = self._tokens(X)
        gcfg = GlideConfig(target=self.target.cfg, n_layers=self.n_layers,
                           draft_dim=self.draft_dim, n_heads=self.n_heads, ffn_dim=self.ffn_dim,
                           block_length=self.block_length, cross_attention=self.cross_attention)
        tcfg = TrainingConfig(block_length=self.block_length, batch_size=min(self.batch_size, len(X)),
                              learning_rate=self.learning_rate, epochs=self.epochs,
                              max_steps=self.max_steps, seed=self.random_state)
        self.draft_ = GlideDraft(gcfg, seed=self.random_state)
        self.train_log_ = train_draft(self.draft_, self.target, X, tcfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        """``(n_sequences, seq_len, vocab)`` next-token distributions."""
        check_is_fitted(self, "draft_")
        X = self._tokens(X)
        with torch.no_grad():
            logits = draft_logits(self.draft_, self.target, torch.as_tensor(X), self.block_length)
        return torch.softmax(logits, -1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(-1)

    def score(self, X, y=None) -> float:
        X = self._tokens(X)
        pd = self.predict_proba(X)[:, :-1]
        with torch.no_grad():
            pt = torch.softmax(self.target(torch.as_tensor(X))[0], -1).numpy()[:, :-1]
        return acceptance_rate_exact(pd, pt)
