"""scikit-learn style wrapper: fit on (source, summary) pairs, predict summaries."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import harness
from .harness import TrainConfig

_DEFAULTS = TrainConfig()


def _as_tokens(X, name: str) -> tuple[list[list[str]], bool]:
    """Accept whitespace-joined strings or token lists; remember which."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise ValueError(f"{name} must be a sequence of documents")
    docs = list(X)
    if not docs:
        raise ValueError(f"{name} is empty")
    as_text = all(isinstance(d, str) for d in docs)
    if as_text:
        return [d.split() for d in docs], True
    out = []
    for i, d in enumerate(docs):
        if isinstance(d, str) or not all(isinstance(t, str) for t in d):
            raise ValueError(f"{name}[{i}] must be a string or a list of string tokens")
        out.append(list(d))
    return out, False


class VarianceSummarizer(BaseEstimator):
    """Pointer-generator summarizer with attention refinement and variance losses.

    Hyperparameters mirror :class:`~attnvar.harness.TrainConfig`. ``fit`` runs
    MLE pretraining then fine-tuning with the local and global variance losses;
    ``predict`` beam-decodes each source.
    """

    def __init__(
        self,
        hidden=_DEFAULTS.hidden,
        emb_dim=_DEFAULTS.emb_dim,
        vocab_size=_DEFAULTS.vocab_size,
        batch_size=_DEFAULTS.batch_size,
        lr=_DEFAULTS.lr,
        initial_accumulator=_DEFAULTS.initial_accumulator,
        pretrain_iters=_DEFAULTS.pretrain_iters,
        finetune_iters=_DEFAULTS.finetune_iters,
        lambda_local=_DEFAULTS.lambda_local,
        lambda_global=_DEFAULTS.lambda_global,
        eps=_DEFAULTS.eps,
        refine=_DEFAULTS.refine,
        gate_form=_DEFAULTS.gate_form,
        beam_size=_DEFAULTS.beam_size,
        clip_norm=_DEFAULTS.clip_norm,
        max_decode_len=_DEFAULTS.max_decode_len,
        block_trigrams=_DEFAULTS.block_trigrams,
        random_state=0,
    ):
        self.hidden = hidden
        self.emb_dim = emb_dim
        self.vocab_size = vocab_size
        self.batch_size = batch_size
        self.lr = lr
        self.initial_accumulator = initial_accumulator
        self.pretrain_iters = pretrain_iters
        self.finetune_iters = finetune_iters
        self.lambda_local = lambda_local
        self.lambda_global = lambda_global
        self.eps = eps
        self.refine = refine
        self.gate_form = gate_form
        self.beam_size = beam_size
        self.clip_norm = clip_norm
        self.max_decode_len = max_decode_len
        self.block_trigrams = block_trigrams
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        params = self.get_params()
        seed = int(params.pop("random_state"))
        return TrainConfig(**params, seed=seed, seeds=(seed,))

    def fit(self, X, y, X_val=None, y_val=None):
        sources, _ = _as_tokens(X, "X")
        targets, _ = _as_tokens(y, "y")
        if len(sources) != len(targets):
            raise ValueError(f"X and y have different lengths ({len(sources)} != {len(targets)})")
        if any(not s for s in sources):
            raise ValueError("X contains an empty source")
        val = []
        if X_val is not None:
            vs, _ = _as_tokens(X_val, "X_val")
            vt, _ = _as_tokens(y_val, "y_val")
            val = list(zip(vs, vt))
        cfg = self._config()
        res = harness.train(cfg, list(zip(sources, targets)), val)
        self.params_ = res.params
        self.vocab_ = res.vocab
        self.max_decode_len_ = res.max_decode_len
        self.training_log_ = res.log
        self.n_iter_ = res.log[-1]["iteration"] if res.log else 0
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        sources, as_text = _as_tokens(X, "X")
        if any(not s for s in sources):
            raise ValueError("X contains an empty source")
        outs = harness.decode_sources(
            self.params_, self.vocab_, sources, self.beam_size, self.max_decode_len_, self.block_trigrams
        )
        return [" ".join(o) for o in outs] if as_text else outs

    def score(self, X, y):
        """Mean ROUGE-1 F1 of the predictions against ``y``."""
        targets, _ = _as_tokens(y, "y")
        preds = self.predict(X)
        preds = [p.split() if isinstance(p, str) else p for p in preds]
        return float(np.mean(harness.score_outputs(preds, targets)["rouge1"]))
