"""Generative model, diagonal-Gaussian inference network, and ELBO assembly.

The decoder is an LSTM language model conditioned on the latent twice: the
latent is concatenated to every input embedding, and an affine map of the
latent provides the initial cell state (with the initial hidden state its
tanh). The encoder is an LSTM whose final
hidden state feeds an affine head producing the posterior mean and
log-variance. The prior is fixed standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Embedding, InitSpec, Linear, Lstm, dropout_apply
from .tensor import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


class InputError(ValueError):
    pass


@dataclass
class GaussianParams:
    """Diagonal Gaussian: per-example mean and log-variance, shape (B, D)."""

    mean: Tensor
    logvar: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class ElboBreakdown:
    """Per-batch ELBO pieces (means over the batch, in nats)."""

    reconstruction: Tensor  # scalar, E_q[log p(x|z)]
    kl: Tensor              # scalar, KL(q || prior)
    objective: Tensor       # reconstruction - beta * kl
    beta: float


class VaeModel:
    """Encoder/decoder bundle with disjoint generator and inference parameters."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden_size: int,
                 latent_dim: int, spec: InitSpec, rng: np.random.Generator,
                 dropout: float = 0.5):
        self.vocab_size = vocab_size
        self.bos_id = vocab_size
        self.eos_id = vocab_size + 1
        self.full_vocab = vocab_size + 2
        self.latent_dim = latent_dim
        self.dropout = dropout

        self.enc_embed = Embedding(self.full_vocab, embed_dim, spec, rng)
        self.enc_lstm = Lstm(embed_dim, hidden_size, spec, rng)
        self.enc_head = Linear(hidden_size, 2 * latent_dim, spec, rng)

        self.dec_embed = Embedding(self.full_vocab, embed_dim, spec, rng)
        self.dec_lstm = Lstm(embed_dim + latent_dim, hidden_size, spec, rng)
        self.dec_init = Linear(latent_dim, hidden_size, spec, rng)
        self.dec_out = Linear(hidden_size, self.full_vocab, spec, rng)

    # -- parameter bookkeeping --------------------------------------------

    def inference_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in (("enc_embed", self.enc_embed),
                            ("enc_lstm", self.enc_lstm),
                            ("enc_head", self.enc_head)):
            for name, p in mod.parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def generator_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in (("dec_embed", self.dec_embed),
                            ("dec_lstm", self.dec_lstm),
                            ("dec_init", self.dec_init),
                            ("dec_out", self.dec_out)):
            for name, p in mod.parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {**self.generator_parameters(), **self.inference_parameters()}

    # -- inference network -------------------------------------------------

    def encode(self, ids: np.ndarray, mask: np.ndarray | None = None) -> GaussianParams:
        """Posterior parameters from a (B, T) id batch; mask marks real tokens."""
        ids = np.atleast_2d(np.asarray(ids))
        batch, steps = ids.shape
        if steps == 0:
            raise InputError("cannot encode an empty sequence")
        if mask is None:
            mask = np.ones((batch, steps))
        state = self.enc_lstm.initial_state(batch)
        lengths = mask.sum(axis=1).astype(int)
        final_h: Tensor | None = None
        for t in range(steps):
            h, c = self.enc_lstm.step(self.enc_embed.lookup(ids[:, t]), state)
            state = (h, c)
            pick = Tensor((lengths == t + 1).astype(float)[:, None])
            contrib = h * pick
            final_h = contrib if final_h is None else final_h + contrib
        head = self.enc_head(final_h)
        d = self.latent_dim
        return GaussianParams(mean=head[:, :d], logvar=head[:, d:])

    # -- latent ------------------------------------------------------------

    @staticmethod
    def reparam_sample(q: GaussianParams, noise: np.ndarray) -> Tensor:
        """z = mu + exp(logvar / 2) * noise, differentiable w.r.t. q."""
        return q.mean + T.exp(q.logvar * 0.5) * Tensor(noise)

    @staticmethod
    def kl_to_prior(q: GaussianParams) -> Tensor:
        """Closed-form KL(q || N(0, I)) per example, shape (B,)."""
        var = T.exp(q.logvar)
        per_dim = (q.mean * q.mean + var - 1.0 - q.logvar) * 0.5
        return T.tsum(per_dim, axis=1)

    @staticmethod
    def log_q(q: GaussianParams, z: Tensor) -> Tensor:
        """Diagonal-Gaussian log-density of z under q, per example."""
        diff = z - q.mean
        per_dim = (q.logvar + LOG_2PI + diff * diff * T.exp(-q.logvar)) * (-0.5)
        return T.tsum(per_dim, axis=1)

    @staticmethod
    def log_prior(z: Tensor) -> Tensor:
        per_dim = (z * z + LOG_2PI) * (-0.5)
        return T.tsum(per_dim, axis=1)

    # -- generator ---------------------------------------------------------

    def decode_logprob(self, ids: np.ndarray, mask: np.ndarray, z: Tensor,
                       training: bool = False,
                       dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Per-example sum_t log p(x_t | x_<t, z), including the end token.

        ids is the raw (B, T) token batch; a begin token is fed first and an
        end token is scored at each example's true length.
        """
        ids = np.atleast_2d(np.asarray(ids))
        batch, steps = ids.shape
        mask = np.asarray(mask, dtype=float)
        lengths = mask.sum(axis=1).astype(int)

        inputs = np.concatenate(
            [np.full((batch, 1), self.bos_id), ids], axis=1)
        targets = np.concatenate([ids, np.zeros((batch, 1), dtype=ids.dtype)], axis=1)
        target_mask = np.concatenate([mask, np.zeros((batch, 1))], axis=1)
        # end token replaces the first pad slot of each row
        targets[np.arange(batch), lengths] = self.eos_id
        target_mask[np.arange(batch), lengths] = 1.0
        # padded input positions feed the begin token so embeddings stay valid
        inputs = np.where(
            np.concatenate([np.ones((batch, 1)), mask], axis=1) > 0,
            inputs, self.bos_id)

        # the latent seeds the cell state, the persistent channel, so its
        # influence survives the whole unroll
        c0 = self.dec_init(z)
        h0 = T.tanh(c0)
        state = (h0, c0)
        total: Tensor | None = None
        for t in range(steps + 1):
            emb = self.dec_embed.lookup(inputs[:, t])
            emb = dropout_apply(emb, self.dropout, training, dropout_rng)
            x = T.concat([emb, z], axis=1)
            h, c = self.dec_lstm.step(x, state)
            state = (h, c)
            h = dropout_apply(h, self.dropout, training, dropout_rng)
            logits = self.dec_out(h)
            step_lp = T.gather_cols(logits, targets[:, t]) - T.logsumexp(logits, axis=1)
            masked = step_lp * Tensor(target_mask[:, t])
            total = masked if total is None else total + masked
        return total

    # -- objective ---------------------------------------------------------

    def elbo(self, ids: np.ndarray, mask: np.ndarray, beta: float,
             noise: np.ndarray, training: bool = False,
             dropout_rng: np.random.Generator | None = None) -> ElboBreakdown:
        """Single-sample ELBO estimate averaged over the batch."""
        q = self.encode(ids, mask)
        z = self.reparam_sample(q, noise)
        recon = T.tmean(self.decode_logprob(ids, mask, z, training, dropout_rng))
        kl = T.tmean(self.kl_to_prior(q))
        objective = recon - beta * kl
        return ElboBreakdown(reconstruction=recon, kl=kl,
                             objective=objective, beta=beta)
