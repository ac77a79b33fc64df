"""Encoder-decoder over joint histories.

The encoder compresses the concatenation of all agents' windows into a
latent z; the decoder reconstructs state features and estimates the
softmax selection distribution from z.  Both train against a combined
cross-entropy + reconstruction loss using the exact distribution, which
is available centrally at training time.  The comm-augmented mode also
feeds z into every agent utility.
"""

from dataclasses import dataclass

import numpy as np

from s2qlab import diffcore
from s2qlab.behavior import SoftmaxDistribution
from s2qlab.diffcore import ApproximatorSpec
from s2qlab.errors import UsageError

PROB_FLOOR = 1e-12


class LatentCoder:
    """Encoder (joint windows -> z) and decoder (z -> state, selection logits)."""

    def __init__(self, joint_window_len: int, latent_dim: int, state_len: int,
                 n_indices: int, hidden: int, rng: np.random.Generator):
        self.latent_dim = latent_dim
        self.state_len = state_len
        self.n_indices = n_indices
        self.encoder_spec = ApproximatorSpec((joint_window_len, hidden, latent_dim))
        self.decoder_spec = ApproximatorSpec((latent_dim, hidden, state_len + n_indices))
        self.encoder = diffcore.init_params(self.encoder_spec, rng)
        self.decoder = diffcore.init_params(self.decoder_spec, rng)
        self.encode_calls = 0  # lets tests assert comm-free evaluation


@dataclass
class LatentLossParts:
    ce: float
    mse: float

    @property
    def total(self):
        return self.ce + self.mse


def encode(coder: LatentCoder, joint_histories) -> np.ndarray:
    """Latent for one timestep; joint_histories is (n_agents, window_len)."""
    x = np.asarray(joint_histories, dtype=np.float64).reshape(-1)
    if x.shape[0] != coder.encoder_spec.in_dim:
        raise UsageError(
            f"joint history length {x.shape[0]} does not match encoder input "
            f"{coder.encoder_spec.in_dim}")
    coder.encode_calls += 1
    return diffcore.forward(coder.encoder_spec, coder.encoder, x)


def encode_batch(coder: LatentCoder, X: np.ndarray):
    coder.encode_calls += X.shape[0]
    return diffcore.forward_batch(coder.encoder_spec, coder.encoder, X)


def _split_decoder_out(coder: LatentCoder, out: np.ndarray):
    s_hat = out[..., :coder.state_len]
    logits = out[..., coder.state_len:]
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p_hat = e / e.sum(axis=-1, keepdims=True)
    return s_hat, p_hat


def decode(coder: LatentCoder, z: np.ndarray):
    """(state reconstruction, estimated selection distribution) for one latent."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (coder.latent_dim,):
        raise UsageError(f"latent shape {z.shape} != ({coder.latent_dim},)")
    out = diffcore.forward(coder.decoder_spec, coder.decoder, z)
    s_hat, p_hat = _split_decoder_out(coder, out)
    return s_hat, SoftmaxDistribution(probs=p_hat, source="estimated")


def decode_batch(coder: LatentCoder, Z: np.ndarray):
    out, cache = diffcore.forward_batch(coder.decoder_spec, coder.decoder, Z)
    s_hat, p_hat = _split_decoder_out(coder, out)
    return s_hat, p_hat, cache


def cross_entropy(p: np.ndarray, p_hat: np.ndarray) -> np.ndarray:
    """Rowwise CE(p, p_hat) with a probability floor guarding the log."""
    return -(p * np.log(np.maximum(p_hat, PROB_FLOOR))).sum(axis=-1)


def latent_loss(coder: LatentCoder, joint_windows: np.ndarray,
                exact_p: np.ndarray, state_feats: np.ndarray):
    """Batch loss and gradients for both halves of the coder.

    Returns (LatentLossParts, encoder_grad, decoder_grad, p_hat).
    """
    B = joint_windows.shape[0]
    Z, enc_cache = encode_batch(coder, joint_windows)
    s_hat, p_hat, dec_cache = decode_batch(coder, Z)
    ce = float(cross_entropy(exact_p, p_hat).mean())
    err = s_hat - state_feats
    mse = float((err * err).mean())
    # softmax head: dCE/dlogits = (p_hat - p) / B
    d_out = np.empty((B, coder.state_len + coder.n_indices))
    d_out[:, :coder.state_len] = 2.0 * err / (B * coder.state_len)
    d_out[:, coder.state_len:] = (p_hat - exact_p) / B
    dec_grad, dZ = diffcore.backward_batch(coder.decoder_spec, coder.decoder,
                                           dec_cache, d_out)
    enc_grad, _ = diffcore.backward_batch(coder.encoder_spec, coder.encoder,
                                          enc_cache, dZ)
    return LatentLossParts(ce=ce, mse=mse), enc_grad, dec_grad, p_hat


def comm_augment(windows: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Append the shared latent to each agent's window (last axis)."""
    windows = np.asarray(windows, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    tiled = np.broadcast_to(z, windows.shape[:-1] + (z.shape[-1],))
    return np.concatenate([windows, tiled], axis=-1)
