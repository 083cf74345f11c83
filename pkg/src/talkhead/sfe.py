"""Speech feature extractor: Bi-GRU encoder, memory banks, contrastive losses.

The audio side encodes fbank frames with a bidirectional GRU, pools every
four encoder steps to one video frame and reads a content feature from a
content memory bank per frame.  An identity feature is read from an identity
bank after pooling over the whole sequence.  The visual side encodes aligned
landmarks (per-frame mouth shape for content, sequence statistics for
identity).  Both pairs are trained with a scaled-cosine InfoNCE loss.

Memory modes:

``cs``  separate content and identity banks.
``w``   one bank shared by both paths (each path keeps its own addresser).
``wo``  no memory; a perceptron maps encoder states straight to features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import face
from .autodiff import ContractError, Tensor
from .layers import GRUCell, Module, Perceptron

MEMORY_MODES = ("wo", "w", "cs")
W_INIT, B_INIT = 10.0, -5.0
MOUTH_IDX = list(face.MOUTH)


@dataclass(frozen=True)
class SfeConfig:
    input_dim: int = 80
    hidden: int = 64
    feature_dim: int = 64
    content_slots: int = 8
    identity_slots: int = 8
    address_hidden: int = 64
    memory: str = "cs"
    content_target_dim: int = 2 * len(MOUTH_IDX)
    identity_target_dim: int = 2 * (face.N_POINTS - len(face.MOUTH)) + 6
    target_hidden: int = 64

    def __post_init__(self):
        if self.memory not in MEMORY_MODES:
            raise ValueError(f"memory must be one of {MEMORY_MODES}, got {self.memory!r}")


def _softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class SimilarityParams(Module):
    """Learnable ``w`` (kept positive through softplus) and ``b``."""

    def __init__(self, w: float = W_INIT, b: float = B_INIT):
        self.w_raw = Tensor(np.array([_softplus_inverse(w)]), requires_grad=True)
        self.b = Tensor(np.array([b]), requires_grad=True)

    @property
    def w(self) -> Tensor:
        return ad.softplus(self.w_raw)


class MemoryBank(Module):
    """``k x C`` slot matrix; reads are convex combinations of its rows."""

    def __init__(self, rng: np.random.Generator, slots: int, dim: int):
        if slots < 1 or dim < 1:
            raise ValueError("memory bank needs k >= 1 and C >= 1")
        self.M = Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(slots, dim)), requires_grad=True)

    def read(self, p: Tensor) -> Tensor:
        return ad.matmul(p, self.M)


def memory_read(bank: MemoryBank, addresser: Perceptron, h: Tensor) -> tuple[Tensor, Tensor]:
    """Address the bank from encoder states ``h`` (n x 2H or a 2H vector)."""
    squeeze = h.data.ndim == 1
    if squeeze:
        h = ad.reshape(h, (1, -1))
    p = ad.softmax(addresser(h), axis=1)
    y = bank.read(p)
    if squeeze:
        return ad.reshape(p, (-1,)), ad.reshape(y, (-1,))
    return p, y


def similarity(u: Tensor, v: Tensor, sp: SimilarityParams) -> Tensor:
    """``exp(w * cos(u, v) + b)``."""
    return ad.exp(ad.add(ad.mul(sp.w, ad.cosine_similarity(u, v)), sp.b))


def contrastive_loss(y_hat: Tensor, y: Tensor, sp: SimilarityParams) -> Tensor:
    """InfoNCE over rows: row t of ``y_hat`` should match row t of ``y``.

    Evaluated as ``mean_t(logsumexp_k s[t, k] - s[t, t])`` with
    ``s = w * cos + b``, which equals the ratio form without overflow.
    """
    n = y_hat.shape[0]
    if n < 2:
        raise ContractError(f"contrastive loss needs at least 2 rows, got {n}")
    logits = ad.add(ad.mul(sp.w, ad.cosine_matrix(y_hat, y)), sp.b)
    positives = ad.sum_(ad.mul(logits, np.eye(n)), axis=1)
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), positives))


def pooling_matrix(n_steps: int, n_frames: int, group: int = 4) -> np.ndarray:
    """Average ``group`` consecutive encoder steps into each video frame.

    The last frame absorbs any leftover steps; a frame with no steps takes
    the final step.
    """
    P = np.zeros((n_frames, n_steps))
    for j in range(n_frames):
        lo = j * group
        hi = n_steps if j == n_frames - 1 else min(lo + group, n_steps)
        if lo >= n_steps:
            lo, hi = n_steps - 1, n_steps
        P[j, lo:hi] = 1.0 / (hi - lo)
    return P


class SfeModel(Module):
    def __init__(self, cfg: SfeConfig, rng: np.random.Generator):
        self.cfg = cfg
        H, C = cfg.hidden, cfg.feature_dim
        self.gru_fwd = GRUCell(rng, cfg.input_dim, H)
        self.gru_bwd = GRUCell(rng, cfg.input_dim, H)
        if cfg.memory == "wo":
            self.content_proj = Perceptron(rng, [2 * H, cfg.address_hidden, C])
            self.identity_proj = Perceptron(rng, [2 * H, cfg.address_hidden, C])
        else:
            self.content_addr = Perceptron(rng, [2 * H, cfg.address_hidden, cfg.content_slots])
            self.content_bank = MemoryBank(rng, cfg.content_slots, C)
            self.identity_addr = Perceptron(rng, [2 * H, cfg.address_hidden, cfg.identity_slots])
            if cfg.memory == "cs":
                self.identity_bank = MemoryBank(rng, cfg.identity_slots, C)
        self.content_target = Perceptron(rng, [cfg.content_target_dim, cfg.target_hidden, C])
        self.identity_target = Perceptron(rng, [cfg.identity_target_dim, cfg.target_hidden, C])
        self.content_sim = SimilarityParams()
        self.identity_sim = SimilarityParams()
        self.buffers = {}

    # -- speech side --

    def bigru_encode_batch(self, xs: list[np.ndarray | Tensor]) -> Tensor:
        """Encode B equal-length sequences; returns a time-major (T*B) x 2H tensor."""
        B = len(xs)
        T = xs[0].shape[0]
        if T < 1 or any(x.shape[0] != T for x in xs):
            raise ContractError("bigru_encode_batch needs B >= 1 sequences of equal length T >= 1")
        rows = [x if isinstance(x, Tensor) else Tensor(x) for x in xs]
        if B == 1:
            X = rows[0]
        else:
            data = np.stack([r.data for r in rows], axis=1).reshape(T * B, -1)
            X = Tensor(data) if not any(r.requires_grad for r in rows) else _interleave(rows)
        H = self.cfg.hidden
        outs = []
        for cell, order in ((self.gru_fwd, range(T)), (self.gru_bwd, range(T - 1, -1, -1))):
            xw = cell.input_projection(X)
            h = Tensor(np.zeros((B, H)))
            states = [None] * T
            for t in order:
                h = cell.step(xw[t * B:(t + 1) * B], h)
                states[t] = h
            outs.append(ad.concat(states, axis=0))
        return ad.concat(outs, axis=1)

    def bigru_encode(self, x) -> Tensor:
        return self.bigru_encode_batch([x])

    def _content_from_states(self, h: Tensor) -> Tensor:
        if self.cfg.memory == "wo":
            return self.content_proj(h)
        return memory_read(self.content_bank, self.content_addr, h)[1]

    def _identity_from_states(self, h: Tensor) -> Tensor:
        if self.cfg.memory == "wo":
            return self.identity_proj(h)
        bank = self.identity_bank if self.cfg.memory == "cs" else self.content_bank
        return memory_read(bank, self.identity_addr, h)[1]

    def speech_features(self, xs: list[np.ndarray], n_frames: int) -> tuple[list[Tensor], Tensor]:
        """Per-sequence content features (n_frames x C each) and identity features (B x C)."""
        B, T = len(xs), xs[0].shape[0]
        h = self.bigru_encode_batch(xs)
        P = pooling_matrix(T, n_frames)
        # time-major rows -> batch-major pooled frames
        pool = np.zeros((B * n_frames, T * B))
        seq = np.zeros((B, T * B))
        for b in range(B):
            pool[b * n_frames:(b + 1) * n_frames, b::B] = P
            seq[b, b::B] = 1.0 / T
        content = self._content_from_states(ad.matmul(Tensor(pool), h))
        identity = self._identity_from_states(ad.matmul(Tensor(seq), h))
        return [content[b * n_frames:(b + 1) * n_frames] for b in range(B)], identity

    # -- visual side --

    def target_features(self, content_in: list[np.ndarray], identity_in: np.ndarray) -> tuple[list[Tensor], Tensor]:
        n = content_in[0].shape[0]
        stacked = Tensor(np.concatenate(content_in, axis=0))
        yc = self.content_target(stacked)
        ys = self.identity_target(Tensor(identity_in))
        return [yc[b * n:(b + 1) * n] for b in range(len(content_in))], ys

    # -- losses --

    def loss(self, xs: list[np.ndarray], content_in: list[np.ndarray], identity_in: np.ndarray) -> tuple[Tensor, Tensor]:
        """Content and identity contrastive losses for one batch of equal-length sequences."""
        if len(xs) < 2:
            raise ContractError("identity loss needs a batch of at least 2 sequences")
        n_frames = content_in[0].shape[0]
        y_hat_c, y_hat_s = self.speech_features(xs, n_frames)
        y_c, y_s = self.target_features(content_in, identity_in)
        lc = ad.mean(ad.concat([ad.reshape(contrastive_loss(a, b, self.content_sim), (1,))
                                for a, b in zip(y_hat_c, y_c)]))
        ls = contrastive_loss(y_hat_s, y_s, self.identity_sim)
        return lc, ls


def sfe_loss(model: SfeModel, xs, content_in, identity_in) -> Tensor:
    lc, ls = model.loss(xs, content_in, identity_in)
    return ad.add(lc, ls)


def _interleave(rows: list[Tensor]) -> Tensor:
    """Time-major stacking of B (T x F) tensors, differentiable."""
    T = rows[0].shape[0]
    return ad.concat([r[t:t + 1] for t in range(T) for r in rows], axis=0)


# -- visual target features from aligned landmarks --------------------------

def content_target_input(p_align: np.ndarray) -> np.ndarray:
    """Per-frame mouth shape, centred on the mouth centroid (T x 40)."""
    mouth = p_align[:, MOUTH_IDX, :]
    mouth = mouth - mouth.mean(axis=1, keepdims=True)
    return mouth.reshape(mouth.shape[0], -1)


def identity_target_input(p_align: np.ndarray, poses: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Sequence statistics: mean aligned contour offset (mouth excluded) and pose mean/std (102)."""
    keep = [i for i in range(p_align.shape[1]) if i not in face.MOUTH]
    shape = (p_align.mean(axis=0) - template)[keep].reshape(-1)
    return np.concatenate([shape, poses.mean(axis=0), poses.std(axis=0)])
