"""Mixture density network landmark regressor.

Per video frame the network emits M diagonal Gaussians over the target
vector.  In ``f_tt`` mode the target is ``[p_align (2L), theta, tx, ty]``
and the final landmarks come from the inverse rigid transform; in ``f_a``
mode the target is the 2L landmark coordinates directly.

The network works in standardised target units; ``buffers`` carry the
input/target statistics and the alignment template so a model can predict
on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import ContractError, Tensor
from .layers import Linear, Module, Perceptron

SIGMA_FLOOR = 1e-3
REGRESSION_MODES = ("f_tt", "f_a")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MdnConfig:
    speech_dim: int
    ref_dim: int
    n_components: int = 3
    n_points: int = 68
    hidden: int = 128
    regression: str = "f_tt"
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        if self.regression not in REGRESSION_MODES:
            raise ValueError(f"regression must be one of {REGRESSION_MODES}")
        if not 1 <= self.n_components <= 8:
            raise ValueError("n_components must be in 1..8")

    @property
    def out_dim(self) -> int:
        return 2 * self.n_points + (3 if self.regression == "f_tt" else 0)


@dataclass
class MixtureParams:
    """Batched mixture parameters; ``mu``/``sigma`` are N x (M*D), component-major."""

    logits: Tensor
    log_alpha: Tensor
    mu: Tensor
    sigma: Tensor
    n_components: int
    dim: int

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha.data)

    def mu_array(self) -> np.ndarray:
        return self.mu.data.reshape(-1, self.n_components, self.dim)

    def sigma_array(self) -> np.ndarray:
        return self.sigma.data.reshape(-1, self.n_components, self.dim)


def mixture_from_raw(logits, mu, raw_sigma, n_components: int, dim: int,
                     sigma_floor: float = SIGMA_FLOOR) -> MixtureParams:
    logits, mu, raw_sigma = (x if isinstance(x, Tensor) else Tensor(x) for x in (logits, mu, raw_sigma))
    sigma = ad.add(ad.softplus(raw_sigma), sigma_floor)
    return MixtureParams(logits, ad.log_softmax(logits, axis=1), mu, sigma, n_components, dim)


def mixture_from_values(alpha, mu, sigma) -> MixtureParams:
    """Build fixed parameters from explicit (N x M, N x M x D, N x M x D) arrays."""
    alpha, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (alpha, mu, sigma))
    n, m, d = mu.shape
    log_alpha = np.log(alpha / alpha.sum(axis=1, keepdims=True))
    return MixtureParams(Tensor(log_alpha), Tensor(log_alpha), Tensor(mu.reshape(n, m * d)),
                         Tensor(sigma.reshape(n, m * d)), m, d)


class MdnModel(Module):
    def __init__(self, cfg: MdnConfig, rng: np.random.Generator):
        self.cfg = cfg
        M, D = cfg.n_components, cfg.out_dim
        self.trunk = Perceptron(rng, [cfg.speech_dim + cfg.ref_dim, cfg.hidden, cfg.hidden])
        self.alpha_head = Linear(rng, cfg.hidden, M, zero=True)
        self.mu_head = Linear(rng, cfg.hidden, M * D)
        self.sigma_head = Linear(rng, cfg.hidden, M * D, zero=True)
        self.buffers = {}

    def forward(self, speech_feat, ref_feat) -> MixtureParams:
        speech_feat, ref_feat = np.atleast_2d(speech_feat), np.atleast_2d(ref_feat)
        if speech_feat.shape[1] != self.cfg.speech_dim or ref_feat.shape[1] != self.cfg.ref_dim:
            raise ContractError(
                f"MDN expects speech dim {self.cfg.speech_dim} and reference dim {self.cfg.ref_dim}, "
                f"got {speech_feat.shape[1]} and {ref_feat.shape[1]}")
        x = Tensor(np.concatenate([speech_feat, ref_feat], axis=1))
        hid = ad.tanh(self.trunk(x))
        return mixture_from_raw(self.alpha_head(hid), self.mu_head(hid), self.sigma_head(hid),
                                self.cfg.n_components, self.cfg.out_dim, self.cfg.sigma_floor)


def mdn_forward(model: MdnModel, speech_feat, ref_feat) -> MixtureParams:
    return model.forward(speech_feat, ref_feat)


def component_log_densities(params: MixtureParams, target) -> Tensor:
    """N x M tensor of ``log alpha_m + log N(target; mu_m, diag sigma_m^2)``."""
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    M, D = params.n_components, params.dim
    n = target.shape[0]
    if target.shape[1] != D:
        raise ContractError(f"target dim {target.shape[1]} != {D}")
    z = ad.div(ad.sub(params.mu, np.tile(target, (1, M))), params.sigma)
    per_dim = ad.add(ad.mul(ad.square(z), -0.5), ad.neg(ad.log(params.sigma)))
    per_comp = ad.reshape(ad.sum_(ad.reshape(per_dim, (n * M, D)), axis=1), (n, M))
    return ad.add(ad.add(per_comp, -0.5 * D * LOG_2PI), params.log_alpha)


def mdn_nll(params: MixtureParams, target) -> Tensor:
    """Mean over rows of ``-log sum_m alpha_m N(target; mu_m, sigma_m^2)``."""
    return ad.neg(ad.mean(ad.logsumexp(component_log_densities(params, target), axis=1)))


def best_components(params: MixtureParams) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(params.log_alpha.data, axis=1)


def mixture_means(params: MixtureParams) -> np.ndarray:
    return np.einsum("nm,nmd->nd", params.alpha, params.mu_array())


def max_component_means(params: MixtureParams) -> np.ndarray:
    idx = best_components(params)
    return params.mu_array()[np.arange(idx.size), idx]


def split_output(vec: np.ndarray, regression: str = "f_tt"):
    """Split one target vector into ``(p_align L x 2, Pose)`` or ``(landmarks, None)``."""
    vec = np.asarray(vec, dtype=np.float64)
    if regression == "f_a":
        return vec.reshape(-1, 2), None
    pts = vec[:-3].reshape(-1, 2)
    return pts, geometry.Pose(vec[-3], vec[-2:])


def mdn_infer_max(params: MixtureParams, row: int = 0):
    return split_output(max_component_means(params)[row])


def mdn_infer_mixture(params: MixtureParams, row: int = 0):
    return split_output(mixture_means(params)[row])


def target_vector(frame: np.ndarray, template: np.ndarray, regression: str) -> np.ndarray:
    """Regression target for one landmark frame."""
    if regression == "f_a":
        return np.asarray(frame, dtype=np.float64).reshape(-1)
    dec = geometry.align(frame, template)
    return np.concatenate([dec.p_align.reshape(-1), dec.pose.as_vector()])


def vector_to_frame(vec: np.ndarray, regression: str) -> np.ndarray:
    pts, pose = split_output(vec, regression)
    return pts if pose is None else geometry.reconstruct(pts, pose)


def reference_feature(ref_frame: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Aligned reference shape relative to the template plus its pose (2L + 3)."""
    dec = geometry.align(ref_frame, template)
    return np.concatenate([(dec.p_align - template).reshape(-1), dec.pose.as_vector()])


def predict_frames(model: MdnModel, speech_feat: np.ndarray, ref_frame: np.ndarray,
                   use_mixture: bool = False) -> np.ndarray:
    """Landmarks (N x L x 2) for N rows of raw speech features sharing one reference frame.

    Applies the model's stored input/target standardisation.
    """
    b = model.buffers
    template = b["template"]
    speech = (np.atleast_2d(speech_feat) - b["speech_mean"]) / b["speech_std"]
    ref = (reference_feature(ref_frame, template) - b["ref_mean"]) / b["ref_std"]
    ref = np.repeat(ref[None, :], speech.shape[0], axis=0)
    with ad.no_grad():
        params = model.forward(speech, ref)
    std_out = mixture_means(params) if use_mixture else max_component_means(params)
    out = std_out * b["target_std"] + b["target_mean"]
    return np.stack([vector_to_frame(v, model.cfg.regression) for v in out])


def predict_frame(model: MdnModel, speech_feat: np.ndarray, ref_frame: np.ndarray) -> np.ndarray:
    return predict_frames(model, np.atleast_2d(speech_feat), ref_frame)[0]
