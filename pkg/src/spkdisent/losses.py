"""Training criteria: speaker, adversarial, MI (DV bound), reconstruction, identity change."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import ModelBundle

LOSS_NAMES = ("ls", "lr", "ladv", "lmi", "lic")


@dataclass(frozen=True)
class LossWeights:
    speaker: float = 1.0
    disentangle: float = 0.1
    reconstruction: float = 0.1
    identity_change: float = 0.1

    def __post_init__(self):
        for name in ("speaker", "disentangle", "reconstruction", "identity_change"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def _labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return labels


def speaker_loss(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross-entropy ``-log softmax(logits)[t]``."""
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    labels = _labels(np.atleast_1d(labels), logits.shape[-1])
    return ad.mul(ad.mean(ad.pick(ad.log_softmax(logits), labels)), -1.0)


def adversarial_loss(logits_res: Tensor) -> Tensor:
    """Cross-entropy of the residual logits against the uniform distribution.

    Minimum ``ln C`` exactly when the softmax is uniform. Callers pass logits
    from ``model.classify(f_res, frozen=True)`` so only the residual encoder
    receives gradient.
    """
    if logits_res.ndim == 1:
        logits_res = ad.reshape(logits_res, (1, logits_res.shape[0]))
    return ad.mul(ad.mean(ad.log_softmax(logits_res)), -1.0)


def reconstruction_loss(recon: Tensor, target: Tensor) -> Tensor:
    if recon.shape != target.shape:
        raise ValueError(f"reconstruction shape {recon.shape} vs target {target.shape}")
    return ad.mse(recon, target)


def dv_bound(t_joint: Tensor, t_marginal: Tensor) -> Tensor:
    """Donsker-Varadhan lower bound ``E[T_joint] - log E[exp T_marginal]``."""
    return ad.sub(ad.mean(t_joint), ad.logmeanexp(t_marginal))


def mi_objective(model: ModelBundle, spk_a: Tensor, spk_a2: Tensor,
                 res_a: Tensor, res_a2: Tensor) -> Tensor:
    """Two-sided DV value over a segment-pair batch.

    Same-utterance speaker pairs are the "joint" samples, speaker/residual
    pairs of one segment the "marginal" ones, in both directions A->A' and
    A'->A.
    """
    if spk_a.shape[0] < 2:
        raise ValueError("mutual-information objective needs a batch of at least 2")
    forward = dv_bound(model.critic(spk_a, spk_a2), model.critic(spk_a, res_a))
    reverse = dv_bound(model.critic(spk_a2, spk_a), model.critic(spk_a2, res_a2))
    return ad.add(forward, reverse)


def identity_change_loss(model: ModelBundle, spk_a: Tensor, spk_b: Tensor,
                         res_a: Tensor, res_b: Tensor, target_a: Tensor, target_b: Tensor,
                         speakers_a=None, speakers_b=None) -> Tensor:
    """Reconstruct A and B from the mean of their speaker embeddings.

    When speaker ids are supplied they must agree item-wise.
    """
    if speakers_a is not None and speakers_b is not None:
        if list(speakers_a) != list(speakers_b):
            raise ValueError("identity-change pairs must come from the same speaker")
    mid = ad.mul(ad.add(spk_a, spk_b), 0.5)
    rec_a = model.decode(mid, res_a)
    rec_b = model.decode(mid, res_b)
    return ad.add(reconstruction_loss(rec_a, target_a), reconstruction_loss(rec_b, target_b))


def am_softmax_loss(embedding: Tensor, weight: Tensor, labels, margin: float = 0.2,
                    scale: float = 30.0) -> Tensor:
    """Additive-margin softmax over cosine logits.

    ``weight`` is the ``(d, C)`` head; class ``j`` is its column ``j``.
    """
    if embedding.ndim == 1:
        embedding = ad.reshape(embedding, (1, embedding.shape[0]))
    labels = _labels(np.atleast_1d(labels), weight.shape[1])
    e = ad.l2_normalize(embedding)
    w = ad.l2_normalize(ad.transpose(weight, (1, 0)))
    cos = ad.matmul(e, ad.transpose(w, (1, 0)))
    onehot = np.zeros(cos.shape)
    onehot[np.arange(labels.size), labels] = margin
    logits = ad.mul(ad.sub(cos, Tensor(onehot)), scale)
    return speaker_loss(logits, labels)


def total_loss(components: Mapping[str, Tensor | float], weights: LossWeights = LossWeights()):
    """Weighted sum of the enabled components; absent ones contribute 0.

    ``components`` keys: ``ls``, ``lmi`` (the already-signed MI contribution),
    ``ladv``, ``lr``, ``lic``. Both disentanglement terms share one weight.
    """
    unknown = set(components) - set(LOSS_NAMES)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    scale = {"ls": weights.speaker, "lmi": weights.disentangle, "ladv": weights.disentangle,
             "lr": weights.reconstruction, "lic": weights.identity_change}
    total = 0.0
    for name in LOSS_NAMES:
        if name in components:
            total = total + scale[name] * components[name]
    return total
