"""Loss terms, all written as quantities to minimize.

Binary cross-entropies are batch means computed from logits. The adversarial
terms return the adversary's own objective plus the objective the encoder (or
transform) minimizes, which is its negation.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import math

import torch
import torch.nn.functional as F

from .errors import LabelOutOfRange, NonFiniteComponent, ShapeMismatch

REAL, FAKE = 0, 1


@dataclass
class LossWeights:
    alpha: float = 50.0  # total correlation
    beta: float = 5.0  # attribute supervision
    gamma: float = 10.0  # adversarial decorrelation
    kl_beta: float = 1.0  # KL multiplier (beta-VAE)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                from .errors import InvalidSpec
                raise InvalidSpec(f"loss weight {f.name} must be finite and >= 0, got {v!r}")


@dataclass
class LossReport:
    """Scalar loss components of one step; absent components are ``None``."""

    recon: float
    kl: float
    total: float
    tc: Optional[float] = None
    disc: Optional[float] = None
    cls_t: Optional[float] = None
    cls_p: Optional[float] = None
    adv_t: Optional[float] = None
    adv_p: Optional[float] = None

    FIELDS = ("recon", "kl", "tc", "disc", "cls_t", "cls_p", "adv_t", "adv_p", "total")

    def as_record(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS if getattr(self, k) is not None}


def _check_binary(y: torch.Tensor, name: str) -> None:
    if not torch.all((y == 0) | (y == 1)):
        raise LabelOutOfRange(f"{name} labels must be 0/1")


def bce(logit: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logit, y.to(logit.dtype))


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Unit-variance Gaussian negative log-likelihood without constants."""
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"reconstruction shape {list(x_hat.shape)} != input {list(x.shape)}")
    return 0.5 * (x_hat - x).pow(2).flatten(1).sum(1).mean()


def kl_divergence(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over dims, batch mean."""
    return 0.5 * (log_var.exp() + mu.pow(2) - 1.0 - log_var).sum(1).mean()


def tc_loss(logits_real: torch.Tensor) -> torch.Tensor:
    """Density-ratio estimate of total correlation: mean logit(real) - logit(fake)."""
    return (logits_real[:, REAL] - logits_real[:, FAKE]).mean()


def discriminator_loss(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> torch.Tensor:
    """Two-class cross-entropy, averaged over the real and shuffled samples."""
    real_t = torch.full((logits_real.shape[0],), REAL, dtype=torch.long)
    fake_t = torch.full((logits_fake.shape[0],), FAKE, dtype=torch.long)
    return 0.5 * (F.cross_entropy(logits_real, real_t) + F.cross_entropy(logits_fake, fake_t))


def decorrelation_cls_loss(logit_t=None, y_t=None, logit_p=None, y_p=None):
    """Supervision of z_t by the target and z_p by the protected label.

    Returns ``(total, cls_t, cls_p)``; a term whose logit is ``None`` is
    skipped and reported as ``None``.
    """
    terms = []
    for logit, y, name in ((logit_t, y_t, "target"), (logit_p, y_p, "protected")):
        if logit is None:
            terms.append(None)
            continue
        _check_binary(y, name)
        terms.append(bce(logit, y))
    present = [t for t in terms if t is not None]
    total = sum(present[1:], present[0]) if present else torch.zeros(())
    return total, terms[0], terms[1]


def decorrelation_adv_loss(logit_p_on_zt, y_p, logit_t_on_zp, y_t):
    """Cross-predictions: protected label from z_t and target label from z_p.

    Returns ``(adversary_objective, encoder_objective, adv_p, adv_t)`` where
    the adversary heads minimize the summed BCE and the encoder minimizes its
    negation (i.e. maximizes the adversaries' error).
    """
    _check_binary(y_p, "protected")
    _check_binary(y_t, "target")
    adv_p = bce(logit_p_on_zt, y_p)
    adv_t = bce(logit_t_on_zp, y_t)
    adversary = adv_p + adv_t
    return adversary, -adversary, adv_p, adv_t


def weighted_total(components: dict, weights: LossWeights):
    """recon + kl_beta*kl + alpha*tc + beta*cls + gamma*adv over present terms.

    ``adv`` is the encoder-side adversarial objective. Works on floats or tensors.
    """
    coef = {"recon": 1.0, "kl": weights.kl_beta, "tc": weights.alpha,
            "cls": weights.beta, "adv": weights.gamma}
    unknown = set(components) - set(coef)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    total = 0.0
    for name in ("recon", "kl", "tc", "cls", "adv"):
        value = components.get(name)
        if value is not None:
            total = total + coef[name] * value
    return total


def total_representation_loss(components: dict, weights: LossWeights) -> LossReport:
    """Weighted encoder/decoder objective as a :class:`LossReport`.

    ``components`` maps recon, kl and optionally tc, cls, adv to scalars; the
    detail keys disc, cls_t, cls_p, adv_t, adv_p are copied to the report
    as-is. The discriminator loss never enters ``total``.
    """
    vals = {}
    for k, v in components.items():
        if v is None:
            continue
        v = float(v)
        if not math.isfinite(v):
            raise NonFiniteComponent(f"loss component {k} is {v}")
        vals[k] = v
    main = {k: vals[k] for k in ("recon", "kl", "tc", "cls", "adv") if k in vals}
    total = weighted_total(main, weights)
    return LossReport(
        recon=vals.get("recon", 0.0), kl=vals.get("kl", 0.0), total=float(total),
        tc=vals.get("tc"), disc=vals.get("disc"),
        cls_t=vals.get("cls_t"), cls_p=vals.get("cls_p"),
        adv_t=vals.get("adv_t"), adv_p=vals.get("adv_p"),
    )


def downstream_loss(logit_d, y_t, logit_d_adv=None, y_p=None):
    """Task BCE of ``d`` and adversary BCE of ``d_adv`` on the transformed MAL.

    Returns ``(task, adversary, transform)``; the transform minimizes
    ``task - adversary``. Without an adversary the last two are ``None``.
    """
    _check_binary(y_t, "target")
    task = bce(logit_d, y_t)
    if logit_d_adv is None:
        return task, None, None
    _check_binary(y_p, "protected")
    adversary = bce(logit_d_adv, y_p)
    return task, adversary, task - adversary
