"""Which loss terms each model variant trains, and which latent features feed
the downstream task head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .errors import InconsistentConfig
from .models import LatentPartition, ModelBundle, transform_mal


@dataclass(frozen=True)
class ActiveTerms:
    terms: frozenset  # subset of recon, kl, tc, disc, cls_t, cls_p, adv_t, adv_p
    kl_weight: float
    heads: tuple  # representation-phase heads to build

    @property
    def discriminator(self) -> bool:
        return "disc" in self.terms

    @property
    def cls(self) -> bool:
        return bool({"cls_t", "cls_p"} & self.terms)

    @property
    def adv(self) -> bool:
        return bool({"adv_t", "adv_p"} & self.terms)

    def __contains__(self, name):
        return name in self.terms


def variant_loss_mask(config) -> ActiveTerms:
    """Active loss terms for ``config.variant`` and its ablation flags.

    ``ffvae_approx`` is an approximation of sensitive/non-sensitive
    disentanglement: a 30-dim sensitive block (z_p) supervised on the
    protected label, plus the total-correlation penalty over the two blocks.
    """
    v, ab, w = config.variant, config.ablation, config.weights
    if v == "vae":
        return ActiveTerms(frozenset({"recon", "kl"}), 1.0, ())
    if v == "beta_vae":
        return ActiveTerms(frozenset({"recon", "kl"}), float(w.kl_beta), ())
    if v == "factor_vae":
        return ActiveTerms(frozenset({"recon", "kl", "tc", "disc"}), 1.0, ())
    if v == "ffvae_approx":
        terms = {"recon", "kl", "tc", "disc"} | ({"cls_p"} if ab.use_cls else set())
        return ActiveTerms(frozenset(terms), 1.0, ("p",) if ab.use_cls else ())
    if v == "fdvae":
        terms, heads = {"recon", "kl", "tc", "disc"}, ()
        if ab.use_cls:
            terms |= {"cls_t", "cls_p"}
            heads += ("t", "p")
        if ab.use_adv:
            terms |= {"adv_t", "adv_p"}
            heads += ("t_adv", "p_adv")
        return ActiveTerms(frozenset(terms), float(w.kl_beta), heads)
    raise InconsistentConfig(f"unknown variant {v!r}")


def transform_dim(config) -> Optional[int]:
    """Width of the MAL transform ``f`` when the downstream input uses it."""
    return config.blocks[2] if config.downstream_input == "zt_plus_transformed_zm" else None


def task_input_dim(config) -> int:
    di, (bt, bp, bm) = config.downstream_input, config.blocks
    if di in ("zt_only", "zt_plus_raw_zm", "zt_plus_transformed_zm", "nonsensitive_only"):
        return bt
    if di == "sensitive_only":
        return bp
    return bt + bp + bm


def downstream_input_vector(config, part, bundle: Optional[ModelBundle] = None,
                            removal_dims: Sequence[int] = ()) -> torch.Tensor:
    """Feature vector for the downstream task head.

    ``part`` is a :class:`LatentPartition` or a flat ``[B, 60]`` code. The
    transform ``f`` is taken from ``bundle.downstream`` when needed.
    """
    if not isinstance(part, LatentPartition):
        part = LatentPartition.split(part, config.blocks)
    di = config.downstream_input
    if di == "zt_only":
        return part.z_t
    if di == "zt_plus_raw_zm":
        return part.z_t + part.z_m
    if di == "zt_plus_transformed_zm":
        if bundle is None or "f" not in bundle.downstream:
            raise InconsistentConfig("zt_plus_transformed_zm needs a bundle with a transform f")
        return part.z_t + transform_mal(bundle, part.z_m)
    if di == "nonsensitive_only":
        return part.z_t
    if di == "sensitive_only":
        return part.z_p
    if di == "full":
        return part.concat()
    if di in ("latent_removal_k1", "latent_removal_k2"):
        k = int(di[-1])
        if len(removal_dims) != k:
            raise InconsistentConfig(f"{di} needs {k} removal dims, got {list(removal_dims)}")
        z = part.concat().clone()
        z[:, list(removal_dims)] = 0.0
        return z
    raise InconsistentConfig(f"unknown downstream input {di!r}")
