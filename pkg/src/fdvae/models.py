"""Encoder, decoder, total-correlation discriminator and attribute heads.

The convolutional encoder/decoder follow the 64x64 VAE layout
(32-32-64-64-256-120 channels down, 256-64-64-32-32-3 back up).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .errors import BatchTooSmall, ShapeMismatch

LATENT_DIM = 60
SUBSPACE_DIM = 20
LOG_VAR_CLAMP = 10.0


@dataclass
class GaussianPosterior:
    mu: torch.Tensor  # [B, 60]
    log_var: torch.Tensor  # [B, 60]


@dataclass
class LatentPartition:
    """Latent code split as (z_t, z_p, z_m); concatenation order is fixed."""

    z_t: torch.Tensor
    z_p: torch.Tensor
    z_m: torch.Tensor

    @classmethod
    def split(cls, z: torch.Tensor, blocks: Sequence[int] = (SUBSPACE_DIM,) * 3) -> "LatentPartition":
        """Split a flat code; ``blocks`` lists the (t, p, m) sizes, m may be 0."""
        if len(blocks) == 2:
            blocks = (*blocks, 0)
        if z.dim() != 2 or z.shape[1] != sum(blocks):
            raise ShapeMismatch(f"expected [B, {sum(blocks)}] latent, got {list(z.shape)}")
        z_t, z_p, z_m = torch.split(z, list(blocks), dim=1)
        return cls(z_t, z_p, z_m)

    def concat(self) -> torch.Tensor:
        return torch.cat([self.z_t, self.z_p, self.z_m], dim=1)

    @property
    def blocks(self) -> tuple:
        return (self.z_t.shape[1], self.z_p.shape[1], self.z_m.shape[1])

    def __len__(self):
        return self.z_t.shape[0]


def _zero_bias_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            m.reset_parameters()  # fan-in scaled uniform weights
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Encoder(nn.Module):
    LAYERS = (  # name, out channels, kernel, stride, padding
        ("conv1", 32, 4, 2, 1),
        ("conv2", 32, 4, 2, 1),
        ("conv3", 64, 4, 2, 1),
        ("conv4", 64, 4, 2, 1),
        ("conv5", 256, 4, 1, 0),
        ("conv6", 2 * LATENT_DIM, 1, 1, 0),
    )

    def __init__(self):
        super().__init__()
        layers, c_in = [], 3
        for i, (name, c_out, k, s, p) in enumerate(self.LAYERS):
            layers.append(nn.Conv2d(c_in, c_out, k, s, p))
            if i < len(self.LAYERS) - 1:
                layers.append(nn.ReLU())
            c_in = c_out
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        h = self.net(x).flatten(1)
        mu, log_var = h[:, :LATENT_DIM], h[:, LATENT_DIM:]
        return mu, log_var.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)


class Decoder(nn.Module):
    LAYERS = (  # name, kind, out channels, kernel, stride, padding
        ("conv7", "conv", 256, 1, 1, 0),
        ("convT1", "deconv", 64, 4, 1, 0),
        ("convT2", "deconv", 64, 4, 2, 1),
        ("convT3", "deconv", 32, 4, 2, 1),
        ("convT4", "deconv", 32, 4, 2, 1),
        ("convT5", "deconv", 3, 4, 2, 1),
    )

    def __init__(self):
        super().__init__()
        layers, c_in = [], LATENT_DIM
        for i, (_, kind, c_out, k, s, p) in enumerate(self.LAYERS):
            cls = nn.Conv2d if kind == "conv" else nn.ConvTranspose2d
            layers.append(cls(c_in, c_out, k, s, p))
            if i < len(self.LAYERS) - 1:
                layers.append(nn.ReLU())
            c_in = c_out
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z[:, :, None, None])


class Discriminator(nn.Module):
    """MLP on the concatenated code; logit 0 is "real" (joint), 1 is "fake"."""

    def __init__(self, in_dim: int = LATENT_DIM, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 2),
        )

    def forward(self, z):
        return self.net(z)


class ClassifierHead(nn.Module):
    """Single affine layer to one logit."""

    def __init__(self, in_dim: int = SUBSPACE_DIM):
        super().__init__()
        self.in_dim = in_dim
        self.linear = nn.Linear(in_dim, 1)

    def forward(self, z):
        return self.linear(z).squeeze(-1)


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


def reverse_gradient(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity on the forward pass, multiplies the gradient by ``-scale``."""
    return _ReverseGrad.apply(x, scale)


def _seeded(seed: int, factory):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = factory()
        _zero_bias_init(module)
    return module


# Component seeds are offsets from the run seed, so the parameters a variant
# shares with another variant are initialized identically.
_INIT_OFFSETS = {"encoder": 11, "decoder": 12, "discriminator": 13,
                 "t": 21, "p": 22, "t_adv": 23, "p_adv": 24,
                 "d": 31, "d_adv": 32, "f": 33}


class ModelBundle(nn.Module):
    """All trainable components of one run.

    ``blocks`` gives the (t, p, m) subspace sizes; ``heads`` names the
    representation-phase heads to build (subset of t, p, t_adv, p_adv).
    """

    def __init__(self, seed: int = 0, blocks=(SUBSPACE_DIM,) * 3, discriminator: bool = False,
                 heads: Sequence[str] = (), disc_hidden: int = 256):
        super().__init__()
        self.blocks = tuple(int(b) for b in blocks)
        if sum(self.blocks) != LATENT_DIM:
            raise ShapeMismatch(f"subspace sizes {self.blocks} must sum to {LATENT_DIM}")
        self.seed = seed
        self.encoder = _seeded(seed + _INIT_OFFSETS["encoder"], Encoder)
        self.decoder = _seeded(seed + _INIT_OFFSETS["decoder"], Decoder)
        self.discriminator = (
            _seeded(seed + _INIT_OFFSETS["discriminator"], lambda: Discriminator(LATENT_DIM, disc_hidden))
            if discriminator else None
        )
        dims = {"t": self.blocks[0], "p": self.blocks[1], "t_adv": self.blocks[1], "p_adv": self.blocks[0]}
        self.heads = nn.ModuleDict({
            name: _seeded(seed + _INIT_OFFSETS[name], lambda n=name: ClassifierHead(dims[n]))
            for name in heads
        })
        self.downstream = nn.ModuleDict()

    def build_downstream(self, task_dim: int, transform_dim: Optional[int] = None,
                         seed: Optional[int] = None) -> None:
        """(Re)create the downstream task head ``d`` and, when ``transform_dim``
        is given, the transform ``f`` and its adversary ``d_adv``."""
        seed = self.seed if seed is None else seed
        mods = {"d": _seeded(seed + _INIT_OFFSETS["d"], lambda: ClassifierHead(task_dim))}
        if transform_dim is not None:
            mods["f"] = _seeded(seed + _INIT_OFFSETS["f"], lambda: nn.Linear(transform_dim, transform_dim))
            mods["d_adv"] = _seeded(seed + _INIT_OFFSETS["d_adv"], lambda: ClassifierHead(transform_dim))
        self.downstream = nn.ModuleDict(mods)

    def representation_parameters(self):
        """Parameters updated by the encoder/decoder step (includes heads t, p)."""
        params = list(self.encoder.parameters()) + list(self.decoder.parameters())
        for name in ("t", "p"):
            if name in self.heads:
                params += list(self.heads[name].parameters())
        return params

    def adversary_parameters(self):
        params = []
        for name in ("t_adv", "p_adv"):
            if name in self.heads:
                params += list(self.heads[name].parameters())
        return params


# ---------------------------------------------------------------------------
# functional surface


def encode(bundle: ModelBundle, images: torch.Tensor) -> GaussianPosterior:
    if images.dim() != 4 or tuple(images.shape[1:]) != (3, 64, 64):
        raise ShapeMismatch(f"expected [B, 3, 64, 64] images, got {list(images.shape)}")
    mu, log_var = bundle.encoder(images)
    return GaussianPosterior(mu, log_var)


def reparameterize(post: GaussianPosterior, noise: torch.Tensor,
                   blocks=(SUBSPACE_DIM,) * 3) -> LatentPartition:
    if noise.shape != post.mu.shape:
        raise ShapeMismatch(f"noise {list(noise.shape)} does not match posterior {list(post.mu.shape)}")
    z = post.mu + torch.exp(0.5 * post.log_var) * noise
    return LatentPartition.split(z, blocks)


def decode(bundle: ModelBundle, z: torch.Tensor) -> torch.Tensor:
    if z.dim() != 2 or z.shape[1] != LATENT_DIM:
        raise ShapeMismatch(f"expected [B, {LATENT_DIM}] latent, got {list(z.shape)}")
    return bundle.decoder(z)


def discriminate(bundle: ModelBundle, part) -> torch.Tensor:
    z = part.concat() if isinstance(part, LatentPartition) else part
    if z.dim() != 2 or z.shape[1] != LATENT_DIM:
        raise ShapeMismatch(f"expected [B, {LATENT_DIM}] latent, got {list(z.shape)}")
    if bundle.discriminator is None:
        raise ShapeMismatch("bundle has no discriminator")
    return bundle.discriminator(z)


def shuffle_subspaces(part: LatentPartition, seed=None, generator: Optional[torch.Generator] = None
                      ) -> LatentPartition:
    """Permute each subspace along the batch axis independently.

    The result is a sample from the product of the subspace marginals.
    """
    b = len(part)
    if b < 2:
        raise BatchTooSmall(f"subspace shuffling needs at least 2 samples, got {b}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    out = []
    for block in (part.z_t, part.z_p, part.z_m):
        perm = torch.randperm(b, generator=generator)
        out.append(block[perm])
    return LatentPartition(*out)


def classify_head(head: ClassifierHead, subspace: torch.Tensor) -> torch.Tensor:
    if subspace.dim() != 2 or subspace.shape[1] != head.in_dim:
        raise ShapeMismatch(f"head expects [B, {head.in_dim}], got {list(subspace.shape)}")
    return head(subspace)


def transform_mal(bundle: ModelBundle, z_m: torch.Tensor) -> torch.Tensor:
    f = bundle.downstream["f"]
    if z_m.dim() != 2 or z_m.shape[1] != f.in_features:
        raise ShapeMismatch(f"transform expects [B, {f.in_features}], got {list(z_m.shape)}")
    return f(z_m)
