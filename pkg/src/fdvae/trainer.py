"""Two-phase optimization: representation learning, then a downstream
classifier on the frozen encoder."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses as L
from .config import ExperimentConfig
from .datasets import ImageDataset, batch_stream, epoch_permutation, sequential_batches
from .errors import DataExhausted, DegenerateColumn, IncompatibleCheckpoint, NonFiniteLoss
from .metrics import evaluate_predictions
from .models import (
    LATENT_DIM,
    LatentPartition,
    ModelBundle,
    decode,
    discriminate,
    encode,
    reparameterize,
    reverse_gradient,
    shuffle_subspaces,
)
from .variants import downstream_input_vector, task_input_dim, transform_dim, variant_loss_mask

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1

# offsets deriving independent random streams from the run seed
_NOISE_STREAM = 1_000_003
_SHUFFLE_STREAM = 2_000_003
_DOWNSTREAM_STREAM = 3_000_017


# ---------------------------------------------------------------------------
# logs and checkpoints


class TrainingLog:
    """Append-only list of step records, mirrored to a JSON-lines file."""

    def __init__(self, path=None, records=()):
        self.records = list(records)
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("".join(json.dumps(r) + "\n" for r in self.records))

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def digest(self) -> str:
        blob = json.dumps(self.records, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def series(self, key: str, phase: Optional[str] = None) -> list:
        return [r[key] for r in self.records if key in r and (phase is None or r.get("phase") == phase)]

    @staticmethod
    def read(path) -> list:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


@dataclass
class Checkpoint:
    state: dict  # parameter arrays keyed by component
    config: dict
    epoch: int
    log_digest: str = ""
    phase: str = "repr"
    extra: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT

    @property
    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.config)

    @property
    def config_hash(self) -> str:
        return self.experiment_config.config_hash()

    @classmethod
    def from_bundle(cls, bundle: ModelBundle, config: ExperimentConfig, epoch: int,
                    log_digest: str = "", phase: str = "repr", extra=None) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in bundle.state_dict().items()}
        return cls(state, config.to_dict(), epoch, log_digest, phase, dict(extra or {}))

    def bundle(self) -> ModelBundle:
        cfg = self.experiment_config.with_seed(self.config["schedule"]["seed"])
        bundle = build_bundle(cfg)
        ds_keys = [k for k in self.state if k.startswith("downstream.")]
        if ds_keys:
            tdim = self.state["downstream.d.linear.weight"].shape[1]
            fdim = self.state["downstream.f.weight"].shape[1] if "downstream.f.weight" in self.state else None
            bundle.build_downstream(tdim, fdim)
        try:
            bundle.load_state_dict(self.state)
        except RuntimeError as exc:
            raise IncompatibleCheckpoint(str(exc)) from exc
        return bundle

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"format_version": self.format_version, "state": self.state, "config": self.config,
                   "epoch": self.epoch, "log_digest": self.log_digest, "phase": self.phase,
                   "extra": self.extra}
        buf = io.BytesIO()
        torch.save(payload, buf)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise IncompatibleCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
        if payload.get("format_version") != CHECKPOINT_FORMAT:
            raise IncompatibleCheckpoint(f"{path}: unsupported format {payload.get('format_version')}")
        ck = cls(payload["state"], payload["config"], payload["epoch"], payload["log_digest"],
                 payload["phase"], payload.get("extra", {}))
        ck._check_latent_dim()
        return ck

    def _check_latent_dim(self) -> None:
        w = [v for k, v in self.state.items() if k.startswith("encoder.") and k.endswith("weight")]
        if not w or w[-1].shape[0] != 2 * LATENT_DIM:
            raise IncompatibleCheckpoint(f"encoder head does not produce a {LATENT_DIM}-dim posterior")


def representation_fields(config: ExperimentConfig) -> dict:
    """Config fields that influence representation learning."""
    d = config.to_dict()
    d.pop("seeds")
    d.pop("name")
    d["ablation"].pop("downstream_input")
    for k in ("downstream_epochs", "downstream_lr", "repr_epochs"):
        d["schedule"].pop(k)
    return d


def build_bundle(config: ExperimentConfig) -> ModelBundle:
    mask = variant_loss_mask(config)
    return ModelBundle(seed=config.schedule.seed, blocks=config.blocks,
                       discriminator=mask.discriminator, heads=mask.heads)


def _adam(params, lr, betas):
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas))


def _set_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# representation learning


class RepresentationStep:
    """Encoder/decoder step, then discriminator and adversary-head steps."""

    def __init__(self, bundle: ModelBundle, config: ExperimentConfig):
        self.bundle, self.config = bundle, config
        self.mask = variant_loss_mask(config)
        s = config.schedule
        self.weights = L.LossWeights(config.weights.alpha, config.weights.beta,
                                     config.weights.gamma, self.mask.kl_weight)
        self.opt = _adam(bundle.representation_parameters(), s.repr_lr, s.betas)
        self.opt_disc = (_adam(bundle.discriminator.parameters(), s.disc_lr or s.repr_lr,
                               s.disc_betas or s.betas) if self.mask.discriminator else None)
        self.opt_adv = (_adam(bundle.adversary_parameters(), s.adv_lr or s.repr_lr, s.betas)
                        if self.mask.adv else None)
        self.noise_gen = torch.Generator().manual_seed(s.seed + _NOISE_STREAM)
        self.shuffle_gen = torch.Generator().manual_seed(s.seed + _SHUFFLE_STREAM)
        self.frozen_in_encoder_step = [m for m in (
            [bundle.discriminator] if bundle.discriminator is not None else []
        )] + [bundle.heads[n] for n in ("t_adv", "p_adv") if n in bundle.heads]

    def encoder_step(self, batch):
        b, mask = self.bundle, self.mask
        post = encode(b, batch.images)
        noise = torch.randn(post.mu.shape, generator=self.noise_gen)
        part = reparameterize(post, noise, b.blocks)
        z = part.concat()
        x_hat = decode(b, z)
        comps = {"recon": L.reconstruction_loss(batch.images, x_hat),
                 "kl": L.kl_divergence(post.mu, post.log_var)}
        detail = {}
        _set_grad(self.frozen_in_encoder_step, False)
        try:
            if "tc" in mask:
                comps["tc"] = L.tc_loss(discriminate(b, z))
            if mask.cls:
                logit_t = b.heads["t"](part.z_t) if "cls_t" in mask else None
                logit_p = b.heads["p"](part.z_p) if "cls_p" in mask else None
                comps["cls"], detail["cls_t"], detail["cls_p"] = L.decorrelation_cls_loss(
                    logit_t, batch.target, logit_p, batch.protected)
            if mask.adv:
                _, comps["adv"], detail["adv_p"], detail["adv_t"] = L.decorrelation_adv_loss(
                    b.heads["p_adv"](part.z_t), batch.protected,
                    b.heads["t_adv"](part.z_p), batch.target)
        finally:
            _set_grad(self.frozen_in_encoder_step, True)
        total = L.weighted_total(comps, self.weights)
        if not torch.isfinite(total):
            raise NonFiniteLoss(f"non-finite encoder objective {float(total.detach())}")
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        return part, comps, detail

    def discriminator_step(self, part: LatentPartition):
        b = self.bundle
        real = LatentPartition(part.z_t.detach(), part.z_p.detach(), part.z_m.detach())
        fake = shuffle_subspaces(real, generator=self.shuffle_gen)
        loss = L.discriminator_loss(discriminate(b, real), discriminate(b, fake))
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"non-finite discriminator loss {float(loss)}")
        self.opt_disc.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_disc.step()
        return loss

    def adversary_step(self, part: LatentPartition, batch):
        b = self.bundle
        adversary, _, _, _ = L.decorrelation_adv_loss(
            b.heads["p_adv"](part.z_t.detach()), batch.protected,
            b.heads["t_adv"](part.z_p.detach()), batch.target)
        self.opt_adv.zero_grad(set_to_none=True)
        adversary.backward()
        self.opt_adv.step()
        return adversary

    def state(self) -> dict:
        """Optimizer and random-stream state needed to resume bit-exactly."""
        out = {"opt": self.opt.state_dict(), "noise_gen": self.noise_gen.get_state(),
               "shuffle_gen": self.shuffle_gen.get_state()}
        if self.opt_disc is not None:
            out["opt_disc"] = self.opt_disc.state_dict()
        if self.opt_adv is not None:
            out["opt_adv"] = self.opt_adv.state_dict()
        return out

    def load_state(self, state: dict) -> None:
        self.opt.load_state_dict(state["opt"])
        self.noise_gen.set_state(state["noise_gen"])
        self.shuffle_gen.set_state(state["shuffle_gen"])
        if self.opt_disc is not None:
            self.opt_disc.load_state_dict(state["opt_disc"])
        if self.opt_adv is not None:
            self.opt_adv.load_state_dict(state["opt_adv"])

    def __call__(self, batch) -> L.LossReport:
        part, comps, detail = self.encoder_step(batch)
        if self.mask.discriminator:
            detail["disc"] = self.discriminator_step(part)
        if self.mask.adv:
            self.adversary_step(part, batch)
        values = {k: float(v.detach()) for k, v in {**comps, **detail}.items() if v is not None}
        try:
            return L.total_representation_loss(values, self.weights)
        except L.NonFiniteComponent as exc:
            raise NonFiniteLoss(str(exc)) from exc


def train_representation(config: ExperimentConfig, splits, out_dir=None, diagnostics: bool = False,
                         max_steps: Optional[int] = None, log: Optional[TrainingLog] = None,
                         resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Train encoder, decoder, discriminator and heads; return the final checkpoint.

    With ``out_dir``, ``checkpoints/repr-last.pt`` is rewritten after every
    epoch, ``checkpoints/repr-final.pt`` at the end, and every step's
    LossReport is appended to ``logs/train_repr.jsonl``. With ``diagnostics``,
    every step asserts that the discriminator and adversary heads were not
    touched by the encoder step and vice versa. ``resume`` continues from an
    epoch checkpoint (``repr-last.pt``) exactly where the original run was.
    """
    config.validate()
    train = splits[0]
    s = config.schedule
    if len(train) < s.batch_size:
        raise DataExhausted(f"train split has {len(train)} samples, fewer than batch_size {s.batch_size}")
    out_dir = Path(out_dir) if out_dir else None
    log_path = out_dir / "logs" / "train_repr.jsonl" if out_dir else None
    start_epoch, step = 0, 0
    if resume is not None:
        state = resume.extra.get("resume")
        if state is None or resume.phase != "repr":
            raise IncompatibleCheckpoint("checkpoint carries no resumable training state")
        if representation_fields(resume.experiment_config) != representation_fields(config):
            raise IncompatibleCheckpoint("resume checkpoint was produced by a different representation config")
        bundle = resume.bundle()
        step_fn = RepresentationStep(bundle, config)
        step_fn.load_state(state)
        start_epoch, step = resume.epoch + 1, state["step"]
        if log is None:
            prior = TrainingLog.read(log_path) if log_path and log_path.exists() else []
            log = TrainingLog(log_path, [r for r in prior if r["step"] < step])
    else:
        bundle = build_bundle(config)
        step_fn = RepresentationStep(bundle, config)
    if log is None:
        log = TrainingLog(log_path)
    last_path = out_dir / "checkpoints" / "repr-last.pt" if out_dir else None
    epoch = start_epoch - 1
    for epoch in range(start_epoch, s.repr_epochs):
        bundle.train()
        for batch in batch_stream(train, s.batch_size, s.seed, drop_last=True, epoch=epoch):
            if diagnostics:
                before = _component_digests(bundle)
                part, comps, detail = step_fn.encoder_step(batch)
                mid = _component_digests(bundle)
                _assert_unchanged(before, mid, ("discriminator", "t_adv", "p_adv"), "encoder step")
                if step_fn.mask.discriminator:
                    detail["disc"] = step_fn.discriminator_step(part)
                after_d = _component_digests(bundle)
                _assert_unchanged(mid, after_d, ("encoder", "decoder", "t", "p", "t_adv", "p_adv"),
                                  "discriminator step")
                if step_fn.mask.adv:
                    step_fn.adversary_step(part, batch)
                _assert_unchanged(after_d, _component_digests(bundle),
                                  ("encoder", "decoder", "t", "p", "discriminator"), "adversary step")
                values = {k: float(v.detach()) for k, v in {**comps, **detail}.items() if v is not None}
                report = L.total_representation_loss(values, step_fn.weights)
            else:
                try:
                    report = step_fn(batch)
                except NonFiniteLoss as exc:
                    where = f"; last good checkpoint: {last_path}" if last_path and last_path.exists() else ""
                    raise NonFiniteLoss(f"epoch {epoch} step {step}: {exc}{where}") from exc
            log.append({"phase": "repr", "epoch": epoch, "step": step, **report.as_record()})
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        if last_path:
            Checkpoint.from_bundle(bundle, config, epoch, log.digest(),
                                   extra={"resume": {**step_fn.state(), "step": step}}).save(last_path)
        if max_steps is not None and step >= max_steps:
            break
    ck = Checkpoint.from_bundle(bundle, config, epoch, log.digest())
    if out_dir:
        ck.save(out_dir / "checkpoints" / "repr-final.pt")
    return ck


def _component_digests(bundle: ModelBundle) -> dict:
    out = {"encoder": params_digest(bundle.encoder), "decoder": params_digest(bundle.decoder)}
    if bundle.discriminator is not None:
        out["discriminator"] = params_digest(bundle.discriminator)
    for name, head in bundle.heads.items():
        out[name] = params_digest(head)
    return out


def _assert_unchanged(before: dict, after: dict, names, stage: str) -> None:
    changed = [n for n in names if n in before and before[n] != after[n]]
    if changed:
        raise AssertionError(f"{stage} modified {changed}")


@torch.no_grad()
def representation_loss_on(bundle: ModelBundle, dataset: ImageDataset, batch_size: int = 256) -> float:
    """Deterministic recon + KL on a dataset using posterior means."""
    bundle.eval()
    total, n = 0.0, 0
    for batch in sequential_batches(dataset, batch_size):
        post = encode(bundle, batch.images)
        x_hat = decode(bundle, post.mu)
        b = len(batch)
        total += b * float(L.reconstruction_loss(batch.images, x_hat) + L.kl_divergence(post.mu, post.log_var))
        n += b
    return total / n


# ---------------------------------------------------------------------------
# embeddings and latent removal


@torch.no_grad()
def posterior_table(bundle: ModelBundle, dataset: ImageDataset, batch_size: int = 256):
    bundle.eval()
    mus, lvs = [], []
    for batch in sequential_batches(dataset, batch_size):
        post = encode(bundle, batch.images)
        mus.append(post.mu)
        lvs.append(post.log_var)
    if not mus:
        return torch.zeros(0, LATENT_DIM), torch.zeros(0, LATENT_DIM)
    return torch.cat(mus), torch.cat(lvs)


def embed_dataset(checkpoint, dataset: ImageDataset):
    """Posterior means ``[N, 60]`` in dataset order, plus target and protected labels."""
    bundle = checkpoint.bundle() if isinstance(checkpoint, Checkpoint) else checkpoint
    mu, _ = posterior_table(bundle, dataset)
    return mu.numpy().astype(np.float64), dataset.target.copy(), dataset.protected.copy()


def select_removal_latents(table, protected_labels, k: int) -> tuple:
    """Indices of the ``k`` columns with largest |Pearson correlation| to the
    protected labels; zero-variance columns count as uncorrelated."""
    if k not in (1, 2):
        raise ValueError(f"k must be 1 or 2, got {k}")
    x = np.asarray(table, dtype=np.float64)
    y = np.asarray(protected_labels, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DegenerateColumn("latent table contains non-finite values")
    if y.std() == 0:
        raise DegenerateColumn("protected labels are all identical; correlation undefined")
    xc = x - x.mean(0)
    yc = y - y.mean()
    denom = np.sqrt((xc ** 2).sum(0) * (yc ** 2).sum())
    corr = np.divide(xc.T @ yc, denom, out=np.zeros(x.shape[1]), where=denom > 0)
    order = np.argsort(-np.abs(corr), kind="stable")
    return tuple(int(i) for i in order[:k])


# ---------------------------------------------------------------------------
# downstream classification


def _downstream_logits(bundle, config, z, removal_dims):
    part = LatentPartition.split(z, config.blocks)
    return bundle.downstream["d"](downstream_input_vector(config, part, bundle, removal_dims)), part


@torch.no_grad()
def predict(bundle: ModelBundle, config: ExperimentConfig, mu: torch.Tensor, removal_dims=()) -> np.ndarray:
    """Hard predictions (threshold 0.5 on the sigmoid) from posterior means."""
    bundle.eval()
    logits, _ = _downstream_logits(bundle, config, mu, removal_dims)
    return (logits >= 0).long().numpy()


def train_downstream(config: ExperimentConfig, checkpoint: Checkpoint, splits, out_dir=None,
                     log: Optional[TrainingLog] = None, freeze_transform_at_zero: bool = False) -> Checkpoint:
    """Fit the task head (and the MAL transform with its adversary) on the frozen encoder.

    Latents are sampled from the frozen posterior each epoch; the epoch with
    the best validation equalized accuracy is returned.
    """
    config.validate()
    ck_cfg = checkpoint.experiment_config
    if ck_cfg.blocks != config.blocks or ck_cfg.variant != config.variant:
        raise IncompatibleCheckpoint(
            f"checkpoint was trained as {ck_cfg.variant} with subspaces {ck_cfg.blocks}, "
            f"config asks for {config.variant} with {config.blocks}"
        )
    train, val = splits[0], splits[1]
    s = config.schedule
    bundle = checkpoint.bundle()
    for p in bundle.parameters():
        p.requires_grad_(False)
    bundle.eval()

    mu_tr, lv_tr = posterior_table(bundle, train)
    mu_va, _ = posterior_table(bundle, val)
    removal_dims = ()
    if config.downstream_input.startswith("latent_removal"):
        removal_dims = select_removal_latents(mu_tr.numpy(), train.protected, int(config.downstream_input[-1]))

    bundle.build_downstream(task_input_dim(config), transform_dim(config), seed=s.seed)
    params = list(bundle.downstream.parameters())
    if freeze_transform_at_zero and "f" in bundle.downstream:
        with torch.no_grad():
            for p in bundle.downstream["f"].parameters():
                p.zero_()
        params = [p for n, p in bundle.downstream.named_parameters() if not n.startswith("f.")]
        for p in bundle.downstream["f"].parameters():
            p.requires_grad_(False)
    opt = _adam(params, s.downstream_lr, s.betas)
    gen = torch.Generator().manual_seed(s.seed + _DOWNSTREAM_STREAM)
    out_dir = Path(out_dir) if out_dir else None
    if log is None:
        log = TrainingLog(out_dir / "logs" / "train_downstream.jsonl" if out_dir else None)

    y_t = torch.from_numpy(train.target.astype(np.float32))
    y_p = torch.from_numpy(train.protected.astype(np.float32))
    has_adv = "d_adv" in bundle.downstream
    best = None
    n = len(train)
    if n < s.batch_size:
        raise DataExhausted(f"train split has {n} samples, fewer than batch_size {s.batch_size}")
    for epoch in range(s.downstream_epochs):
        bundle.downstream.train()
        perm = torch.from_numpy(epoch_permutation(n, s.seed + 7, epoch))
        sums = {"task": 0.0, "adversary": 0.0}
        steps = 0
        for start in range(0, n - n % s.batch_size, s.batch_size):
            idx = perm[start:start + s.batch_size]
            noise = torch.randn(len(idx), LATENT_DIM, generator=gen)
            z = mu_tr[idx] + torch.exp(0.5 * lv_tr[idx]) * noise
            logit, part = _downstream_logits(bundle, config, z, removal_dims)
            if has_adv:
                zn = bundle.downstream["f"](part.z_m)
                logit_adv = bundle.downstream["d_adv"](reverse_gradient(zn))
                task, adversary, _ = L.downstream_loss(logit, y_t[idx], logit_adv, y_p[idx])
                loss = task + adversary
            else:
                task, adversary, _ = L.downstream_loss(logit, y_t[idx])
                loss = task
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"downstream epoch {epoch}: non-finite loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums["task"] += float(task.detach())
            if adversary is not None:
                sums["adversary"] += float(adversary.detach())
            steps += 1
        preds = predict(bundle, config, mu_va, removal_dims)
        rep = evaluate_predictions(preds, val.target, val.protected)
        record = {"phase": "downstream", "epoch": epoch, "task": sums["task"] / steps}
        if has_adv:
            record["adversary"] = sums["adversary"] / steps
        record.update({f"val_{k}": v for k, v in rep.as_dict().items()})
        log.append(record)
        if best is None or rep.equalized_accuracy > best[0]:
            best = (rep.equalized_accuracy, epoch, copy.deepcopy(bundle.downstream.state_dict()))
    bundle.downstream.load_state_dict(best[2])
    ck = Checkpoint.from_bundle(bundle, config, best[1], log.digest(), phase="downstream",
                                extra={"removal_dims": list(removal_dims),
                                       "best_val_equalized_accuracy": best[0],
                                       "repr_log_digest": checkpoint.log_digest})
    if out_dir:
        ck.save(out_dir / "checkpoints" / "downstream-best.pt")
    return ck


def evaluate_downstream(checkpoint: Checkpoint, dataset: ImageDataset):
    """Return ``(MetricReport, predictions)`` of a downstream checkpoint."""
    if checkpoint.phase != "downstream":
        raise IncompatibleCheckpoint("checkpoint has no trained downstream head")
    bundle = checkpoint.bundle()
    cfg = checkpoint.experiment_config
    mu, _ = posterior_table(bundle, dataset)
    preds = predict(bundle, cfg, mu, tuple(checkpoint.extra.get("removal_dims", ())))
    return evaluate_predictions(preds, dataset.target, dataset.protected), preds
