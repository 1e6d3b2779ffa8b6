import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fdvae import trainer as T
from fdvae.datasets import ImageDataset, SyntheticSpec, generate_synthetic
from fdvae.errors import DataExhausted, DegenerateColumn, IncompatibleCheckpoint, NonFiniteLoss
from fdvae.experiments import linear_probe_accuracy
from fdvae.trainer import (
    Checkpoint,
    TrainingLog,
    build_bundle,
    embed_dataset,
    params_digest,
    representation_loss_on,
    select_removal_latents,
    train_downstream,
    train_representation,
)

from .conftest import tiny_config


@pytest.fixture(scope="module")
def fdvae_run(tiny_splits, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config("fdvae", epochs=2)
    ck = train_representation(cfg, tiny_splits, out_dir=out)
    return cfg, ck, out


def _zero_weights(cfg):
    cfg.weights.alpha = cfg.weights.beta = cfg.weights.gamma = 0.0
    return cfg


# --- representation phase -----------------------------------------------------

def test_checkpoint_round_trip(fdvae_run, tiny_splits):
    cfg, ck, out = fdvae_run
    loaded = Checkpoint.load(out / "checkpoints" / "repr-final.pt")
    assert loaded.epoch == 1 and loaded.config_hash == cfg.config_hash()
    assert loaded.log_digest == TrainingLog(records=TrainingLog.read(out / "logs" / "train_repr.jsonl")).digest()
    for k, v in ck.state.items():
        assert torch.equal(v, loaded.state[k]), k
    val = tiny_splits[1]
    assert representation_loss_on(loaded.bundle(), val) == representation_loss_on(ck.bundle(), val)
    assert (out / "checkpoints" / "repr-last.pt").exists()


def test_log_holds_every_step(fdvae_run):
    cfg, _, out = fdvae_run
    recs = TrainingLog.read(out / "logs" / "train_repr.jsonl")
    assert len(recs) == 2 * (128 // cfg.schedule.batch_size)
    assert [r["step"] for r in recs] == list(range(len(recs)))
    assert set(recs[0]) == {"phase", "epoch", "step", "recon", "kl", "tc", "disc",
                            "cls_t", "cls_p", "adv_t", "adv_p", "total"}


def test_vae_log_omits_inactive_terms(tiny_splits):
    log = TrainingLog()
    train_representation(tiny_config("vae"), tiny_splits, log=log)
    for rec in log.records:
        assert set(rec) == {"phase", "epoch", "step", "recon", "kl", "total"}


def test_determinism(tiny_splits):
    cfg = tiny_config("fdvae")
    a, b = TrainingLog(), TrainingLog()
    ca = train_representation(cfg, tiny_splits, log=a)
    cb = train_representation(cfg, tiny_splits, log=b)
    assert a.records == b.records
    assert params_digest(ca.bundle()) == params_digest(cb.bundle())


def test_zero_weights_match_vae(tiny_splits):
    a, b = TrainingLog(), TrainingLog()
    train_representation(_zero_weights(tiny_config("fdvae")), tiny_splits, log=a)
    train_representation(tiny_config("vae"), tiny_splits, log=b)
    keys = ("step", "epoch", "recon", "kl", "total")
    assert [[r[k] for k in keys] for r in a.records] == [[r[k] for k in keys] for r in b.records]


def test_resume_continues_bit_exactly(tiny_splits, tmp_path):
    cfg = tiny_config("fdvae", epochs=2)
    full = TrainingLog()
    ref = train_representation(cfg, tiny_splits, log=full)
    # interrupted run: one epoch, then resume from repr-last.pt with the two-epoch config
    first = tiny_config("fdvae", epochs=1)
    train_representation(first, tiny_splits, out_dir=tmp_path)
    last = Checkpoint.load(tmp_path / "checkpoints" / "repr-last.pt")
    resumed = train_representation(cfg, tiny_splits, out_dir=tmp_path, resume=last)
    assert TrainingLog.read(tmp_path / "logs" / "train_repr.jsonl") == full.records
    assert params_digest(resumed.bundle()) == params_digest(ref.bundle())
    other = tiny_config("fdvae", epochs=2)
    other.weights.beta = 3.0
    with pytest.raises(IncompatibleCheckpoint):
        train_representation(other, tiny_splits, resume=last)


@pytest.mark.parametrize("variant", ["fdvae", "factor_vae", "ffvae_approx"])
def test_diagnostics_steps_touch_only_their_parameters(variant, tiny_splits):
    # raises AssertionError if any step updates a component it does not own
    ck = train_representation(tiny_config(variant), tiny_splits, diagnostics=True, max_steps=3)
    assert ck.epoch == 0


def test_encoder_step_leaves_adversary_untouched(tiny_splits):
    cfg = tiny_config("fdvae")
    bundle = build_bundle(cfg)
    step = T.RepresentationStep(bundle, cfg)
    batch = next(iter(T.batch_stream(tiny_splits[0], 32, 0)))
    before = {n: params_digest(bundle.heads[n]) for n in ("t_adv", "p_adv")}
    enc = params_digest(bundle.encoder)
    step.encoder_step(batch)
    assert {n: params_digest(bundle.heads[n]) for n in ("t_adv", "p_adv")} == before
    assert params_digest(bundle.encoder) != enc
    for n in ("t_adv", "p_adv"):
        assert all(p.grad is None or not p.grad.any() for p in bundle.heads[n].parameters())


def test_overfits_single_image(tiny_splits):
    # one image repeated so that a batch of two exists
    one = tiny_splits[0].subset([0, 0])
    cfg = _zero_weights(tiny_config("fdvae", epochs=500, batch_size=2))
    cfg.schedule.repr_lr, cfg.schedule.betas = 3e-3, (0.5, 0.999)
    log = TrainingLog()
    train_representation(cfg, (one, one, one), log=log)
    recon = log.series("recon")
    assert len(recon) == 500
    # measured about 2.7% of the initial loss after 500 steps; it keeps falling with more steps
    assert np.mean(recon[-20:]) < 0.05 * recon[0]


def test_errors(tiny_splits, monkeypatch):
    with pytest.raises(DataExhausted):
        train_representation(tiny_config("vae", batch_size=64), (tiny_splits[1],))
    monkeypatch.setattr(T.L, "reconstruction_loss", lambda x, y: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(NonFiniteLoss):
        train_representation(tiny_config("vae"), tiny_splits, max_steps=2)


def test_load_rejects_foreign_files(tmp_path, fdvae_run):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(IncompatibleCheckpoint):
        Checkpoint.load(bad)
    _, ck, _ = fdvae_run
    state = dict(ck.state)
    key = [k for k in state if k.startswith("encoder.") and k.endswith("weight")][-1]
    state[key] = state[key][:100]
    Checkpoint(state, ck.config, 0).save(tmp_path / "short.pt")
    with pytest.raises(IncompatibleCheckpoint):
        Checkpoint.load(tmp_path / "short.pt")


# --- downstream phase -----------------------------------------------------------

def test_downstream_keeps_encoder_frozen(fdvae_run, tiny_splits, tmp_path):
    cfg, ck, _ = fdvae_run
    enc = params_digest(ck.bundle().encoder)
    dck = train_downstream(cfg, ck, tiny_splits, out_dir=tmp_path)
    assert params_digest(dck.bundle().encoder) == enc
    assert dck.phase == "downstream"
    again = Checkpoint.load(tmp_path / "checkpoints" / "downstream-best.pt")
    assert all(torch.equal(v, again.state[k]) for k, v in dck.state.items())
    recs = TrainingLog.read(tmp_path / "logs" / "train_downstream.jsonl")
    best = max(r["val_equalized_accuracy"] for r in recs)
    assert dck.extra["best_val_equalized_accuracy"] == best


def test_frozen_zero_transform_reduces_to_zt(fdvae_run, tiny_splits):
    cfg, ck, _ = fdvae_run
    dck = train_downstream(cfg, ck, tiny_splits, freeze_transform_at_zero=True)
    bundle = dck.bundle()
    f = bundle.downstream["f"]
    assert not f.weight.any() and not f.bias.any()
    mu, _ = T.posterior_table(bundle, tiny_splits[2])
    with torch.no_grad():
        via_head = bundle.downstream["d"](T.downstream_input_vector(cfg, T.LatentPartition.split(mu), bundle))
        direct = bundle.downstream["d"](mu[:, :20])
    assert torch.equal(via_head, direct)


def test_downstream_rejects_mismatched_checkpoint(fdvae_run, tiny_splits):
    _, ck, _ = fdvae_run
    with pytest.raises(IncompatibleCheckpoint):
        train_downstream(tiny_config("vae"), ck, tiny_splits)


def test_toy_separable_latents(monkeypatch):
    rng = np.random.default_rng(0)
    w = rng.standard_normal(20)

    def toy(n):
        z = rng.standard_normal((n, 60)).astype(np.float32)
        y = (z[:, :20] @ w > 0).astype(np.int64)
        g = rng.integers(0, 2, n)
        ds = ImageDataset(np.zeros((n, 3, 64, 64), np.uint8), y, g)
        return ds, torch.from_numpy(z)

    (tr, ztr), (va, zva) = toy(2048), toy(256)
    table = {id(tr): ztr, id(va): zva}
    monkeypatch.setattr(T, "posterior_table",
                        lambda bundle, ds, batch_size=256: (table[id(ds)], torch.full_like(table[id(ds)], -10.0)))
    cfg = tiny_config("fdvae")
    cfg.schedule.downstream_epochs = 30
    ck = Checkpoint.from_bundle(build_bundle(cfg), cfg, 0)
    log = TrainingLog()
    dck = train_downstream(cfg, ck, (tr, va), log=log)
    assert max(log.series("val_accuracy")) > 0.95
    assert dck.extra["best_val_equalized_accuracy"] > 0.95


# --- embeddings and latent removal ----------------------------------------------

def test_embed_shape_and_determinism(fdvae_run, tiny_splits):
    _, ck, _ = fdvae_run
    test = tiny_splits[2]
    a, t, p = embed_dataset(ck, test)
    b, _, _ = embed_dataset(Checkpoint(dict(ck.state), ck.config, ck.epoch), test)
    assert a.shape == (len(test), 60) and a.dtype == np.float64
    assert np.array_equal(a, b)
    assert np.array_equal(t, test.target) and np.array_equal(p, test.protected)
    # row order follows dataset order
    rev = embed_dataset(ck, test.subset(np.arange(len(test))[::-1]))[0]
    assert np.allclose(rev[::-1], a, atol=1e-5)


def test_zt_probe_reproduces_cls_head_accuracy():
    spec = SyntheticSpec(n_train=512, n_val=64, n_test=64, seed=5)
    splits = generate_synthetic(spec)
    cfg = tiny_config("fdvae", epochs=3, batch_size=64, spec=spec, use_adv=False)
    cfg.weights.alpha = 50.0
    ck = train_representation(cfg, splits)
    table, y, _ = embed_dataset(ck, splits[0])
    bundle = ck.bundle()
    with torch.no_grad():
        logits = bundle.heads["t"](torch.from_numpy(table[:, :20]).float())
    head_acc = float(((logits >= 0).long().numpy() == y).mean())
    probe_acc = linear_probe_accuracy(table[:, :20], y, table[:, :20], y)
    assert abs(head_acc - probe_acc) <= 0.02
    assert head_acc > 0.6


def test_removal_picks_exact_column():
    rng = np.random.default_rng(0)
    g = rng.integers(0, 2, 200)
    x = rng.standard_normal((200, 60))
    x[:, 7] = g
    assert select_removal_latents(x, g, 1) == (7,)
    x[:, 3] = 0.0  # zero variance counts as uncorrelated
    assert 3 not in select_removal_latents(x, g, 2)


def test_removal_errors():
    x = np.random.default_rng(0).standard_normal((10, 60))
    with pytest.raises(DegenerateColumn):
        select_removal_latents(x, np.ones(10), 1)
    x[0, 0] = np.nan
    with pytest.raises(DegenerateColumn):
        select_removal_latents(x, np.arange(10) % 2, 1)
    with pytest.raises(ValueError):
        select_removal_latents(np.zeros((4, 60)), [0, 1, 0, 1], 3)


def _brute_force(x, g, k):
    def corr(col):
        a = [v - sum(col) / len(col) for v in col]
        b = [v - sum(g) / len(g) for v in g]
        den = (sum(v * v for v in a) * sum(v * v for v in b)) ** 0.5
        return 0.0 if den == 0 else abs(sum(p * q for p, q in zip(a, b)) / den)

    scores = [corr(list(x[:, j])) for j in range(x.shape[1])]
    best = max(itertools.combinations(range(x.shape[1]), k),
               key=lambda c: (sorted((scores[j] for j in c), reverse=True), [-j for j in c]))
    return tuple(sorted(best, key=lambda j: (-scores[j], j)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2]))
def test_removal_matches_exhaustive_scan(seed, k):
    rng = np.random.default_rng(seed)
    g = rng.integers(0, 2, 40)
    g[:2] = [0, 1]
    x = rng.standard_normal((40, 60))
    x[:, rng.integers(0, 60)] = 0.0  # a constant column
    got = select_removal_latents(x, g, k)
    assert got == _brute_force(x, g, k)


def test_removal_ties_break_to_lower_index():
    g = np.array([0, 1, 0, 1, 1, 0])
    x = np.random.default_rng(1).standard_normal((6, 60))
    x[:, 9] = g
    x[:, 4] = g
    x[:, 30] = -g
    assert select_removal_latents(x, g, 1) == (4,)
    assert select_removal_latents(x, g, 2) == (4, 9)
