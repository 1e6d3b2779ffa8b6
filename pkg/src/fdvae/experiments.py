"""Running configs end to end, aggregating results, exporting embeddings."""
from __future__ import annotations

import copy
import csv
import functools
import hashlib
import json
import logging
import shutil
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .datasets import (
    ImageDataset,
    SyntheticSpec,
    compose_split,
    generate_synthetic,
    load_attribute_dataset,
)
from .errors import EmptyRows, IncompatibleCheckpoint, InvalidSpec
from .metrics import MetricReport, write_metrics, write_prediction_log
from .trainer import (
    Checkpoint,
    embed_dataset,
    evaluate_downstream,
    representation_fields,
    train_downstream,
    train_representation,
)
from .variants import downstream_input_vector, variant_loss_mask  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "equalized_accuracy", "equal_opportunity", "equalized_odds")


# ---------------------------------------------------------------------------
# datasets


@functools.lru_cache(maxsize=4)
def _synthetic_cached(key: str):
    return generate_synthetic(SyntheticSpec.from_dict(json.loads(key)))


def resolve_splits(config: ExperimentConfig):
    """``(train, val, test)`` ImageDatasets for the config's dataset section."""
    ds = config.dataset
    if ds.kind == "synthetic":
        return _synthetic_cached(json.dumps(ds.synthetic.to_dict(), sort_keys=True))
    pair = ds.pair()
    if ds.composition is None:
        return tuple(ImageDataset.from_records(load_attribute_dataset(ds.root, pair, split))
                     for split in ("train", "val", "test"))
    records = load_attribute_dataset(ds.root, pair)
    return tuple(ImageDataset.from_records(r) for r in compose_split(records, ds.composition))


# ---------------------------------------------------------------------------
# probes


def linear_probe_accuracy(x_fit, y_fit, x_eval, y_eval) -> float:
    """Accuracy of a logistic-regression probe fitted on one split, scored on another."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    if len(np.unique(y_fit)) < 2:
        raise InvalidSpec("probe labels must contain both classes")
    model = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
    model.fit(np.asarray(x_fit), np.asarray(y_fit))
    return float(model.score(np.asarray(x_eval), np.asarray(y_eval)))


PROBE_SAMPLE_SEED = 7


def sampled_codes(checkpoint: Checkpoint, dataset: ImageDataset, seed: int = PROBE_SAMPLE_SEED):
    """One draw from q(z|x) per record, float64 ``[N, 60]``, fixed by ``seed``."""
    from .trainer import posterior_table

    bundle = checkpoint.bundle() if isinstance(checkpoint, Checkpoint) else checkpoint
    mu, log_var = posterior_table(bundle, dataset)
    mu, log_var = mu.numpy().astype(np.float64), log_var.numpy().astype(np.float64)
    noise = np.random.default_rng(seed).standard_normal(mu.shape)
    return mu + np.exp(0.5 * log_var) * noise


def subspace_probes(checkpoint: Checkpoint, fit: ImageDataset, evaluate: ImageDataset) -> dict:
    """Protected/target probe accuracies on each latent block and on the task input.

    Probes are fitted on ``fit`` (normally the balanced validation split) and
    scored on ``evaluate``. Keys without a suffix probe posterior means; keys
    ending in ``_sampled`` probe one posterior draw per record, which is what
    the heads and the downstream classifier actually see.
    """
    import torch

    cfg = checkpoint.experiment_config
    zf, tf, pf = embed_dataset(checkpoint, fit)
    ze, te, pe = embed_dataset(checkpoint, evaluate)
    tables = {"": (zf, ze),
              "_sampled": (sampled_codes(checkpoint, fit), sampled_codes(checkpoint, evaluate, PROBE_SAMPLE_SEED + 1))}
    bt, bp, bm = cfg.blocks
    blocks = {"zt": slice(0, bt), "zp": slice(bt, bt + bp)}
    if bm:
        blocks["zm"] = slice(bt + bp, bt + bp + bm)
    out = {}
    bundle = checkpoint.bundle() if checkpoint.phase == "downstream" else None
    dims = tuple(checkpoint.extra.get("removal_dims", ()))
    for suffix, (af, ae) in tables.items():
        for name, sl in blocks.items():
            out[f"protected_{name}{suffix}"] = linear_probe_accuracy(af[:, sl], pf, ae[:, sl], pe)
            out[f"target_{name}{suffix}"] = linear_probe_accuracy(af[:, sl], tf, ae[:, sl], te)
        if bundle is not None:
            with torch.no_grad():
                xf = downstream_input_vector(cfg, torch.from_numpy(af).float(), bundle, dims).numpy()
                xe = downstream_input_vector(cfg, torch.from_numpy(ae).float(), bundle, dims).numpy()
            out[f"protected_input{suffix}"] = linear_probe_accuracy(xf, pf, xe, pe)
            out[f"target_input{suffix}"] = linear_probe_accuracy(xf, tf, xe, te)
    return out


# ---------------------------------------------------------------------------
# running


@dataclass
class ResultRow:
    label: str
    variant: str
    downstream_input: str
    config_hash: str
    seed: int
    dataset: str
    metrics: MetricReport
    seconds: float
    probes: dict = field(default_factory=dict)
    run_dir: str = ""

    def as_record(self) -> dict:
        d = asdict(self)
        d["metrics"] = self.metrics.as_dict()
        return d

    @classmethod
    def from_record(cls, d: dict) -> "ResultRow":
        d = dict(d)
        d["metrics"] = MetricReport(**d["metrics"])
        return cls(**d)


def representation_hash(config: ExperimentConfig) -> str:
    """Hash of the fields that affect representation learning only."""
    d = representation_fields(config)
    d["schedule"]["repr_epochs"] = config.schedule.repr_epochs
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def run_dir_for(config: ExperimentConfig, out_root, seed: int) -> Path:
    return Path(out_root) / config.config_hash() / f"seed-{seed}"


def _find_representation(out_root: Path, rhash: str, seed: int) -> Optional[Path]:
    for path in sorted(out_root.glob(f"*/seed-{seed}/checkpoints/repr-final.pt")):
        meta = path.with_suffix(".json")
        if meta.exists() and json.loads(meta.read_text()).get("representation_hash") == rhash:
            return path
    return None


def run_seed(config: ExperimentConfig, seed: int, out_root, splits=None,
             reuse_representation: bool = True, export: bool = True) -> ResultRow:
    """Train, evaluate and write all artifacts of one (config, seed) run."""
    cfg = config.with_seed(seed)
    cfg.seeds = [seed]
    cfg.validate()
    out_root = Path(out_root)
    run_dir = run_dir_for(config, out_root, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    splits = splits or resolve_splits(cfg)
    t0 = time.perf_counter()

    rhash = representation_hash(cfg)
    reused = _find_representation(out_root, rhash, seed) if reuse_representation else None
    final = run_dir / "checkpoints" / "repr-final.pt"
    if reused is not None and reused != final:
        log.info("reusing representation %s", reused)
        final.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(reused, final)
        src_log = reused.parent.parent / "logs" / "train_repr.jsonl"
        if src_log.exists():
            (run_dir / "logs").mkdir(exist_ok=True)
            shutil.copyfile(src_log, run_dir / "logs" / "train_repr.jsonl")
        repr_ck = Checkpoint.load(final)
    elif reused is not None:
        repr_ck = Checkpoint.load(final)
    else:
        repr_ck = train_representation(cfg, splits, out_dir=run_dir)
    final.with_suffix(".json").write_text(json.dumps({"representation_hash": rhash}))

    ds_ck = train_downstream(cfg, repr_ck, splits, out_dir=run_dir)
    test = splits[2]
    report, preds = evaluate_downstream(ds_ck, test)
    write_prediction_log(run_dir / "predictions.csv", test.ids, preds, test.target, test.protected)
    probes = subspace_probes(ds_ck, splits[1], test)
    seconds = time.perf_counter() - t0
    row = ResultRow(cfg.label, cfg.variant, cfg.downstream_input, config.config_hash(), seed,
                    cfg.dataset.identifier(), report, seconds, probes, str(run_dir))
    write_metrics(run_dir / "metrics.json", report, label=row.label, seed=seed,
                  config_hash=row.config_hash, dataset=row.dataset, seconds=seconds, probes=probes)
    if export:
        export_embeddings(repr_ck, test, run_dir / "embeddings")
    return row


def run_experiment(config: ExperimentConfig, out_root, splits=None, **kw) -> list:
    """One :class:`ResultRow` per seed in ``config.seeds``.

    Rows of completed seeds are written as each seed finishes, so a failure
    in a later seed leaves earlier results on disk.
    """
    config.validate()
    rows = []
    for seed in config.seeds:
        rows.append(run_seed(config, seed, out_root, splits, **kw))
    return rows


def load_run_rows(run_dirs: Sequence) -> list:
    """ResultRows from the ``metrics.json`` files of run directories."""
    from .errors import MissingMetricsFile

    rows = []
    for d in run_dirs:
        d = Path(d)
        path = d / "metrics.json"
        if not path.exists():
            raise MissingMetricsFile(f"{path} not found")
        m = json.loads(path.read_text())
        cfg = ExperimentConfig.load(d / "config.yaml")
        rows.append(ResultRow(
            label=m.get("label", cfg.label), variant=cfg.variant, downstream_input=cfg.downstream_input,
            config_hash=m.get("config_hash", cfg.config_hash()), seed=m.get("seed", cfg.schedule.seed),
            dataset=m.get("dataset", cfg.dataset.identifier()),
            metrics=MetricReport(**{k: m[k] for k in METRIC_NAMES}),
            seconds=m.get("seconds", 0.0), probes=m.get("probes", {}), run_dir=str(d),
        ))
    return rows


# ---------------------------------------------------------------------------
# results tables


def aggregate(rows: Sequence[ResultRow], grouping=("label", "dataset")) -> list:
    """Mean and sample sd (0 for a single row) of each metric per group."""
    if not rows:
        raise EmptyRows("no result rows to tabulate")
    groups = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, g) for g in grouping), []).append(r)
    out = []
    for key, members in groups.items():
        rec = dict(zip(grouping, key))
        rec["n"] = len(members)
        for m in METRIC_NAMES:
            vals = [getattr(r.metrics, m) for r in members]
            # exact rational arithmetic: identical rows give sd exactly 0
            rec[f"{m}_mean"] = float(statistics.mean(vals))
            rec[f"{m}_sd"] = float(statistics.stdev(vals)) if len(vals) > 1 else 0.0
        out.append(rec)
    return out


def results_table(rows: Sequence[ResultRow], grouping=("label", "dataset"), out_dir=None) -> str:
    """Aligned text table of mean ± sd; with ``out_dir`` also writes
    ``results.txt``, ``results.csv`` and ``results.json``."""
    agg = aggregate(rows, grouping)
    header = [*grouping, "n", "Acc", "EAcc", "EOpp", "EOdds"]
    body = []
    for rec in agg:
        body.append([str(rec[g]) for g in grouping] + [str(rec["n"])] + [
            f"{100 * rec[f'{m}_mean']:.2f} ± {100 * rec[f'{m}_sd']:.2f}" for m in METRIC_NAMES
        ])
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    text = "\n".join([fmt(header), fmt(["-" * w for w in widths]), *map(fmt, body)]) + "\n"
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.txt").write_text(text)
        (out_dir / "results.json").write_text(json.dumps(agg, indent=2))
        with open(out_dir / "results.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(agg[0]))
            w.writeheader()
            w.writerows(agg)
    return text


# ---------------------------------------------------------------------------
# embeddings


SUBSPACE_NAMES = ("TAL", "PAL", "MAL")


def pca_2d(x: np.ndarray):
    """Project rows onto the top two principal components; returns ``(coords, components)``."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    # sign convention: largest-magnitude loading of each component is positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(1)])
    comps = comps * signs[:, None]
    return xc @ comps.T, comps


def export_embeddings(checkpoint: Checkpoint, dataset: ImageDataset, out_dir) -> tuple:
    """Write per-subspace posterior means and their joint 2-D PCA projection.

    The 60-dim code is cut into three consecutive 20-dim chunks (TAL, PAL,
    MAL); for models without that partition the chunks are an even split.
    Returns the two file paths.
    """
    if not isinstance(checkpoint, Checkpoint):
        raise IncompatibleCheckpoint("export_embeddings needs a Checkpoint")
    table, y_t, y_p = embed_dataset(checkpoint, dataset)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(table)
    chunks = table.reshape(n, 3, 20)
    emb_path, proj_path = out_dir / "embeddings.csv", out_dir / "projection.csv"
    with open(emb_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "subspace", *[f"v{j}" for j in range(20)], "y_t", "y_p"])
        for i in range(n):
            for s, name in enumerate(SUBSPACE_NAMES):
                w.writerow([dataset.ids[i], name, *(f"{v:.8g}" for v in chunks[i, s]), int(y_t[i]), int(y_p[i])])
    stacked = chunks.reshape(n * 3, 20)
    coords, _ = pca_2d(stacked) if n else (np.zeros((0, 2)), None)
    with open(proj_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "subspace", "pc1", "pc2"])
        for k in range(len(coords)):
            w.writerow([dataset.ids[k // 3], SUBSPACE_NAMES[k % 3], f"{coords[k, 0]:.8g}", f"{coords[k, 1]:.8g}"])
    return emb_path, proj_path


def read_embeddings(path):
    """Rows of an embeddings file as ``(ids, subspaces, values [M, 20], y_t, y_p)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [r[0] for r in rows]
    subs = [r[1] for r in rows]
    vals = np.array([[float(v) for v in r[2:22]] for r in rows]).reshape(-1, 20)
    return ids, subs, vals, np.array([int(r[22]) for r in rows]), np.array([int(r[23]) for r in rows])
