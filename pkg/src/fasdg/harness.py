"""Leave-one-out protocol driver: data bundles, training loop, evaluation.

Every fold trains on all configured domains except its target and is scored
on the target alone. Per-fold seeds derive from (global seed, target name),
so folds are independent and individually reproducible: dropping a fold from
``protocol.folds`` leaves the remaining folds' results bit-identical.

The data bundle counts every access per domain; a fold's run record carries
the per-domain access deltas observed during training, which must be zero
for the held-out target (protocol hygiene audit).
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from fasdg import ops
from fasdg.backbone import BackboneWeights, backbone_forward, build_backbone_weights
from fasdg.config import ModelConfig
from fasdg.errors import ConfigError, DataError, NumericalError, ProtocolError
from fasdg.heads import (
    MlpHeadParams,
    adversarial_loss,
    bce_loss,
    build_head,
    final_loss,
    grl_lambda,
    label_grid,
    liveness_score,
    regression_loss,
)
from fasdg.metrics import ScoreSet, metrics_report, select_threshold
from fasdg.optim import Adam
from fasdg.synth import (
    FAKE,
    REAL,
    CueSpec,
    LabeledFace,
    cutmix_discretize,
    derive_domain_spec,
    generate_domain,
    ingest_directory,
)
from fasdg.tensor import GradTape, Tensor


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def fold_seed(global_seed: int, target_name: str) -> int:
    """Stable per-fold seed; depends only on the global seed and the target."""
    ss = np.random.SeedSequence([global_seed, 0xF01D, _name_key(target_name)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


# ---------------------------------------------------------------------------
# data bundle


@dataclass
class DomainData:
    train_real: list[LabeledFace]
    train_fake: list[LabeledFace]
    eval_samples: list[LabeledFace]


class DataBundle:
    """Per-domain sample pools with an access audit trail."""

    def __init__(self, domains: dict[str, DomainData], names: list[str]):
        self._domains = domains
        self.names = names
        self.access_counts: dict[str, int] = {n: 0 for n in names}

    def train_pools(self, name: str) -> DomainData:
        self.access_counts[name] += 1
        return self._domains[name]

    def eval_pool(self, name: str) -> list[LabeledFace]:
        self.access_counts[name] += 1
        return self._domains[name].eval_samples

    def counters(self) -> dict[str, int]:
        return dict(self.access_counts)


def _synthetic_bundle(cfg: ModelConfig) -> DataBundle:
    cue = CueSpec(cfg.data.cue_amplitude, cfg.data.cue_frequency, cfg.data.cue_blur)
    seed = cfg.optimizer.seed
    size = cfg.backbone.image_size
    domains = {}
    for idx, name in enumerate(cfg.protocol.domains):
        spec = derive_domain_spec(name, seed, cue)
        rng_train = np.random.default_rng(np.random.SeedSequence([seed, _name_key(name), 1]))
        rng_eval = np.random.default_rng(np.random.SeedSequence([seed, _name_key(name), 2]))
        train = generate_domain(
            spec, cfg.data.n_train_real, cfg.data.n_train_fake, rng_train, idx, size
        )
        evals = generate_domain(
            spec, cfg.data.n_eval_real, cfg.data.n_eval_fake, rng_eval, idx, size
        )
        domains[name] = DomainData(
            train_real=[s for s in train if s.label == REAL],
            train_fake=[s for s in train if s.label == FAKE],
            eval_samples=evals,
        )
    return DataBundle(domains, list(cfg.protocol.domains))


def _directory_bundle(cfg: ModelConfig) -> DataBundle:
    samples, counts = ingest_directory(cfg.data.ingest_path)
    ingested_names = sorted({name for name, _ in counts})
    missing = [d for d in cfg.protocol.domains if d not in ingested_names]
    if missing:
        raise DataError(f"configured domain(s) not found in ingest root: {missing}")
    frac = cfg.data.eval_fraction
    domains = {}
    for idx, name in enumerate(cfg.protocol.domains):
        src_idx = ingested_names.index(name)
        mine = [s for s in samples if s.domain == src_idx]
        pools = {}
        evals: list[LabeledFace] = []
        for label in (REAL, FAKE):
            group = [
                LabeledFace(s.image, s.label, idx) for s in mine if s.label == label
            ]
            n_eval = max(1, int(round(len(group) * frac))) if len(group) > 1 else 0
            evals.extend(group[:n_eval])
            pools[label] = group[n_eval:]
            if not pools[label]:
                raise DataError(f"domain '{name}' has no training samples for label {label}")
        domains[name] = DomainData(pools[REAL], pools[FAKE], evals)
    return DataBundle(domains, list(cfg.protocol.domains))


def build_bundle(cfg: ModelConfig) -> DataBundle:
    if cfg.data.source == "synthetic":
        return _synthetic_bundle(cfg)
    return _directory_bundle(cfg)


# ---------------------------------------------------------------------------
# model assembly


@dataclass
class ModelWeights:
    backbone: BackboneWeights
    regressor: MlpHeadParams
    discriminator: MlpHeadParams
    grid: np.ndarray

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.backbone.named_parameters())
        out.update(self.regressor.named_parameters("regressor"))
        out.update(self.discriminator.named_parameters("discriminator"))
        return out


def build_model(cfg: ModelConfig, n_domains: int, rng: np.random.Generator) -> ModelWeights:
    dtype = cfg.optimizer.dtype
    backbone = build_backbone_weights(cfg.backbone, rng, dtype)
    d = cfg.backbone.embed_dim
    hidden = cfg.heads.hidden_dim
    return ModelWeights(
        backbone=backbone,
        regressor=build_head(d, hidden, cfg.heads.k + 1, rng, dtype),
        discriminator=build_head(d, hidden, n_domains, rng, dtype),
        grid=label_grid(cfg.heads.k, dtype),
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class RunRecord:
    config_text: str
    seed: int
    sources: list[str]
    losses: dict[str, list[float]] = field(default_factory=lambda: {"l_reg": [], "l_adv": [], "l_final": []})
    wall_clock_s: float = 0.0
    data_access: dict[str, int] = field(default_factory=dict)
    metrics: dict | None = None
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "config_text": self.config_text,
            "seed": self.seed,
            "sources": self.sources,
            "losses": self.losses,
            "wall_clock_s": self.wall_clock_s,
            "data_access": self.data_access,
            "metrics": self.metrics,
            "checkpoint_path": self.checkpoint_path,
        }


def _sample_batch(cfg, bundle, sources, rng, dtype):
    per_domain = cfg.optimizer.batch_size // len(sources)
    images, labels, y_d = [], [], []
    pure_only = cfg.heads.loss_mode == "bce"
    for si, name in enumerate(sources):
        pools = bundle.train_pools(name)
        for _ in range(per_domain):
            if not pure_only and rng.random() < cfg.data.p_mix:
                r = pools.train_real[rng.integers(len(pools.train_real))]
                f = pools.train_fake[rng.integers(len(pools.train_fake))]
                comp = cutmix_discretize(r, f, cfg.heads.k, rng)
                images.append(comp.image)
                labels.append(comp.label)
            else:
                merged = pools.train_real + pools.train_fake
                s = merged[rng.integers(len(merged))]
                images.append(s.image)
                labels.append(float(s.label))
            y_d.append(si)
    batch = np.stack(images).astype(dtype, copy=False)
    return batch, np.asarray(labels, dtype=dtype), np.asarray(y_d, dtype=np.int64)


def train_fold(
    cfg: ModelConfig,
    sources: list[str],
    bundle: DataBundle,
    seed: int | None = None,
    lambda_override: float | None = None,
    log_every: int = 0,
) -> tuple[ModelWeights, RunRecord]:
    """Train one fold on the given source domains.

    Batches are domain-balanced: batch_size // n_sources samples per source
    (any remainder is dropped so the discriminator prior stays uniform).
    Deterministic given (config, seed). Raises on non-finite losses.
    """
    if len(sources) < 2:
        raise ProtocolError(f"adversarial training needs >= 2 source domains, got {sources}")
    for s in sources:
        if s not in bundle.names:
            raise ProtocolError(f"unknown source domain {s!r}")
    per_domain = cfg.optimizer.batch_size // len(sources)
    if per_domain < 1:
        raise ConfigError(
            f"batch_size {cfg.optimizer.batch_size} too small for {len(sources)} sources"
        )
    if seed is None:
        seed = cfg.optimizer.seed
    dtype = cfg.optimizer.dtype
    rng = np.random.default_rng(seed)
    model = build_model(cfg, len(sources), rng)
    params = model.named_parameters()
    opt = Adam(
        params,
        lr=cfg.optimizer.lr,
        beta1=cfg.optimizer.beta1,
        beta2=cfg.optimizer.beta2,
        eps=cfg.optimizer.eps,
    )
    record = RunRecord(config_text=cfg.raw_text, seed=seed, sources=list(sources))
    before = bundle.counters()

    base_lambda = cfg.heads.lambda_grl if lambda_override is None else lambda_override
    steps = cfg.optimizer.steps
    t0 = time.perf_counter()
    for step in range(steps):
        progress = step / (steps - 1) if steps > 1 else 1.0
        lam = grl_lambda(cfg.heads.grl_schedule, base_lambda, progress)
        batch, labels, y_d = _sample_batch(cfg, bundle, sources, rng, dtype)
        with GradTape() as tape:
            feats = backbone_forward(batch, model.backbone, cfg.backbone)
            _, scores = liveness_score(feats, model.regressor, model.grid)
            target = Tensor(labels.reshape(-1, 1))
            if cfg.heads.loss_mode == "bce":
                l_reg = bce_loss(scores, target)
            else:
                l_reg = regression_loss(scores, target, cfg.heads.regression_reduction)
            l_adv = adversarial_loss(feats, model.discriminator, y_d, lam)
            loss = final_loss(l_reg, l_adv, cfg.heads.adv_weight)
        if not np.isfinite(loss.data):
            raise NumericalError(f"non-finite loss at step {step}")
        tape.backward(loss)
        opt.step()
        record.losses["l_reg"].append(float(l_reg.data))
        record.losses["l_adv"].append(float(l_adv.data))
        record.losses["l_final"].append(float(loss.data))
        if log_every and (step + 1) % log_every == 0:
            print(
                f"  step {step + 1}/{steps}  l_reg {float(l_reg.data):.4f}  "
                f"l_adv {float(l_adv.data):.4f}"
            )
    record.wall_clock_s = time.perf_counter() - t0
    after = bundle.counters()
    record.data_access = {n: after[n] - before[n] for n in bundle.names}
    return model, record


# ---------------------------------------------------------------------------
# evaluation


def score_samples(model: ModelWeights, cfg: ModelConfig, samples, chunk: int = 128) -> ScoreSet:
    """Score labeled faces with the frozen model (no tape)."""
    if not samples:
        raise DataError("no samples to score")
    dtype = cfg.optimizer.dtype
    all_scores = []
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        batch = np.stack([s.image for s in part]).astype(dtype, copy=False)
        feats = backbone_forward(batch, model.backbone, cfg.backbone)
        _, scores = liveness_score(feats, model.regressor, model.grid)
        all_scores.append(scores.data[:, 0].astype(np.float64))
    return ScoreSet(
        np.concatenate(all_scores),
        np.array([s.label for s in samples]),
        np.array([s.domain for s in samples]),
    )


def evaluate_fold(
    model: ModelWeights,
    cfg: ModelConfig,
    bundle: DataBundle,
    target: str,
    sources: list[str],
) -> tuple[dict, ScoreSet]:
    """Score the held-out target and report metrics per the config's threshold rule."""
    if target in sources:
        raise ProtocolError(f"target {target!r} overlaps the source domains")
    if target not in bundle.names:
        raise ProtocolError(f"unknown target domain {target!r}")
    target_scores = score_samples(model, cfg, bundle.eval_pool(target))
    kind, fixed_value = cfg.protocol.threshold_kind()
    dev = None
    if kind == "eer-dev":
        dev_samples = [s for name in sources for s in bundle.eval_pool(name)]
        dev = score_samples(model, cfg, dev_samples)
    tau = select_threshold(target_scores, kind, fixed_value=fixed_value, dev=dev)
    return metrics_report(target_scores, tau, convention=cfg.protocol.threshold), target_scores


# ---------------------------------------------------------------------------
# cross-dataset protocol


def cross_dataset_run(
    cfg: ModelConfig,
    bundle: DataBundle | None = None,
    lambda_override: float | None = None,
    verbose: bool = False,
) -> dict:
    """Leave-one-out over all configured domains (or the ``folds`` subset).

    Each fold trains on every other domain and is evaluated on its target.
    Returns per-fold metrics plus mean and population std across folds.
    """
    domains = cfg.protocol.domains
    if len(domains) < 3:
        raise ProtocolError(f"cross-dataset protocol needs >= 3 domains, got {domains}")
    fold_targets = cfg.protocol.folds or domains
    if bundle is None:
        bundle = build_bundle(cfg)
    t0 = time.perf_counter()
    folds = {}
    for target in fold_targets:
        sources = [d for d in domains if d != target]
        seed = fold_seed(cfg.optimizer.seed, target)
        if verbose:
            print(f"fold {','.join(sources)} -> {target} (seed {seed})")
        model, record = train_fold(
            cfg, sources, bundle, seed=seed, lambda_override=lambda_override,
            log_every=100 if verbose else 0,
        )
        report, _ = evaluate_fold(model, cfg, bundle, target, sources)
        if record.data_access.get(target, 0) != 0:
            raise ProtocolError(f"target {target!r} was touched during training")
        folds[target] = {
            "sources": sources,
            "seed": seed,
            "train_access": record.data_access,
            "final_l_reg": record.losses["l_reg"][-1] if record.losses["l_reg"] else None,
            **report,
        }
    hters = [folds[t]["hter"] for t in fold_targets]
    aucs = [folds[t]["auc"] for t in fold_targets]
    return {
        "folds": folds,
        "fold_order": list(fold_targets),
        "mean": {"hter": float(np.mean(hters)), "auc": float(np.mean(aucs))},
        "std": {"hter": float(np.std(hters)), "auc": float(np.std(aucs))},
        "seed": cfg.optimizer.seed,
        "wall_clock_s": time.perf_counter() - t0,
    }


def ablation_run(cfg: ModelConfig, verbose: bool = False) -> dict:
    """Cross-dataset run with and without the adversarial branch (lambda = 0).

    Emits both reports plus the AUC delta table the comparison is read from.
    """
    bundle = build_bundle(cfg)
    with_adv = cross_dataset_run(cfg, bundle=bundle, verbose=verbose)
    without_adv = cross_dataset_run(cfg, bundle=bundle, lambda_override=0.0, verbose=verbose)
    comparison = {
        t: {
            "auc_with_adv": with_adv["folds"][t]["auc"],
            "auc_without_adv": without_adv["folds"][t]["auc"],
            "delta_auc_disabling_adv": without_adv["folds"][t]["auc"] - with_adv["folds"][t]["auc"],
        }
        for t in with_adv["fold_order"]
    }
    return {
        "default": with_adv,
        "no_adversarial": without_adv,
        "comparison": comparison,
        "mean_delta_auc_disabling_adv": without_adv["mean"]["auc"] - with_adv["mean"]["auc"],
    }


def render_table(report: dict) -> str:
    """Aligned text rendering of a cross-dataset report."""
    lines = [f"{'fold':<14}{'target':<8}{'HTER':>8}{'AUC':>8}"]
    for target in report["fold_order"]:
        row = report["folds"][target]
        fold_name = ",".join(s[:1] for s in row["sources"]) + "->" + target[:1]
        lines.append(
            f"{fold_name:<14}{target:<8}{row['hter']:>8.3f}{row['auc']:>8.3f}"
        )
    mean, std = report["mean"], report["std"]
    lines.append(
        f"{'mean+/-std':<22}{mean['hter']:>8.3f}{std['hter']:>7.3f} "
        f"{mean['auc']:>7.3f}{std['auc']:>7.3f}"
    )
    return "\n".join(lines)
