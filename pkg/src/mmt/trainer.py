"""Two-stage optimization: supervised source pre-training, then mutual
mean-teacher adaptation with per-epoch re-clustering and EMA teachers."""

import csv
import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import datagen
from .cluster import align_to_previous, relabel_epoch
from .datagen import (
    DomainSpec,
    ViewBatch,
    random_rotation,
    sample_pk_batch,
    split_by_identity,
    strip_identities,
    two_view_batch,
)
from .diffcore import backward, new_tape, no_grad
from .errors import ConfigError, EvalError
from .losses import LossWeights, hard_ce_loss, hard_triplet_loss, mine_hardest, total_mmt_loss
from .model import classify, encode, ema_update, init_pair, reset_classifiers
from .retrieval_eval import evaluate_network, peer_kl

log = logging.getLogger(__name__)


def _seed_parts(*parts):
    return [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]


def rng_for(*parts):
    """Deterministic generator derived from a base seed plus tags."""
    return np.random.default_rng(np.random.SeedSequence(_seed_parts(*parts)))


def seed_for(*parts):
    return int(np.random.SeedSequence(_seed_parts(*parts)).generate_state(1)[0])


@dataclass
class Seeds:
    data: int = 7
    net1: int = 11
    net2: int = 12
    sampler: int = 13
    cluster: int = 14
    eval: int = 15


@dataclass
class DataParams:
    input_dim: int = 16
    source_identities: int = 30
    target_identities: int = 25
    samples_per_identity: int = 20
    sigma_between: float = 4.0
    sigma_within: float = 0.6
    target_scale: float = 1.3
    target_shift: float = 1.0
    val_fraction: float = 0.25
    test_fraction: float = 0.25


@dataclass
class AblationFlags:
    no_soft_id: bool = False
    no_soft_tri: bool = False
    no_hard_id: bool = False
    no_hard_tri: bool = False
    single_network: bool = False
    no_ema: bool = False


@dataclass
class RunConfig:
    hidden_dim: int = 32
    feature_dim: int = 16
    alpha: float = 0.999
    m_t: int = 20
    p: int = 16
    k: int = 4
    lr_pretrain: float = 3.5e-3
    lr_adapt: float = 3.5e-3
    epochs_pretrain: int = 15
    epochs_adapt: int = 20
    iters_adapt: int = 40
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 5e-4
    aug_sigma: float = 0.3
    aug_dropout: float = 0.1
    reset_classifier: bool = False
    align_cluster_indices: bool = True
    normalize_cluster_features: bool = True
    cluster_feature_source: str = "avg1"
    teacher_own_mining: bool = False
    oracle_validation: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    data: DataParams = field(default_factory=DataParams)
    seeds: Seeds = field(default_factory=Seeds)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self):
        if not (0.0 <= self.alpha < 1.0):
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.p < 2 or self.k < 2:
            raise ConfigError("P and K must both be >= 2 so batches admit mining")
        for name in ("lambda_id", "lambda_tri"):
            v = getattr(self.weights, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"weights.{name} must lie in [0, 1], got {v}")
        if self.weights.lambda_source < 0 or self.weights.margin < 0:
            raise ConfigError("lambda_source and margin must be non-negative")
        if self.m_t < 2:
            raise ConfigError("m_t must be >= 2")
        if self.ablation.no_soft_id and self.ablation.no_hard_id:
            raise ConfigError("no_soft_id and no_hard_id together leave no classification loss")
        if self.ablation.no_soft_tri and self.ablation.no_hard_tri:
            raise ConfigError("no_soft_tri and no_hard_tri together leave no triplet loss")
        if self.cluster_feature_source not in ("avg1", "avg2", "net1", "net2"):
            raise ConfigError(f"unknown cluster_feature_source {self.cluster_feature_source!r}")
        return self

    def effective_weights(self):
        """Resolve ablation flags into concrete lambda values."""
        f = self.ablation
        lam_id = 0.0 if f.no_soft_id else (1.0 if f.no_hard_id else self.weights.lambda_id)
        lam_tri = 0.0 if f.no_soft_tri else (1.0 if f.no_hard_tri else self.weights.lambda_tri)
        return dataclasses.replace(self.weights, lambda_id=lam_id, lambda_tri=lam_tri)

    def effective_alpha(self):
        return 0.0 if self.ablation.no_ema else self.alpha

    def to_flat(self):
        flat = {}

        def walk(obj, prefix):
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                key = f"{prefix}{f.name}"
                if dataclasses.is_dataclass(value):
                    walk(value, key + ".")
                else:
                    flat[key] = value

        walk(self, "")
        return flat

    @classmethod
    def from_flat(cls, flat):
        config = cls()
        for key, value in flat.items():
            _assign_flat(config, key, value)
        return config.validate()

    def with_overrides(self, overrides):
        flat = self.to_flat()
        for key, value in overrides.items():
            if key not in flat:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = value
        return RunConfig.from_flat(flat)


def _assign_flat(config, key, value):
    obj = config
    parts = key.split(".")
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    name = parts[-1]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    ftype = {f.name: f.type for f in dataclasses.fields(obj)}[name]
    setattr(obj, name, _coerce(value, ftype, key))


def _coerce(value, ftype, key):
    ftype = str(ftype)
    if "bool" in ftype:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if "int" in ftype:
            return int(value)
        if "float" in ftype:
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return str(value)


STEP_FIELDS = ["step", "epoch", "id1", "id2", "sid1", "sid2", "tri1", "tri2", "stri1", "stri2", "total", "lr", "peer_kl"]
EPOCH_FIELDS = ["epoch", "purity", "map_net1", "map_net2", "map_avg1", "map_avg2", "mean_kl"]


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def write_step_csv(self, path):
        _write_csv(path, STEP_FIELDS, self.steps)

    def write_epoch_csv(self, path):
        _write_csv(path, EPOCH_FIELDS, self.epochs)


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


class Adam:
    """Adam with decoupled weight decay, operating on diffcore tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


@dataclass
class DataBundle:
    """Everything the pipeline needs, with ground truth kept on the
    evaluator's side only."""

    source_train: list
    source_val: list
    target_train: list  # labeled; for the evaluator/monitor
    target_train_hidden: list  # identity-free twin handed to the trainer
    target_test: list


def build_datasets(config):
    """Generate and split source/target data from the config seeds."""
    d = config.data
    source_spec = DomainSpec(
        num_identities=d.source_identities,
        samples_per_identity=d.samples_per_identity,
        input_dim=d.input_dim,
        sigma_between=d.sigma_between,
        sigma_within=d.sigma_within,
        seed=seed_for(config.seeds.data, "source"),
        domain="source",
    )
    t_rng = rng_for(config.seeds.data, "transform")
    transform_a = random_rotation(d.input_dim, t_rng, scale=d.target_scale)
    transform_b = t_rng.normal(scale=d.target_shift, size=d.input_dim) if d.target_shift > 0 else None
    target_spec = DomainSpec(
        num_identities=d.target_identities,
        samples_per_identity=d.samples_per_identity,
        input_dim=d.input_dim,
        sigma_between=d.sigma_between,
        sigma_within=d.sigma_within,
        seed=seed_for(config.seeds.data, "target"),
        domain="target",
        transform_a=transform_a,
        transform_b=transform_b,
    )
    source = datagen.generate(source_spec)
    target = datagen.generate(target_spec)
    source_train, source_val = split_by_identity(source, d.val_fraction, seed_for(config.seeds.data, "srcsplit"))
    target_train, target_test = split_by_identity(target, d.test_fraction, seed_for(config.seeds.data, "tgtsplit"))
    return DataBundle(
        source_train=source_train,
        source_val=source_val,
        target_train=target_train,
        target_train_hidden=strip_identities(target_train),
        target_test=target_test,
    )


def _class_indices(identities):
    classes = sorted(set(identities))
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[i] for i in identities], dtype=int), len(classes)


def pretrain_source(source_data, config):
    """Stage 1: train both networks independently on labeled source batches
    with classification + hinge-triplet losses; learning rate drops 10x at
    50% and 87.5% of the epochs. Averages are synced to the final weights."""
    if not source_data:
        raise ConfigError("pretrain_source: empty source dataset")
    config.validate()
    vectors = np.stack([s.vector for s in source_data])
    labels, num_classes = _class_indices([s.identity for s in source_data])

    pair = init_pair(config, config.seeds.net1, config.seeds.net2, num_classes)
    if config.epochs_pretrain == 0:
        return pair

    opts = [
        Adam(net.tensors(), config.lr_pretrain, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
        for net in (pair.net1, pair.net2)
    ]
    steps_per_epoch = max(1, math.ceil(len(source_data) / (config.p * config.k)))
    milestones = {math.floor(config.epochs_pretrain * 0.5), math.floor(config.epochs_pretrain * 0.875)}
    lr = config.lr_pretrain
    for epoch in range(config.epochs_pretrain):
        if epoch in milestones:
            lr *= 0.1
        for opt in opts:
            opt.lr = lr
        for step in range(steps_per_epoch):
            idx = sample_pk_batch(source_data, labels, config.p, config.k, rng_for(config.seeds.sampler, "pre", epoch, step))
            x = vectors[idx]
            y = labels[idx]
            for net, opt in zip((pair.net1, pair.net2), opts):
                with new_tape():
                    feats = encode(x, net.encoder)
                    probs = classify(feats, net.classifier)
                    mining = mine_hardest(feats, y)
                    loss = hard_ce_loss(probs, y) + config.weights.lambda_source * hard_triplet_loss(
                        feats, mining, config.weights.margin
                    )
                    opt.zero_grad()
                    backward(loss)
                    opt.step()
    pair.avg1 = pair.net1.copy()
    pair.avg2 = pair.net2.copy()
    pair.iteration = 0
    return pair


def adapt_mmt(pair, target_data, config, monitor=None):
    """Stage 2: per epoch, regenerate hard pseudo labels by clustering and
    re-init the pseudo-class heads; per step, read the average models' soft
    predictions (gradient-free), take one joint Adam step on both networks,
    then advance the average models.

    ``target_data`` is a list of identity-free AdaptationSamples. ``monitor``
    (optional) is an evaluator-side callback ``(epoch, pair, labeling) ->
    dict`` merged into the per-epoch log; it is the only place ground truth
    may enter, and it gets read-only use of the pair.
    """
    config.validate()
    train_log = TrainLog()
    if config.epochs_adapt == 0:
        return pair, train_log

    weights = config.effective_weights()
    alpha = config.effective_alpha()
    single = config.ablation.single_network
    vectors = np.stack([s.vector for s in target_data])

    enc_opts = {
        "net1": Adam(pair.net1.encoder.tensors(), config.lr_adapt, config.beta1, config.beta2, config.adam_eps, config.weight_decay),
        "net2": Adam(pair.net2.encoder.tensors(), config.lr_adapt, config.beta1, config.beta2, config.adam_eps, config.weight_decay),
    }
    cls_opts = {}

    global_step = 0
    prev_assignments = None
    for epoch in range(config.epochs_adapt):
        labeling = relabel_epoch(
            pair,
            target_data,
            config.m_t,
            seed=seed_for(config.seeds.cluster, epoch),
            epoch=epoch,
            feature_source=config.cluster_feature_source,
            normalize=config.normalize_cluster_features,
        )
        if config.align_cluster_indices and prev_assignments is not None:
            align_to_previous(labeling, prev_assignments)
            for sample, label in zip(target_data, labeling.assignments):
                sample.pseudo_label = int(label)
        prev_assignments = labeling.assignments
        if epoch == 0 or config.reset_classifier:
            reset_classifiers(
                pair,
                config.m_t,
                rng_for(config.seeds.net1, "cls", epoch),
                rng_for(config.seeds.net2, "cls", epoch),
            )
            for name, net in (("net1", pair.net1), ("net2", pair.net2)):
                cls_opts[name] = Adam(
                    net.classifier.tensors(), config.lr_adapt, config.beta1, config.beta2, config.adam_eps, config.weight_decay
                )
        labels_all = labeling.assignments

        epoch_kls = []
        for step in range(config.iters_adapt):
            idx = sample_pk_batch(target_data, labels_all, config.p, config.k, rng_for(config.seeds.sampler, "adapt", epoch, step))
            raw = vectors[idx]
            batch_labels = labels_all[idx]
            view1, view2 = two_view_batch(raw, config.aug_sigma, config.aug_dropout, rng_for(config.seeds.sampler, "aug", epoch, step))
            batch = ViewBatch(view1=view1, view2=view2)

            with new_tape():
                loss, diag = total_mmt_loss(
                    batch,
                    pair,
                    batch_labels,
                    weights,
                    single_network=single,
                    teacher_own_mining=config.teacher_own_mining,
                )
                active = ("net1",) if single else ("net1", "net2")
                for name in active:
                    enc_opts[name].zero_grad()
                    cls_opts[name].zero_grad()
                backward(loss)
                for name in active:
                    enc_opts[name].step()
                    cls_opts[name].step()

            pair.avg1 = ema_update(pair.avg1, pair.net1, alpha)
            if not single:
                pair.avg2 = ema_update(pair.avg2, pair.net2, alpha)
            pair.iteration += 1

            with no_grad():
                p1 = classify(encode(raw, pair.avg1.encoder), pair.avg1.classifier)
                p2 = classify(encode(raw, pair.avg2.encoder), pair.avg2.classifier) if not single else p1
            kl = peer_kl(p1, p2)
            epoch_kls.append(kl)
            train_log.steps.append({"step": global_step, "epoch": epoch, **diag, "lr": config.lr_adapt, "peer_kl": kl})
            global_step += 1

        row = {
            "epoch": epoch,
            "purity": float("nan"),
            "map_net1": float("nan"),
            "map_net2": float("nan"),
            "map_avg1": float("nan"),
            "map_avg2": float("nan"),
            "mean_kl": float(np.mean(epoch_kls)),
        }
        if monitor is not None:
            row.update(monitor(epoch, pair, labeling))
        train_log.epochs.append(row)
        log.debug("epoch %d: inertia %.4f mean_kl %.5f", epoch, labeling.inertia, row["mean_kl"])
    return pair, train_log


@dataclass
class InferenceChoice:
    name: str  # "avg1" | "avg2"
    network: object
    map_avg1: float
    map_avg2: float


def select_inference_model(pair, validation_set, query_fraction=0.25, seed=0):
    """Pick whichever temporal-average model retrieves the validation set
    better; ties go to avg1. Raw networks are never eligible."""
    if not validation_set:
        raise EvalError("select_inference_model: empty validation set")
    map1 = evaluate_network(pair.avg1, validation_set, query_fraction, seed)["mAP"]
    map2 = evaluate_network(pair.avg2, validation_set, query_fraction, seed)["mAP"]
    if map2 > map1:
        return InferenceChoice("avg2", pair.avg2, map1, map2)
    return InferenceChoice("avg1", pair.avg1, map1, map2)


def copy_pair(pair):
    import copy as _copy

    new = _copy.copy(pair)
    new.net1 = pair.net1.copy(requires_grad=True)
    new.net2 = pair.net2.copy(requires_grad=True)
    new.avg1 = pair.avg1.copy()
    new.avg2 = pair.avg2.copy()
    return new


ABLATION_ROWS = [
    ("baseline", {"ablation.no_soft_id": True, "ablation.no_soft_tri": True}),
    ("only_soft", {"ablation.no_hard_id": True, "ablation.no_hard_tri": True}),
    ("no_hard_id", {"ablation.no_hard_id": True}),
    ("no_hard_tri", {"ablation.no_hard_tri": True}),
    ("no_soft_id", {"ablation.no_soft_id": True}),
    ("no_soft_tri", {"ablation.no_soft_tri": True}),
    ("single_network", {"ablation.single_network": True}),
    ("no_ema", {"ablation.no_ema": True}),
    ("full", {}),
]


def run_ablation_suite(base_config, csv_path=None):
    """Run the nine loss/structure configurations plus a pretrained
    reference at shared seeds; returns rows of retrieval metrics on the
    target test split. Failed rows are marked and the suite continues."""
    base_config.validate()
    bundle = build_datasets(base_config)
    pretrained = pretrain_source(bundle.source_train, base_config)
    rows = []

    def metrics_for(pair, config):
        choice = select_inference_model(pair, bundle.source_val, seed=config.seeds.eval)
        report = evaluate_network(choice.network, bundle.target_test, seed=config.seeds.eval)
        return report

    ref = metrics_for(pretrained, base_config)
    rows.append({"row": "pretrained", "status": "ok", **_metric_cols(ref)})
    for name, overrides in ABLATION_ROWS:
        config = base_config.with_overrides(overrides)
        try:
            pair = copy_pair(pretrained)
            hidden = strip_identities(bundle.target_train)
            pair, _ = adapt_mmt(pair, hidden, config)
            rows.append({"row": name, "status": "ok", **_metric_cols(metrics_for(pair, config))})
        except Exception as exc:  # keep going; a broken row must not sink the table
            log.error("ablation row %s failed: %s", name, exc)
            rows.append({"row": name, "status": f"failed: {exc}", **_metric_cols(None)})
    if csv_path:
        _write_csv(csv_path, ["row", "mAP", "top1", "top5", "top10", "status"], rows)
    return rows


def _metric_cols(report):
    if report is None:
        return {"mAP": "", "top1": "", "top5": "", "top10": ""}
    return {
        "mAP": report["mAP"],
        "top1": report["cmc1"],
        "top5": report["cmc5"],
        "top10": report["cmc10"],
    }
