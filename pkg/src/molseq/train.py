"""Two-stage training protocol, SGD, strategy configurations and sweeps.

A stage trains on PK-sampled batches: both modalities are encoded, the
alignment loss is applied to the similarity matrix, and the sequence
embeddings additionally receive triplet, center and classification
supervision on the stage's labels (drug labels while pretraining, MoA
labels while fine-tuning).  Evaluation always uses sequence embeddings
only, mirroring inference.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import DatasetSplit, Sample, choose_pk, pk_sample_indices, read_kv, split_query_gallery
from .errors import ShapeMismatch
from .losses import (
    CenterState,
    LossWeights,
    build_supervision,
    center_loss,
    classification_ce,
    hard_triplet_loss,
    msc_loss,
    similarity,
    total_loss,
    update_centers,
)
from .metrics import RetrievalResult, accuracy, evaluate_retrieval
from .model import Checkpoint, Model, ModelConfig, pool_frames, save_checkpoint, token_count_matrix
from .smiles import Vocabulary, build_vocabulary, encode_tokens

__all__ = [
    "ConfigError",
    "TrainConfig",
    "load_config",
    "sgd_step",
    "StageResult",
    "run_stage",
    "PipelineResult",
    "run_pipeline",
    "run_strategy",
    "sweep_center_weight",
    "DEFAULT_SWEEP_WEIGHTS",
    "gradient_check_suite",
    "GRAD_TOLERANCE",
]

STAGES = ("pretrain_drug", "finetune_moa")
STRATEGIES = ("S1", "S2", "S3")

# Center-weight schedule: 0.01, then 0.02..0.1 step 0.02, then 0.1..1.0 step 0.2.
DEFAULT_SWEEP_WEIGHTS = [0.01, 0.02, 0.04, 0.06, 0.08, 0.1, 0.3, 0.5, 0.7, 0.9]

GRAD_TOLERANCE = 1e-5


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_p: int = 16
    batch_k: int = 4
    learning_rate: float = 0.001
    momentum: float = 0.9
    w_msc: float = 1.0
    w_triplet: float = 1.0
    w_center: float = 0.1
    w_cls: float = 1.0
    margin: float = 0.3
    temperature: float = 0.07
    temperature_trainable: bool = False
    embed_dim: int = 64
    token_dim: int = 32
    mol_hidden: int = 64
    seq_hidden: int = 64
    max_tokens: int = 80
    seed: int = 0
    stage: str = "pretrain_drug"
    freeze_molecule_encoder: bool | None = None  # None: true iff fine-tuning
    use_molecule_branch: bool = True
    eval_every: int = 20
    msc_direction: str = "both"
    class_matrix_labels: str = "stage"  # which labels fill the class matrix
    center_alpha: float = 0.5
    split_ratio: float = 0.8
    drug_disjoint_split: bool = False

    @property
    def batch_size(self) -> int:
        return self.batch_p * self.batch_k

    @property
    def label_kind(self) -> str:
        return "drug" if self.stage == "pretrain_drug" else "moa"

    @property
    def resolved_freeze(self) -> bool:
        if self.freeze_molecule_encoder is None:
            return self.stage == "finetune_moa"
        return self.freeze_molecule_encoder

    def weights(self) -> LossWeights:
        return LossWeights(msc=self.w_msc, triplet=self.w_triplet, center=self.w_center,
                           cls=self.w_cls, margin=self.margin)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_p < 1 or self.batch_k < 2:
            raise ConfigError("need batch_p >= 1 and batch_k >= 2 for in-batch positives")
        if self.learning_rate <= 0 or self.momentum < 0 or self.center_alpha <= 0 or self.center_alpha > 1:
            raise ConfigError("rates must be positive (center_alpha in (0, 1])")
        if min(self.w_msc, self.w_triplet, self.w_center, self.w_cls, self.margin) < 0:
            raise ConfigError("loss weights and margin must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.msc_direction not in ("both", "row", "col"):
            raise ConfigError("msc_direction must be 'both', 'row' or 'col'")
        if self.class_matrix_labels not in ("stage", "moa"):
            raise ConfigError("class_matrix_labels must be 'stage' or 'moa'")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie in (0, 1)")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _parse_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def load_config(path) -> TrainConfig:
    """Flat key=value config; unknown keys are rejected."""
    defaults = TrainConfig()
    types = {f.name: type(getattr(defaults, f.name)) for f in dataclasses.fields(TrainConfig)}
    types["freeze_molecule_encoder"] = bool
    config = TrainConfig()
    for key, value in read_kv(path).items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind is bool:
                parsed = _parse_bool(key, value)
            else:
                parsed = kind(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        setattr(config, key, parsed)
    config.validate()
    return config


def sgd_step(params, grads: dict[str, np.ndarray], lr: float, momentum: float,
             velocity: dict[str, np.ndarray]) -> None:
    """Momentum SGD: v <- momentum*v + g; p <- p - lr*v.  Frozen params skipped."""
    for name, grad in grads.items():
        p = params[name]
        if not p.trainable:
            continue
        if grad.shape != p.value.shape:
            raise ShapeMismatch("sgd_step", (grad.shape, p.value.shape))
        v = velocity.get(name)
        v = grad.copy() if v is None else momentum * v + grad
        velocity[name] = v
        p.value = p.value - lr * v


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class StageResult:
    config: TrainConfig
    model: Model
    vocab: Vocabulary
    centers: CenterState
    history: list[dict]
    loss_log: list[dict]
    retrieval: RetrievalResult | None = None

    @property
    def final(self) -> dict:
        return self.history[-1]

    def loss_csv(self) -> str:
        if self.config.use_molecule_branch:
            header = "step,msc,triplet,center,cls,total"
            cols = ("msc", "triplet", "center", "cls", "total")
        else:
            header = "step,triplet,center,cls,total"
            cols = ("triplet", "center", "cls", "total")
        lines = [header]
        for row in self.loss_log:
            lines.append(str(row["step"]) + "," + ",".join(_fmt(row[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def metrics_csv(self) -> str:
        lines = ["epoch,accuracy,rank1,rank5,rank10,map"]
        for row in self.history:
            lines.append(
                str(row["epoch"]) + "," + ",".join(_fmt(row[c]) for c in ("accuracy", "rank1", "rank5", "rank10", "map"))
            )
        return "\n".join(lines) + "\n"

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "loss_history.csv").write_text(self.loss_csv())
        (out / "metric_history.csv").write_text(self.metrics_csv())
        save_checkpoint(out / "checkpoint.npz", self.model, self.vocab,
                        extra_config=self.config.to_json(),
                        centers=self.centers.centers, center_alpha=self.centers.alpha)


def _labels(samples: list[Sample], kind: str) -> np.ndarray:
    if kind == "drug":
        return np.array([s.drug_label for s in samples], dtype=np.int64)
    return np.array([s.moa_label for s in samples], dtype=np.int64)


def _pooled(samples: list[Sample]) -> np.ndarray:
    return np.stack([pool_frames(s.frames) for s in samples])


def run_stage(config: TrainConfig, data: DatasetSplit, init: Checkpoint | None = None,
              init_prefixes: tuple[str, ...] = ("mol.", "seq."), out_dir=None) -> StageResult:
    """One training stage over PK batches, with periodic retrieval evals."""
    config.validate()
    label_kind = config.label_kind
    train, test = data.train, data.test
    if not train or not test:
        raise ValueError("run_stage needs non-empty train and test sets")

    vocab = init.vocabulary if init is not None else build_vocabulary(sorted({s.smiles for s in train + test}))
    all_stage_labels = np.concatenate([_labels(train, label_kind), _labels(test, label_kind)])
    num_classes = int(all_stage_labels.max()) + 1
    frame_dim = train[0].frames.shape[1]

    model = Model(ModelConfig(
        vocab_size=vocab.size,
        frame_dim=frame_dim,
        num_classes=num_classes,
        embed_dim=config.embed_dim,
        token_dim=config.token_dim,
        mol_hidden=config.mol_hidden,
        seq_hidden=config.seq_hidden,
        seed=config.seed,
        include_molecule=config.use_molecule_branch,
    ))
    if config.use_molecule_branch and config.temperature_trainable:
        model.params.add("align.log_inv_temp", np.array(np.log(1.0 / config.temperature)))
    if init is not None:
        model.load_parameters(init.parameters, prefixes=init_prefixes)
    if config.resolved_freeze and config.use_molecule_branch:
        model.params.set_trainable("mol.", False)

    # Per-sample features are fixed; precompute them once.
    train_pooled = _pooled(train)
    test_pooled = _pooled(test)
    stage_labels = _labels(train, label_kind)
    class_labels = stage_labels if config.class_matrix_labels == "stage" else _labels(train, "moa")
    counts = None
    if config.use_molecule_branch:
        ids = np.array([encode_tokens(s.smiles, vocab, config.max_tokens) for s in train])
        counts = token_count_matrix(ids, vocab.size)

    # Query/gallery follow the stage's label kind; the MoA-level split made
    # at preparation time is reused as-is for fine-tuning.
    if label_kind == "moa" and data.query:
        query, gallery = data.query, data.gallery
    else:
        query, gallery = split_query_gallery(test, config.seed, label_kind)
    query_pooled, gallery_pooled = _pooled(query), _pooled(gallery)
    query_labels, gallery_labels = _labels(query, label_kind), _labels(gallery, label_kind)
    test_labels = _labels(test, label_kind)

    # Centers start at the initial model's per-class mean embeddings; a zero
    # start would make the center term an enormous pull toward the origin at
    # this scale (sum reduction over a 64-sample batch) and collapse the
    # encoder before the other losses can act.
    centers = CenterState.zeros(num_classes, config.embed_dim, alpha=config.center_alpha)
    init_emb = model.sequence.forward(train_pooled, model.params.as_leaves()).data
    for c in np.unique(stage_labels):
        centers.centers[c] = init_emb[stage_labels == c].mean(axis=0)
    weights = config.weights()
    velocity: dict[str, np.ndarray] = {}
    steps_per_epoch = max(1, len(train) // config.batch_size)
    loss_log: list[dict] = []
    history: list[dict] = []
    retrieval: RetrievalResult | None = None
    step = 0

    def evaluate(epoch: int) -> RetrievalResult:
        leaves = model.params.as_leaves()
        q_emb = model.sequence.forward(query_pooled, leaves).data
        g_emb = model.sequence.forward(gallery_pooled, leaves).data
        result = evaluate_retrieval(q_emb, query_labels, g_emb, gallery_labels)
        t_emb = model.sequence.forward(test_pooled, leaves)
        logits = model.head.forward(t_emb, leaves).data
        history.append({
            "epoch": epoch,
            "accuracy": accuracy(logits, test_labels),
            "rank1": result.rank1,
            "rank5": result.rank5,
            "rank10": result.rank10,
            "map": result.map,
        })
        return result

    for epoch in range(1, config.epochs + 1):
        for _ in range(steps_per_epoch):
            idx = pk_sample_indices(train, config.batch_p, config.batch_k, label_kind, config.seed, step)
            batch_labels = stage_labels[idx]
            leaves = model.params.as_leaves()
            v_emb = model.sequence.forward(train_pooled[idx], leaves)
            components: dict[str, ad.Tensor | None] = {}
            if config.use_molecule_branch:
                s_emb = model.molecule.forward_counts(counts[idx], leaves)
                sup = build_supervision(class_labels[idx])
                temp = leaves["align.log_inv_temp"] if config.temperature_trainable else config.temperature
                sim = similarity(s_emb, v_emb, temp)
                components["msc"] = msc_loss(sim, sup, config.msc_direction)
            components["triplet"] = hard_triplet_loss(v_emb, batch_labels, config.margin)
            components["center"] = center_loss(v_emb, batch_labels, centers)
            logits = model.head.forward(v_emb, leaves)
            components["cls"] = classification_ce(logits, batch_labels)
            total, report = total_loss(components, weights)
            ad.backward(total)
            grads = {n: t.grad for n, t in leaves.items() if t.grad is not None}
            sgd_step(model.params, grads, config.learning_rate, config.momentum, velocity)
            update_centers(centers, v_emb.data, batch_labels)
            report["step"] = step
            loss_log.append(report)
            step += 1
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            retrieval = evaluate(epoch)

    result = StageResult(config=config, model=model, vocab=vocab, centers=centers,
                         history=history, loss_log=loss_log, retrieval=retrieval)
    if out_dir is not None:
        result.save(out_dir)
    return result


def _checkpoint_of(result: StageResult) -> Checkpoint:
    return Checkpoint(
        model_config=result.model.config,
        extra_config=result.config.to_json(),
        vocabulary=result.vocab,
        parameters={n: p.value for n, p in result.model.params.items()},
        trainable={n: p.trainable for n, p in result.model.params.items()},
        centers=result.centers.centers,
        center_alpha=result.centers.alpha,
    )


def _fit_pk(config: TrainConfig, data: DatasetSplit, label_kind: str) -> TrainConfig:
    """Adjust (P, K) to the dataset's class count, keeping P*K fixed."""
    num_classes = len({_label_of_kind(s, label_kind) for s in data.train})
    p, k = choose_pk(config.batch_size, num_classes)
    if (p, k) == (config.batch_p, config.batch_k):
        return config
    return replace(config, batch_p=p, batch_k=k)


def _label_of_kind(sample: Sample, kind: str) -> int:
    return sample.drug_label if kind == "drug" else sample.moa_label


@dataclass
class PipelineResult:
    warmup: StageResult      # sequence-only drug training
    pretrain: StageResult    # dual-branch drug training
    finetune: StageResult    # MoA fine-tuning with frozen molecule encoder

    @property
    def final(self) -> dict:
        return self.finetune.final


def run_strategy(strategy: str, data: DatasetSplit, base: TrainConfig, out_dir=None):
    """Drug-recognition training strategies.

    S1: sequence encoder only (no alignment branch, no molecule encoder).
    S2: full dual-branch model from fresh initialization.
    S3: dual-branch model whose sequence encoder starts from S1's weights.
    Returns (report, StageResult of the last run).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    out = Path(out_dir) if out_dir is not None else None
    drug_cfg = _fit_pk(replace(base, stage="pretrain_drug"), data, "drug")

    def report_of(result: StageResult, initialization: str) -> dict:
        row = dict(result.final)
        row.pop("epoch")
        row["strategy"] = strategy
        row["initialization"] = initialization
        return row

    if strategy == "S1":
        cfg = replace(drug_cfg, use_molecule_branch=False)
        result = run_stage(cfg, data, out_dir=out and out / "seq_only")
        return report_of(result, "fresh"), result
    if strategy == "S2":
        cfg = replace(drug_cfg, use_molecule_branch=True)
        result = run_stage(cfg, data, out_dir=out and out / "dual_fresh")
        return report_of(result, "fresh"), result
    warm = run_stage(replace(drug_cfg, use_molecule_branch=False), data, out_dir=out and out / "seq_only")
    cfg = replace(drug_cfg, use_molecule_branch=True)
    result = run_stage(cfg, data, init=_checkpoint_of(warm), init_prefixes=("seq.",),
                       out_dir=out and out / "dual_warm")
    return report_of(result, "s1_warm_start"), result


def run_pipeline(data: DatasetSplit, base: TrainConfig, out_dir=None) -> PipelineResult:
    """Full protocol: S3-style drug pretraining, then MoA fine-tuning."""
    out = Path(out_dir) if out_dir is not None else None
    drug_cfg = _fit_pk(replace(base, stage="pretrain_drug"), data, "drug")
    warmup = run_stage(replace(drug_cfg, use_molecule_branch=False), data,
                       out_dir=out and out / "warmup")
    pretrain = run_stage(replace(drug_cfg, use_molecule_branch=True), data,
                         init=_checkpoint_of(warmup), init_prefixes=("seq.",),
                         out_dir=out and out / "pretrain")
    moa_cfg = _fit_pk(replace(base, stage="finetune_moa", freeze_molecule_encoder=None), data, "moa")
    finetune = run_stage(moa_cfg, data, init=_checkpoint_of(pretrain),
                         init_prefixes=("mol.", "seq."), out_dir=out and out / "finetune")
    return PipelineResult(warmup=warmup, pretrain=pretrain, finetune=finetune)


def sweep_center_weight(base: TrainConfig, weights: list[float], data: DatasetSplit, out_dir=None):
    """One full pipeline per center-loss weight; everything else fixed."""
    if not weights:
        raise ValueError("weights must be non-empty")
    if min(weights) < 0:
        raise ValueError("weights must be non-negative")
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for w in weights:
        result = run_pipeline(data, replace(base, w_center=float(w)),
                              out_dir=out and out / f"w{w:g}")
        final = result.final
        rows.append({"weight": float(w), "rank1": final["rank1"], "map": final["map"],
                     "accuracy": final["accuracy"]})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        lines = ["weight,rank1,map,accuracy"]
        for row in rows:
            lines.append(",".join(_fmt(row[c]) for c in ("weight", "rank1", "map", "accuracy")))
        (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    return rows


# ---------------------------------------------------------------------------
# Finite-difference gradient suite
# ---------------------------------------------------------------------------


def _triplet_safe(rng: np.random.Generator, b: int, d: int):
    """Features whose mining decisions sit clear of ties and hinge kinks."""
    labels = np.arange(b) % 2
    while True:
        feats = rng.normal(scale=1.5, size=(b, d))
        dists = ((feats[:, None, :] - feats[None, :, :]) ** 2).sum(axis=2)
        off = dists[~np.eye(b, dtype=bool)]
        gaps = np.abs(off[:, None] - off[None, :])
        if np.min(gaps[gaps > 0], initial=np.inf) < 1e-3:
            continue
        same = labels[:, None] == labels[None, :]
        pos = np.where(same & ~np.eye(b, dtype=bool), dists, -np.inf).max(axis=1)
        neg = np.where(~same, dists, np.inf).min(axis=1)
        if np.abs(pos - neg + 0.3).min() > 1e-3:
            return feats, labels


def gradient_check_suite(eps: float = 1e-5) -> list[tuple[str, float]]:
    """Central finite-difference checks for every loss and both encoders."""
    rng = np.random.default_rng(20240917)
    b, d = 4, 8
    labels = np.array([0, 0, 1, 1])
    checks: list[tuple[str, float]] = []

    s0 = rng.normal(size=(b, d))
    v0 = rng.normal(size=(b, d))

    def f_msc(leaves):
        sim = similarity(leaves[0], leaves[1], 0.07)
        return msc_loss(sim, build_supervision(labels))

    checks.append(("msc_loss", ad.finite_difference_check(f_msc, [s0, v0], eps)))

    feats, tri_labels = _triplet_safe(rng, 8, 4)
    checks.append((
        "hard_triplet_loss",
        ad.finite_difference_check(lambda l: hard_triplet_loss(l[0], tri_labels, 0.3), [feats], eps),
    ))

    state = CenterState(centers=rng.normal(size=(2, d)))
    checks.append((
        "center_loss",
        ad.finite_difference_check(lambda l: center_loss(l[0], labels, state), [v0], eps),
    ))

    logits0 = rng.normal(size=(b, 3))
    cls_labels = np.array([0, 2, 1, 0])
    checks.append((
        "classification_ce",
        ad.finite_difference_check(lambda l: classification_ce(l[0], cls_labels), [logits0], eps),
    ))

    # Both encoders, checked through a fixed scalar projection of their output.
    vocab_size, token_dim, hidden, out_dim = 9, 4, 5, 6
    ids = np.array([[2, 3, 3, 0, 0], [4, 5, 6, 7, 0], [8, 2, 0, 0, 0], [5, 5, 5, 5, 5]])
    counts = token_count_matrix(ids, vocab_size)
    proj = rng.normal(size=(out_dim, 1))
    mol_shapes = [(vocab_size, token_dim), (token_dim, hidden), (hidden,), (hidden, out_dim), (out_dim,)]
    mol_params = [rng.normal(scale=0.5, size=s) for s in mol_shapes]

    def f_mol(leaves):
        names = ("mol.emb", "mol.w1", "mol.b1", "mol.w2", "mol.b2")
        lv = dict(zip(names, leaves))
        pooled = ad.matmul(ad.constant(counts), lv["mol.emb"])
        h = ad.tanh(ad.add(ad.matmul(pooled, lv["mol.w1"]), lv["mol.b1"]))
        out = ad.add(ad.matmul(h, lv["mol.w2"]), lv["mol.b2"])
        return ad.sum_(ad.matmul(out, ad.constant(proj)))

    checks.append(("molecule_encoder", ad.finite_difference_check(f_mol, mol_params, eps)))

    frame_dim = 4
    pooled_frames = rng.normal(size=(b, 2 * frame_dim))
    seq_shapes = [(2 * frame_dim, hidden), (hidden,), (hidden, out_dim), (out_dim,)]
    seq_params = [rng.normal(scale=0.5, size=s) for s in seq_shapes]

    def f_seq(leaves):
        w1, b1, w2, b2 = leaves
        h = ad.relu(ad.add(ad.matmul(ad.constant(pooled_frames), w1), b1))
        out = ad.add(ad.matmul(h, w2), b2)
        return ad.sum_(ad.matmul(out, ad.constant(proj)))

    checks.append(("sequence_encoder", ad.finite_difference_check(f_seq, seq_params, eps)))

    # Full model composed with the weighted total loss.
    head_params = [rng.normal(scale=0.5, size=(out_dim, 2)), rng.normal(scale=0.5, size=(2,))]
    tri_feats_fix, _ = _triplet_safe(rng, b, out_dim)
    full_params = mol_params + seq_params + head_params
    full_weights = LossWeights()
    full_state = CenterState(centers=rng.normal(size=(2, out_dim)))

    def f_full(leaves):
        m = leaves[:5]
        s = leaves[5:9]
        h = leaves[9:]
        names = ("mol.emb", "mol.w1", "mol.b1", "mol.w2", "mol.b2")
        lv = dict(zip(names, m))
        pooled = ad.matmul(ad.constant(counts), lv["mol.emb"])
        s_emb = ad.add(ad.matmul(ad.tanh(ad.add(ad.matmul(pooled, lv["mol.w1"]), lv["mol.b1"])), lv["mol.w2"]), lv["mol.b2"])
        hh = ad.relu(ad.add(ad.matmul(ad.constant(pooled_frames), s[0]), s[1]))
        v_emb = ad.add(ad.add(ad.matmul(hh, s[2]), s[3]), ad.constant(tri_feats_fix))
        logits = ad.add(ad.matmul(v_emb, h[0]), h[1])
        sim = similarity(s_emb, v_emb, 0.07)
        components = {
            "msc": msc_loss(sim, build_supervision(labels)),
            "triplet": hard_triplet_loss(v_emb, labels, 0.3),
            "center": center_loss(v_emb, labels, full_state),
            "cls": classification_ce(logits, labels),
        }
        return total_loss(components, full_weights)[0]

    checks.append(("full_model_total", ad.finite_difference_check(f_full, full_params, eps)))
    return checks
