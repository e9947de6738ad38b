"""Two-stage training, transductive embedding and evaluation across modality pairs."""

import hashlib
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import hsl, metrics, rce
from .autodiff import no_grad
from .dataset import FeatureSet, modality_pairs
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

# Ablation variants.  "category-center" consumes labels and is only run on request.
VARIANTS = {
    "full": {},
    "direct-center": {"direct_center": True},
    "category-center": {"category_center": True},
    "no-modality-edges": {"families": ("object", "knn")},
    "no-modality-object-edges": {"families": ("knn",)},
    "gcn": {"structure": "gcn"},
    "mlp": {"structure": "mlp"},
}
SELF_SUPERVISED_VARIANTS = [v for v in VARIANTS if v != "category-center"]
ABLATION_LABELS = {
    "full": "RCE+HSL",
    "direct-center": "Direct Center",
    "category-center": "Category Center",
    "no-modality-edges": "HSL w/o E_m",
    "no-modality-object-edges": "HSL w/o E_m&E_o",
    "gcn": "GCN-based HSL",
    "mlp": "MLP-based HSL",
}


@dataclass
class PipelineConfig:
    alpha: float = 0.5
    tau: float = 0.75
    k: int = 10
    n_anchors: int = 64
    unified_dim: int = 64
    anchor_dim: int = 64
    hidden: int = 0
    conv_layers: int = 1
    conv_hidden: int = 64
    epochs_rce: int = 40
    lr_rce: float = 0.1
    batch_size: int = 32
    reconstruction_weight: float = 1.0
    epochs_hsl: int = 120
    lr_hsl: float = 0.001
    seed: int = 2022
    variant: str = "full"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        for name in ("k", "n_anchors", "unified_dim", "anchor_dim", "conv_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs_rce", "epochs_hsl", "hidden", "batch_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr_rce < 0 or self.lr_hsl < 0:
            raise ConfigError("learning rates must be non-negative")

    def to_text(self):
        return "".join(f"{key}={value}\n" for key, value in asdict(self).items())

    @classmethod
    def from_mapping(cls, entries):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in entries.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                kwargs[key] = value if kind in (str, "str") else (int if kind in (int, "int") else float)(value)
            except ValueError:
                raise ConfigError(f"bad value {value!r} for {key}") from None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text):
        entries = {}
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                key, sep, value = line.partition("=")
                if not sep:
                    raise ConfigError(f"config line without '=': {line!r}")
                entries[key.strip()] = value.strip()
        return cls.from_mapping(entries)

    def sha256(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def hsl_config(self):
        spec = VARIANTS[self.variant]
        return hsl.HslConfig(
            tau=self.tau,
            k=self.k,
            n_anchors=self.n_anchors,
            anchor_dim=self.anchor_dim,
            conv_layers=self.conv_layers,
            hidden=self.conv_hidden,
            families=spec.get("families", hsl.EDGE_FAMILIES),
            structure=spec.get("structure", "hypergraph"),
        )

    @property
    def uses_labels(self):
        return VARIANTS[self.variant].get("category_center", False)


class FeatureScaler:
    """Per-modality centering and a single scale per modality, fitted on training data."""

    def __init__(self, mean, scale):
        self.mean = np.asarray(mean, dtype=np.float64)    # M x d0
        self.scale = np.asarray(scale, dtype=np.float64)  # M

    @classmethod
    def fit(cls, fs):
        x = fs.features.astype(np.float64)
        mean = x.mean(axis=1)
        scale = x.std(axis=1).mean(axis=1)
        scale = np.where(scale > 0, scale, 1.0)
        # stored as float32 in checkpoints, so round now
        return cls(mean.astype(np.float32), scale.astype(np.float32))

    def transform(self, fs):
        x = (fs.features.astype(np.float64) - self.mean[:, None, :]) / self.scale[:, None, None]
        return [x[r] for r in range(fs.n_modalities)]


@dataclass
class TrainedPipeline:
    config: PipelineConfig
    scaler: FeatureScaler
    rce_model: rce.RceModel
    hsl_model: hsl.HslModel
    rce_history: list
    hsl_history: list

    def tensors(self):
        """All learned tensors in checkpoint order."""
        out = [t for _, t in self.rce_model.named_tensors()]
        out += [layer.theta for layer in self.hsl_model.layers]
        out.append(self.hsl_model.bank.anchors)
        return out


def freeze(tensors):
    """Round parameters to float32 so in-memory and checkpointed models agree."""
    for t in tensors:
        t.data = t.data.astype(np.float32).astype(np.float64)
        t.grad = None


class _ScaledFeatures:
    """Unlabelled float64 view handed to ``train_rce``."""

    labels = None

    def __init__(self, blocks):
        self.blocks = blocks

    @property
    def n_modalities(self):
        return len(self.blocks)

    @property
    def n_objects(self):
        return self.blocks[0].shape[0]

    def modality(self, r):
        return self.blocks[r]


def train_pipeline(fs, config=None, category_labels=None):
    """Train RCE then HSL on ``fs``, which must carry no labels.

    ``category_labels`` is only accepted for the label-consuming
    ``category-center`` variant.
    """
    config = config or PipelineConfig()
    if fs.labels is not None:
        raise ContractError("training takes an unlabelled FeatureSet; call without_labels()")
    if config.uses_labels and category_labels is None:
        raise ContractError("the category-center variant needs explicit category labels")
    if not config.uses_labels and category_labels is not None:
        raise ContractError("category labels are only used by the category-center variant")

    scaler = FeatureScaler.fit(fs)
    blocks = scaler.transform(fs)
    model = rce.RceModel(
        fs.n_modalities, fs.feature_dim, config.unified_dim, config.hidden, config.seed,
        direct_center=VARIANTS[config.variant].get("direct_center", False),
    )
    rce_history = rce.train_rce(
        model, _ScaledFeatures(blocks), config.epochs_rce, config.lr_rce, config.alpha,
        config.reconstruction_weight, config.batch_size, config.seed, category_labels,
    )
    freeze(model.parameters())

    with no_grad():
        outputs = rce.forward(model, blocks)
    vertices = hsl.build_vertices(outputs.recon, outputs.residual, config.tau)
    hsl_model = hsl.train_hsl(
        vertices, fs.n_modalities, fs.n_objects, config.hsl_config(),
        config.epochs_hsl, config.lr_hsl, config.seed,
    )
    freeze(hsl_model.parameters())
    return TrainedPipeline(config, scaler, model, hsl_model, rce_history, list(hsl_model.history))


def embed_pipeline(trained, fs):
    """Aligned embeddings (M x N x d_z) of every object in ``fs``; labels are ignored."""
    blocks = trained.scaler.transform(fs)
    with no_grad():
        outputs = rce.forward(trained.rce_model, blocks)
    vertices = hsl.build_vertices(outputs.recon, outputs.residual, trained.config.tau)
    return hsl.embed_vertices(trained.hsl_model, vertices, fs.n_modalities, fs.n_objects)


def pair_name(names, q, t):
    return f"{names[q]}2{names[t]}"


def evaluate_embeddings(embeddings, labels, modality_names=None, n_points=11):
    """MetricReport for each ordered (query, target) modality pair."""
    embeddings = np.asarray(embeddings)
    m = embeddings.shape[0]
    names = modality_names or tuple(str(r) for r in range(m))
    reports = {}
    for q, t in modality_pairs(m):
        rr = metrics.rank(embeddings[q], embeddings[t], labels, labels)
        reports[pair_name(names, q, t)] = metrics.evaluate(rr, n_points)
    return reports


def mean_scalars(reports):
    keys = ("mAP", "NDCG", "ANMRR")
    return {k: float(np.mean([r.scalars()[k] for r in reports.values()])) for k in keys}


def random_baseline_map(labels, n_modalities, rounds=20, seed=2022):
    """mAP of uniformly random target orderings, averaged over pairs and rounds."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(rounds):
        for _pair in modality_pairs(n_modalities):
            rel = [labels[rng.permutation(labels.size)] == label for label in labels]
            values.append(metrics.mean_average_precision(metrics.RankedRetrieval.from_relevance(rel)))
    return float(np.mean(values))


def raw_baseline_map(fs):
    """Cross-modal cosine retrieval on the untouched input features."""
    reports = evaluate_embeddings(fs.features.astype(np.float64), fs.labels, fs.modality_names)
    return mean_scalars(reports)["mAP"]


def run_variant(train_fs, test_fs, config, category_labels=None):
    trained = train_pipeline(train_fs, config, category_labels)
    embeddings = embed_pipeline(trained, test_fs)
    reports = evaluate_embeddings(embeddings, test_fs.labels, test_fs.modality_names)
    return trained, embeddings, reports


def ablate(fs, split, base_config=None, variants=None, use_labels=False):
    """Retrain end to end for each variant and collect averaged metrics."""
    base_config = base_config or PipelineConfig()
    variants = list(variants or SELF_SUPERVISED_VARIANTS)
    if use_labels and "category-center" not in variants:
        variants.append("category-center")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}")
    if "category-center" in variants and not use_labels:
        raise ContractError("category-center consumes labels; enable use_labels explicitly")
    train = fs.subset(split.train_indices)
    test = fs.subset(split.test_indices)
    rows = {}
    for variant in variants:
        config = PipelineConfig(**{**asdict(base_config), "variant": variant})
        labels = train.labels if config.uses_labels else None
        _, _, reports = run_variant(train.without_labels(), test, config, labels)
        rows[variant] = mean_scalars(reports)
        log.info("variant %s: %s", variant, rows[variant])
    return rows


def benchmark(fs, split, config=None):
    """Full pipeline on the unseen categories of ``split`` plus both baselines."""
    config = config or PipelineConfig()
    train = fs.subset(split.train_indices)
    test = fs.subset(split.test_indices)
    trained, embeddings, reports = run_variant(train.without_labels(), test, config)
    return {
        "trained": trained,
        "embeddings": embeddings,
        "reports": reports,
        "mean": mean_scalars(reports),
        "random_map": random_baseline_map(test.labels, fs.n_modalities, seed=config.seed),
        "raw_map": raw_baseline_map(test),
    }


def as_feature_set(embeddings, labels=None, modality_names=None):
    return FeatureSet(np.asarray(embeddings), labels, modality_names)
