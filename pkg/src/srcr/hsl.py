"""Hierarchical structure learning over a heterogeneous hypergraph.

Vertices are the fused per-modality embeddings of every object, one row per
(object, modality) pair in modality-major order: row ``r * N + i``.
Three hyperedge families connect them:

* ``modality`` -- one edge per modality holding its N vertices,
* ``object``   -- one edge per object holding its M vertices,
* ``knn``      -- one edge per vertex holding it and its k nearest neighbours.

A degree-normalized hypergraph convolution smooths the vertices, and a bank of
learned anchors re-expresses each smoothed vertex as a softmax-weighted anchor
average.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import SGD, Tensor, matmul, no_grad
from .errors import ConfigError, ContractError, ShapeError, StructuralError
from .nn import uniform_init

log = logging.getLogger(__name__)

EDGE_FAMILIES = ("modality", "object", "knn")
STRUCTURES = ("hypergraph", "gcn", "mlp")


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def build_vertices(recon, residual, tau=0.75):
    """Stack ``tau * fhat + (1 - tau) * delta`` for every modality, modality-major."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    if len(recon) != len(residual):
        raise ShapeError("recon and residual need one entry per modality")
    rows = []
    for fhat, delta in zip(recon, residual):
        fhat, delta = _array(fhat), _array(delta)
        if fhat.shape != delta.shape:
            raise ShapeError(f"fhat {fhat.shape} and delta {delta.shape} differ")
        rows.append(tau * fhat + (1.0 - tau) * delta)
    return np.vstack(rows)


def vertex_index(i, r, n_objects):
    return r * n_objects + i


# ---------------------------------------------------------------------------
# Structure


def pairwise_sq_distances(vertices):
    """Exact squared Euclidean distances computed from row differences.

    Differences (rather than the Gram-matrix expansion) keep duplicate rows at
    distance exactly zero, which the tie-breaking rule relies on.
    """
    v = np.asarray(vertices, dtype=np.float64)
    out = np.empty((v.shape[0], v.shape[0]))
    for i in range(v.shape[0]):
        diff = v - v[i]
        out[i] = np.einsum("ij,ij->i", diff, diff)
    return out


def knn_indices(vertices, k):
    """The ``k`` nearest other vertices of each vertex; ties go to the lower index."""
    n = len(vertices)
    if not 1 <= k < n:
        raise StructuralError(f"k={k} must satisfy 1 <= k < {n} vertices")
    dist = pairwise_sq_distances(vertices)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        order = order[order != i]
        out[i] = order[:k]
    return out


@dataclass
class Hypergraph:
    vertices: np.ndarray
    incidence: np.ndarray          # |V| x |E| 0/1
    edge_weights: np.ndarray       # |E|
    edge_tags: list                # family name per edge
    n_modalities: int
    n_objects: int
    k: int = 0

    @property
    def n_vertices(self):
        return self.incidence.shape[0]

    @property
    def n_edges(self):
        return self.incidence.shape[1]

    def vertex_degrees(self):
        return self.incidence @ self.edge_weights

    def edge_degrees(self):
        return self.incidence.sum(axis=0)

    def edges(self, family):
        cols = [j for j, tag in enumerate(self.edge_tags) if tag == family]
        return self.incidence[:, cols]

    def propagation(self):
        """``Dv^-1/2 H W De^-1 H^T Dv^-1/2`` as a dense |V| x |V| matrix."""
        return hypergraph_propagation(self.incidence, self.edge_weights)


def hypergraph_propagation(incidence, edge_weights=None):
    h = np.asarray(incidence, dtype=np.float64)
    w = np.ones(h.shape[1]) if edge_weights is None else np.asarray(edge_weights, dtype=np.float64)
    dv = h @ w
    de = h.sum(axis=0)
    if np.any(dv <= 0):
        bad = np.flatnonzero(dv <= 0)
        raise StructuralError(f"vertices {bad[:5].tolist()} have zero degree")
    if np.any(de <= 0):
        raise StructuralError("hypergraph contains an empty hyperedge")
    dv_inv_sqrt = 1.0 / np.sqrt(dv)
    left = dv_inv_sqrt[:, None] * h * (w / de)[None, :]
    right = (h * dv_inv_sqrt[:, None]).T
    return left @ right


def build_hyperedges(vertices, n_modalities, n_objects, k=10, families=EDGE_FAMILIES):
    """Incidence matrix of the requested hyperedge families, in family order."""
    v = np.asarray(vertices, dtype=np.float64)
    m, n = n_modalities, n_objects
    if v.shape[0] != m * n:
        raise ShapeError(f"expected {m * n} vertices for M={m}, N={n}, got {v.shape[0]}")
    unknown = set(families) - set(EDGE_FAMILIES)
    if unknown:
        raise ConfigError(f"unknown hyperedge families {sorted(unknown)}")
    columns, tags = [], []
    rows = np.arange(m * n)
    if "modality" in families:
        for r in range(m):
            col = np.zeros(m * n)
            col[r * n:(r + 1) * n] = 1.0
            columns.append(col)
            tags.append("modality")
    if "object" in families:
        for i in range(n):
            col = np.zeros(m * n)
            col[rows % n == i] = 1.0
            columns.append(col)
            tags.append("object")
    if "knn" in families:
        neighbours = knn_indices(v, k)
        for i in range(m * n):
            col = np.zeros(m * n)
            col[i] = 1.0
            col[neighbours[i]] = 1.0
            columns.append(col)
            tags.append("knn")
    if not columns:
        raise ConfigError("no hyperedge family selected")
    incidence = np.stack(columns, axis=1)
    return Hypergraph(v, incidence, np.ones(incidence.shape[1]), tags, m, n,
                      k if "knn" in families else 0)


def gcn_propagation(vertices, k=10):
    """Symmetric-normalized KNN graph with self loops: ``D^-1/2 (A + I) D^-1/2``."""
    v = np.asarray(vertices, dtype=np.float64)
    neighbours = knn_indices(v, k)
    n = len(v)
    adj = np.zeros((n, n))
    adj[np.repeat(np.arange(n), k), neighbours.ravel()] = 1.0
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 1.0)
    d_inv_sqrt = 1.0 / np.sqrt(adj.sum(axis=1))
    return d_inv_sqrt[:, None] * adj * d_inv_sqrt[None, :]


# ---------------------------------------------------------------------------
# Convolution and memory bank


class HgnnLayer:
    def __init__(self, in_dim, out_dim, rng, activation="relu"):
        if activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.theta = uniform_init(rng, in_dim, (in_dim, out_dim))
        self.activation = activation

    def parameters(self):
        return [self.theta]


def hypergraph_conv(propagation, layer, x):
    """``sigma(P X Theta)``; ``propagation`` is a Hypergraph or a precomputed P."""
    p = propagation.propagation() if isinstance(propagation, Hypergraph) else propagation
    x = x if isinstance(x, Tensor) else Tensor(x)
    p = p if isinstance(p, Tensor) else Tensor(p)
    if p.cols != x.rows:
        raise ShapeError(f"propagation is {p.shape} but X has {x.rows} rows")
    out = matmul(matmul(p, x), layer.theta)
    return out.relu() if layer.activation == "relu" else out


class MemoryBank:
    """``L`` anchors of dimension ``d_z`` shared by all modalities."""

    def __init__(self, anchors):
        anchors = anchors if isinstance(anchors, Tensor) else Tensor(anchors, requires_grad=True)
        if anchors.rows < 1:
            raise ConfigError("memory bank needs at least one anchor")
        if not np.all(np.isfinite(anchors.data)):
            raise ConfigError("anchors must be finite")
        self.anchors = anchors

    @property
    def size(self):
        return self.anchors.rows

    @property
    def dim(self):
        return self.anchors.cols

    def parameters(self):
        return [self.anchors]


def memory_logits(bank, v):
    """Activation scores ``-||v - a_j||^2 / sqrt(d_z)``."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    if v.cols != bank.dim:
        raise ShapeError(f"embedding dim {v.cols} != anchor dim {bank.dim}")
    a = bank.anchors
    sq_v = (v * v).sum_rows()
    sq_a = (a * a).sum_rows().T
    cross = matmul(v, a.T)
    return (sq_v - cross.scale(2.0) + sq_a).scale(-1.0 / np.sqrt(bank.dim))


def memory_scores(bank, v):
    return memory_logits(bank, v).softmax_rows()


def memory_rebuild(bank, scores):
    return matmul(scores, bank.anchors)


def loss_mr(v, z):
    """Mean Euclidean distance between smoothed vertices and their rebuilds."""
    if v.shape != z.shape:
        raise ShapeError(f"shapes {v.shape} and {z.shape} differ")
    return (v - z).l2norm_rows().mean()


# ---------------------------------------------------------------------------
# Model, training, inference


@dataclass
class HslConfig:
    tau: float = 0.75
    k: int = 10
    n_anchors: int = 64
    anchor_dim: int = 64
    conv_layers: int = 1
    hidden: int = 64
    families: tuple = EDGE_FAMILIES
    structure: str = "hypergraph"

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ConfigError(f"unknown structure {self.structure!r}; choose from {STRUCTURES}")
        if self.conv_layers < 1:
            raise ConfigError("need at least one convolution layer")
        if self.n_anchors < 1:
            raise ConfigError("need at least one anchor")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        self.families = tuple(self.families)


@dataclass
class HslModel:
    config: HslConfig
    layers: list
    bank: MemoryBank
    history: list = field(default_factory=list)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()] + self.bank.parameters()


def make_layers(in_dim, config, rng):
    dims = [in_dim] + [config.hidden] * (config.conv_layers - 1) + [config.anchor_dim]
    return [
        HgnnLayer(dims[j], dims[j + 1], rng, "relu" if j < len(dims) - 2 else "identity")
        for j in range(len(dims) - 1)
    ]


def structure_matrix(vertices, n_modalities, n_objects, config):
    """Propagation matrix for the configured structure variant."""
    if config.structure == "mlp":
        return np.eye(len(vertices))
    if config.structure == "gcn":
        return gcn_propagation(vertices, config.k)
    return build_hyperedges(vertices, n_modalities, n_objects, config.k, config.families).propagation()


def smooth(layers, propagation, vertices):
    x = Tensor(vertices)
    p = Tensor(propagation)
    for layer in layers:
        x = hypergraph_conv(p, layer, x)
    return x


def hsl_forward(model, propagation, vertices):
    smoothed = smooth(model.layers, propagation, vertices)
    scores = memory_scores(model.bank, smoothed)
    return smoothed, scores, memory_rebuild(model.bank, scores)


def train_hsl(vertices, n_modalities, n_objects, config=None, epochs=120, lr=0.001, seed=2022):
    """Fit convolution weights and anchors on the memory reconstruction loss.

    ``vertices`` come from a frozen RCE stage and are treated as constants.
    Returns the trained :class:`HslModel`; its ``history`` holds the loss
    recorded before each step.
    """
    config = config or HslConfig()
    vertices = np.asarray(vertices, dtype=np.float64)
    propagation = structure_matrix(vertices, n_modalities, n_objects, config)
    rng = np.random.default_rng(seed)
    layers = make_layers(vertices.shape[1], config, rng)
    with no_grad():
        initial = smooth(layers, propagation, vertices).data
    pick = rng.choice(len(initial), size=config.n_anchors, replace=config.n_anchors > len(initial))
    bank = MemoryBank(Tensor(initial[np.sort(pick)].copy(), requires_grad=True))
    model = HslModel(config, layers, bank)

    opt = SGD(model.parameters(), lr)
    for epoch in range(epochs):
        opt.zero_grad()
        smoothed, _, rebuilt = hsl_forward(model, propagation, vertices)
        loss = loss_mr(smoothed, rebuilt)
        loss.backward()
        opt.step()
        model.history.append(loss.item())
        log.debug("hsl epoch %d loss %.6f", epoch + 1, model.history[-1])
    return model


def embed_vertices(model, vertices, n_modalities, n_objects):
    """Aligned embeddings z for a vertex matrix, shaped M x N x d_z."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if model.config.structure != "mlp" and model.config.k >= len(vertices):
        raise StructuralError(f"k={model.config.k} needs more than {len(vertices)} vertices")
    propagation = structure_matrix(vertices, n_modalities, n_objects, model.config)
    with no_grad():
        _, _, rebuilt = hsl_forward(model, propagation, vertices)
    return rebuilt.data.reshape(n_modalities, n_objects, -1)


def embed(rce_model, hsl_model, fs):
    """Run the frozen two-stage pipeline transductively over ``fs``.

    Labels in ``fs`` are never looked at.
    """
    from . import rce

    if fs.n_modalities != rce_model.n_modalities:
        raise ContractError(f"model expects {rce_model.n_modalities} modalities, got {fs.n_modalities}")
    features = [fs.modality(r) for r in range(fs.n_modalities)]
    with no_grad():
        outputs = rce.forward(rce_model, features)
    vertices = build_vertices(outputs.recon, outputs.residual, hsl_model.config.tau)
    return embed_vertices(hsl_model, vertices, fs.n_modalities, fs.n_objects)
