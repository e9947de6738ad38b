"""Residual-center embedding: nested per-modality auto-encoders and their losses.

Shapes, per modality ``r`` and a batch of ``N`` objects::

    f      N x d0   basic features
    u_r    N x du   outer encoding        u_r   = enc_out(f)
    fhat   N x d0   outer reconstruction  fhat  = dec_out(u_r)
    delta  N x d0   residual              delta = enc_in(fhat + e_r)
    c_r    N x du   residual center       c_r   = dec_in(fhat + delta)
    u      N x du   mean of u_r over modalities

The modality encoding ``e_r`` lives in the d0 space so that ``fhat + e_r`` is
defined; the inner decoder maps back to du so that ``c_r`` is comparable with
``u``.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import SGD, Tensor, matmul, stack_mean
from .errors import ConfigError, ContractError, ShapeError
from .nn import Mlp, uniform_init

log = logging.getLogger(__name__)


class ModalityBranch:
    def __init__(self, feature_dim, unified_dim, hidden, rng, direct_center=False):
        self.outer_encoder = Mlp(feature_dim, unified_dim, hidden, rng)
        self.outer_decoder = Mlp(unified_dim, feature_dim, hidden, rng)
        self.inner_encoder = Mlp(feature_dim, feature_dim, hidden, rng)
        self.inner_decoder = Mlp(feature_dim, unified_dim, hidden, rng)
        self.encoding = uniform_init(rng, feature_dim, (1, feature_dim))
        self.direct_center = direct_center

    def parameters(self):
        params = self.outer_encoder.parameters() + self.outer_decoder.parameters()
        if not self.direct_center:
            params += self.inner_encoder.parameters() + [self.encoding]
        return params + self.inner_decoder.parameters()


class RceModel:
    """One independent :class:`ModalityBranch` per modality.

    ``hidden=0`` makes every encoder and decoder a single affine map; a
    positive value inserts one relu hidden layer of that width.

    ``direct_center=True`` is the ablation without a residual path: the inner
    encoder is bypassed (``delta = 0``) and the center is decoded directly
    from the outer reconstruction.
    """

    def __init__(self, n_modalities, feature_dim, unified_dim=64, hidden=0, seed=2022,
                 direct_center=False):
        if n_modalities < 1:
            raise ConfigError("need at least one modality")
        self.n_modalities = n_modalities
        self.feature_dim = feature_dim
        self.unified_dim = unified_dim
        self.hidden = hidden
        self.direct_center = direct_center
        rng = np.random.default_rng(seed)
        self.branches = [
            ModalityBranch(feature_dim, unified_dim, hidden, rng, direct_center)
            for _ in range(n_modalities)
        ]

    def parameters(self):
        return [p for b in self.branches for p in b.parameters()]

    def named_tensors(self):
        """Every tensor of the model in a fixed order (used by checkpoints)."""
        out = []
        for r, b in enumerate(self.branches):
            for name, mlp in (("outer_encoder", b.outer_encoder), ("outer_decoder", b.outer_decoder),
                              ("inner_encoder", b.inner_encoder), ("inner_decoder", b.inner_decoder)):
                for j, layer in enumerate(mlp.layers):
                    out.append((f"{r}.{name}.{j}.weight", layer.weight))
                    out.append((f"{r}.{name}.{j}.bias", layer.bias))
            out.append((f"{r}.encoding", b.encoding))
        return out


@dataclass
class RceOutputs:
    unified: list    # u_r per modality
    recon: list      # fhat per modality
    residual: list   # delta per modality
    centers: list    # c_r per modality
    center: Tensor   # u
    inputs: list = None

    @property
    def n_modalities(self):
        return len(self.unified)


def _as_input(x, dim):
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.cols != dim:
        raise ShapeError(f"expected features of dimension {dim}, got {t.cols}")
    return t


def outer_forward(model, r, features):
    branch = model.branches[r]
    f = _as_input(features, model.feature_dim)
    u = branch.outer_encoder(f)
    return u, branch.outer_decoder(u)


def aggregate_center(unified):
    if not unified:
        raise ContractError("aggregate_center needs at least one modality")
    return stack_mean(unified)


def inner_forward(model, r, recon):
    branch = model.branches[r]
    fhat = _as_input(recon, model.feature_dim)
    if model.direct_center:
        delta = Tensor(np.zeros(fhat.shape))
        return delta, branch.inner_decoder(fhat)
    delta = branch.inner_encoder(fhat + branch.encoding)
    return delta, branch.inner_decoder(fhat + delta)


def category_mean_matrix(groups):
    """N x N matrix averaging rows that share a group id."""
    groups = np.asarray(groups)
    same = (groups[:, None] == groups[None, :]).astype(np.float64)
    return same / same.sum(axis=1, keepdims=True)


def forward(model, features, groups=None):
    """Run both auto-encoders for every modality.

    ``features`` is a sequence of M arrays (N x d0) or a FeatureSet.  With
    ``groups`` (one id per object) the shared center becomes the mean over
    each group instead of over one object's modalities; only the
    label-consuming "category center" ablation passes it.
    """
    if hasattr(features, "features"):
        features = [features.modality(r) for r in range(features.n_modalities)]
    if len(features) != model.n_modalities:
        raise ShapeError(f"model has {model.n_modalities} modalities, got {len(features)}")
    inputs = [_as_input(f, model.feature_dim) for f in features]
    unified, recon, residual, centers = [], [], [], []
    for r, f in enumerate(inputs):
        u, fhat = outer_forward(model, r, f)
        delta, c = inner_forward(model, r, fhat)
        unified.append(u)
        recon.append(fhat)
        residual.append(delta)
        centers.append(c)
    center = aggregate_center(unified)
    if groups is not None:
        center = matmul(category_mean_matrix(groups), center)
    return RceOutputs(unified, recon, residual, centers, center, inputs)


def loss_rc(outputs):
    """Pull every modality encoding and residual center onto the shared center."""
    m = outputs.n_modalities
    u = outputs.center
    terms = []
    for u_r, c_r in zip(outputs.unified, outputs.centers):
        terms.append((u_r - u).l2norm_rows() + (c_r - u).l2norm_rows())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total.scale(1.0 / m).mean()


def loss_cr(model, outputs):
    """Distance between each center and the one produced by a swapped inner decoder."""
    m = outputs.n_modalities
    if m < 2:
        warnings.warn("cross-reconstruction loss is vacuous for a single modality", stacklevel=2)
        return Tensor(0.0)
    total = None
    for k in range(m):
        mixed = outputs.recon[k] + outputs.residual[k]
        if model.direct_center:
            code = mixed
        else:
            code = model.branches[k].inner_encoder(mixed)
        for l in range(m):
            if l == k:
                continue
            term = (model.branches[l].inner_decoder(code) - outputs.centers[k]).l2norm_rows()
            total = term if total is None else total + term
    return total.scale(1.0 / (m * (m - 1))).mean()


def loss_reconstruction(outputs):
    """Mean distance between each outer reconstruction and its input."""
    terms = [(fhat - f).l2norm_rows().mean() for fhat, f in zip(outputs.recon, outputs.inputs)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total.scale(1.0 / len(terms))


def loss_rce(model, outputs, alpha=0.5, reconstruction_weight=0.0):
    """``alpha * L_rc + (1 - alpha) * L_cr``, plus an optional outer reconstruction term."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        loss = loss_rc(outputs)
    elif alpha == 0.0:
        loss = loss_cr(model, outputs)
    else:
        loss = loss_rc(outputs).scale(alpha) + loss_cr(model, outputs).scale(1.0 - alpha)
    if reconstruction_weight:
        loss = loss + loss_reconstruction(outputs).scale(reconstruction_weight)
    return loss


def train_rce(model, fs, epochs=40, lr=0.1, alpha=0.5, reconstruction_weight=1.0,
              batch_size=32, seed=2022, category_labels=None):
    """SGD on the RCE loss.  Returns the mean loss of each epoch.

    ``batch_size=None`` trains full-batch; otherwise objects are reshuffled
    every epoch with a generator seeded by ``seed``.  Training is
    self-supervised: a FeatureSet that still carries labels is rejected so
    that label use has to be an explicit decision of the caller, made by
    passing ``category_labels``.
    """
    if getattr(fs, "labels", None) is not None:
        raise ContractError("train_rce takes an unlabelled FeatureSet; call without_labels()")
    features = [fs.modality(r) for r in range(fs.n_modalities)]
    n = fs.n_objects
    batch = n if not batch_size else min(batch_size, n)
    rng = np.random.default_rng(seed)
    opt = SGD(model.parameters(), lr)
    history = []
    for epoch in range(epochs):
        order = np.arange(n) if batch == n else rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            opt.zero_grad()
            groups = None if category_labels is None else np.asarray(category_labels)[idx]
            outputs = forward(model, [f[idx] for f in features], groups)
            loss = loss_rce(model, outputs, alpha, reconstruction_weight)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / n)
        log.debug("rce epoch %d loss %.6f", epoch + 1, history[-1])
    return history
