"""Antisymmetric pairwise neural ranker.

Two parameter-shared feature subnetworks compress both documents of a pair
to low-dimensional latent utilities; an optional pair of shared focus-word
subnetworks does the same for focus-word vectors. The ranking head is a
single bias-free neuron on half the utility difference with tanh activation:

    o1 = tanh(w . ((u1, uf1) - (u2, uf2)) / 2)

Sharing the subnetwork weights forces o1(x, x) = 0 and o1(a, b) = -o1(b, a),
and because o1 is a monotone function of a scalar per-document utility, the
induced relation is a total quasiorder. Training pairs are sampled from
best-worst-scaling scores with labels in {-1, +1} and the squared ranking
error (label - o1)^2 is minimized with Adam. Forward and backward passes are
explicit numpy so every gradient is checkable against finite differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .bws import ScoreVector
from .corpus import FeatureMatrix

logger = logging.getLogger(__name__)

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1
_MINIBATCH = 128  # internal SGD batch size; epochs are defined by pairs_per_epoch


class RankerError(ValueError):
    """Raised for invalid ranker configurations or inputs."""


@dataclass(frozen=True)
class RankerConfig:
    hidden_dims: tuple = (2000, 500, 64, 7)
    focus_hidden_dims: tuple | None = None
    learning_rate: float = 0.001
    dropout: float = 0.4
    batch_norm: bool = True
    activation: str = "tanh"
    pairs_per_epoch: int | None = None  # None resolves to 10 * n_docs at fit time
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.focus_hidden_dims is not None:
            object.__setattr__(self, "focus_hidden_dims", tuple(self.focus_hidden_dims))
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise RankerError("hidden_dims must be a non-empty list of positive sizes")
        if self.focus_hidden_dims is not None and (
            not self.focus_hidden_dims or any(h < 1 for h in self.focus_hidden_dims)
        ):
            raise RankerError("focus_hidden_dims, when given, must be non-empty and positive")
        if self.learning_rate <= 0:
            raise RankerError("learning_rate must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise RankerError("dropout must lie in [0, 1)")
        if self.activation != "tanh":
            raise RankerError("the ranker is defined with tanh activation only")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise RankerError("pairs_per_epoch must be a positive integer")
        if self.max_epochs < 1 or self.patience < 1:
            raise RankerError("max_epochs and patience must be positive integers")


@dataclass(frozen=True)
class TrainPair:
    x1: str
    x2: str
    label: float

    def __post_init__(self):
        if self.x1 == self.x2:
            raise RankerError("training pair compares a document with itself")
        if self.label not in (-1.0, 1.0):
            raise RankerError(f"label must be -1 or +1, got {self.label}")


class _Standardizer:
    """Per-column z-scoring fit on the training features."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, X):
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std < 1e-8, 1.0, std))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, X):
        return (X - self.mean) / self.std


class _Layer:
    """One hidden block: affine -> tanh -> [batch norm] -> [dropout]."""

    def __init__(self, W, b, gamma=None, beta=None):
        self.W = W
        self.b = b
        self.gamma = gamma
        self.beta = beta
        self.run_mean = None if gamma is None else np.zeros(W.shape[1])
        self.run_var = None if gamma is None else np.ones(W.shape[1])

    @property
    def has_bn(self):
        return self.gamma is not None

    def params(self):
        out = {"W": self.W, "b": self.b}
        if self.has_bn:
            out["gamma"] = self.gamma
            out["beta"] = self.beta
        return out


class RankerModel:
    """A trained (or freshly initialized) ranker: shared feature net, optional
    shared focus net, output weights, and input standardizers."""

    def __init__(self, cfg: RankerConfig, layers, focus_layers, w,
                 feat_std: _Standardizer, focus_std: _Standardizer | None):
        self.cfg = cfg
        self.layers = layers
        self.focus_layers = focus_layers
        self.w = w
        self.feat_std = feat_std
        self.focus_std = focus_std

    @property
    def has_focus(self):
        return self.focus_layers is not None

    def named_params(self):
        out = {"w": self.w}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"feat{i}_{name}"] = arr
        if self.focus_layers is not None:
            for i, layer in enumerate(self.focus_layers):
                for name, arr in layer.params().items():
                    out[f"focus{i}_{name}"] = arr
        return out


def init_model(cfg: RankerConfig, dim: int, focus_dim: int = 0,
               feat_std: _Standardizer | None = None,
               focus_std: _Standardizer | None = None) -> RankerModel:
    """Build a model with symmetric uniform fan-in initialization."""
    rng = np.random.default_rng(cfg.seed)

    def make_layers(in_dim, dims):
        layers = []
        for out_dim in dims:
            bound = 1.0 / math.sqrt(in_dim)
            W = rng.uniform(-bound, bound, size=(in_dim, out_dim))
            b = np.zeros(out_dim)
            if cfg.batch_norm:
                layers.append(_Layer(W, b, np.ones(out_dim), np.zeros(out_dim)))
            else:
                layers.append(_Layer(W, b))
            in_dim = out_dim
        return layers

    layers = make_layers(dim, cfg.hidden_dims)
    focus_layers = None
    head_dim = cfg.hidden_dims[-1]
    if focus_dim:
        fdims = cfg.focus_hidden_dims or cfg.hidden_dims
        focus_layers = make_layers(focus_dim, fdims)
        head_dim += fdims[-1]
    bound = 1.0 / math.sqrt(head_dim)
    w = rng.uniform(-bound, bound, size=head_dim)
    return RankerModel(
        cfg, layers, focus_layers, w,
        feat_std or _Standardizer.identity(dim),
        focus_std or (_Standardizer.identity(focus_dim) if focus_dim else None),
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _net_forward(layers, X, training, dropout, rng, cache=None):
    a = X
    for layer in layers:
        z = a @ layer.W + layer.b
        t = np.tanh(z)
        out = t
        if layer.has_bn:
            if training:
                mu = t.mean(axis=0)
                var = t.var(axis=0)
                layer.run_mean = (1 - _BN_MOMENTUM) * layer.run_mean + _BN_MOMENTUM * mu
                layer.run_var = (1 - _BN_MOMENTUM) * layer.run_var + _BN_MOMENTUM * var
            else:
                mu, var = layer.run_mean, layer.run_var
            inv = 1.0 / np.sqrt(var + _BN_EPS)
            t_hat = (t - mu) * inv
            out = layer.gamma * t_hat + layer.beta
        else:
            t_hat = inv = mu = None
        mask = None
        if training and dropout > 0.0:
            mask = (rng.random(out.shape) >= dropout) / (1.0 - dropout)
            out = out * mask
        if cache is not None:
            cache.append({"x": a, "t": t, "t_hat": t_hat, "inv": inv,
                          "mask": mask, "training_bn": training and layer.has_bn})
        a = out
    return a


def _net_backward(layers, cache, grad_out, grads, prefix):
    g = grad_out
    for li in range(len(layers) - 1, -1, -1):
        layer, c = layers[li], cache[li]
        if c["mask"] is not None:
            g = g * c["mask"]
        if layer.has_bn:
            t_hat, inv = c["t_hat"], c["inv"]
            grads[f"{prefix}{li}_gamma"] += (g * t_hat).sum(axis=0)
            grads[f"{prefix}{li}_beta"] += g.sum(axis=0)
            g_hat = g * layer.gamma
            if c["training_bn"]:
                # backprop through the batch statistics
                g_t = (
                    g_hat
                    - g_hat.mean(axis=0)
                    - t_hat * (g_hat * t_hat).mean(axis=0)
                ) * inv
            else:
                g_t = g_hat * inv
        else:
            g_t = g
        g_z = g_t * (1.0 - c["t"] ** 2)
        grads[f"{prefix}{li}_W"] += c["x"].T @ g_z
        grads[f"{prefix}{li}_b"] += g_z.sum(axis=0)
        g = g_z @ layer.W.T


def pair_output(u1, u2, w):
    """Ranking head on latent utilities: tanh(w . (u1 - u2) / 2)."""
    diff = (np.asarray(u1) - np.asarray(u2)) / 2.0
    return np.tanh(diff @ np.asarray(w))


def _check_focus_args(model, focus1, focus2):
    if model.has_focus and (focus1 is None or focus2 is None):
        raise RankerError("model has a focus net; focus vectors are required")
    if not model.has_focus and (focus1 is not None or focus2 is not None):
        raise RankerError("model has no focus net; focus vectors not accepted")


def _latent(model: RankerModel, F, FOC, training=False, rng=None, caches=None):
    cfg = model.cfg
    cache_f = [] if caches is not None else None
    u = _net_forward(model.layers, model.feat_std(F), training,
                     cfg.dropout if training else 0.0, rng, cache_f)
    if model.has_focus:
        cache_g = [] if caches is not None else None
        uf = _net_forward(model.focus_layers, model.focus_std(FOC), training,
                          cfg.dropout if training else 0.0, rng, cache_g)
        u = np.hstack([u, uf])
        if caches is not None:
            caches.extend([cache_f, cache_g])
    elif caches is not None:
        caches.extend([cache_f, None])
    return u


def forward_pair(model: RankerModel, f1, f2, focus1=None, focus2=None):
    """Evaluation-mode pair output in (-1, 1); accepts single vectors or
    row-stacked batches."""
    _check_focus_args(model, focus1, focus2)
    f1 = np.asarray(f1, dtype=np.float64)
    single = f1.ndim == 1
    F1 = np.atleast_2d(f1)
    F2 = np.atleast_2d(np.asarray(f2, dtype=np.float64))
    if F1.shape != F2.shape:
        raise RankerError(f"feature shapes differ: {F1.shape} vs {F2.shape}")
    if F1.shape[1] != model.layers[0].W.shape[0]:
        raise RankerError(
            f"feature dim {F1.shape[1]} does not match model input "
            f"{model.layers[0].W.shape[0]}"
        )
    FOC1 = None if focus1 is None else np.atleast_2d(np.asarray(focus1, dtype=np.float64))
    FOC2 = None if focus2 is None else np.atleast_2d(np.asarray(focus2, dtype=np.float64))
    u1 = _latent(model, F1, FOC1)
    u2 = _latent(model, F2, FOC2)
    out = pair_output(u1, u2, model.w)
    return float(out[0]) if single else out


def loss(label, o1):
    """Squared ranking error (label - o1)^2."""
    label = np.asarray(label, dtype=np.float64)
    if not np.all(np.isin(label, (-1.0, 1.0))):
        raise RankerError("labels must be -1 or +1")
    return (label - np.asarray(o1)) ** 2


def loss_and_grads(model: RankerModel, F1, F2, labels, FOC1=None, FOC2=None,
                   training=False, rng=None):
    """Mean squared ranking loss over a batch and its gradient for every
    weight tensor. Both branches run through one concatenated forward pass so
    batch-norm statistics are shared and parameter sharing is exact."""
    _check_focus_args(model, FOC1, FOC2)
    F1 = np.atleast_2d(F1)
    F2 = np.atleast_2d(F2)
    labels = np.asarray(labels, dtype=np.float64)
    B = F1.shape[0]

    caches = []
    F = np.vstack([F1, F2])
    FOC = None if FOC1 is None else np.vstack([FOC1, FOC2])
    u = _latent(model, F, FOC, training=training, rng=rng, caches=caches)
    u1, u2 = u[:B], u[B:]

    h = (u1 - u2) / 2.0
    s = h @ model.w
    o = np.tanh(s)
    batch_loss = float(np.mean((labels - o) ** 2))

    grads = {name: np.zeros_like(arr) for name, arr in model.named_params().items()}
    g_o = 2.0 * (o - labels) / B
    g_s = g_o * (1.0 - o**2)
    grads["w"] += h.T @ g_s
    g_h = g_s[:, None] * model.w[None, :]
    g_u = np.vstack([g_h / 2.0, -g_h / 2.0])

    nfeat = model.layers[-1].W.shape[1]
    cache_f, cache_g = caches
    _net_backward(model.layers, cache_f, g_u[:, :nfeat], grads, "feat")
    if model.has_focus:
        _net_backward(model.focus_layers, cache_g, g_u[:, nfeat:], grads, "focus")
    return batch_loss, grads


# ---------------------------------------------------------------------------
# Training-pair generation
# ---------------------------------------------------------------------------

def generate_training_pairs(bws_scores: ScoreVector, n: int, seed: int) -> list[TrainPair]:
    """Draw n pairs uniformly with replacement from document pairs with
    distinct scores; the label is +1 iff the first document scores higher.
    Equal-score draws are rejected and redrawn."""
    if n < 1:
        raise RankerError("number of pairs must be positive")
    ids = sorted(bws_scores.entries)
    scores = np.array([bws_scores.entries[d] for d in ids])
    if len(ids) < 2 or np.all(scores == scores[0]):
        raise RankerError("need at least two documents with distinct scores")

    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        chunk = max(256, 2 * (n - len(out)))
        i = rng.integers(0, len(ids), size=chunk)
        j = rng.integers(0, len(ids), size=chunk)
        keep = (i != j) & (scores[i] != scores[j])
        for a, b in zip(i[keep], j[keep]):
            out.append(TrainPair(ids[a], ids[b], 1.0 if scores[a] > scores[b] else -1.0))
            if len(out) == n:
                break
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, params, lr):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, beta1=0.9, beta2=0.999, eps=1e-8):
        self.t += 1
        for k, p in params.items():
            g = grads[k]
            self.m[k] = beta1 * self.m[k] + (1 - beta1) * g
            self.v[k] = beta2 * self.v[k] + (1 - beta2) * g * g
            m_hat = self.m[k] / (1 - beta1**self.t)
            v_hat = self.v[k] / (1 - beta2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + eps)


def _snapshot(model):
    state = {k: v.copy() for k, v in model.named_params().items()}
    for i, layer in enumerate(model.layers):
        if layer.has_bn:
            state[f"feat{i}_run_mean"] = layer.run_mean.copy()
            state[f"feat{i}_run_var"] = layer.run_var.copy()
    if model.focus_layers is not None:
        for i, layer in enumerate(model.focus_layers):
            if layer.has_bn:
                state[f"focus{i}_run_mean"] = layer.run_mean.copy()
                state[f"focus{i}_run_var"] = layer.run_var.copy()
    return state


def _restore(model, state):
    for k, v in model.named_params().items():
        v[:] = state[k]
    for i, layer in enumerate(model.layers):
        if layer.has_bn:
            layer.run_mean[:] = state[f"feat{i}_run_mean"]
            layer.run_var[:] = state[f"feat{i}_run_var"]
    if model.focus_layers is not None:
        for i, layer in enumerate(model.focus_layers):
            if layer.has_bn:
                layer.run_mean[:] = state[f"focus{i}_run_mean"]
                layer.run_var[:] = state[f"focus{i}_run_var"]


def train(features: FeatureMatrix, bws_scores: ScoreVector, cfg: RankerConfig,
          val=None) -> RankerModel:
    """Train on pairs sampled fresh each epoch from the score differences.

    With a validation set (features, gold scores) the model is early-stopped
    on validation Spearman correlation and the best epoch's weights are
    restored. Deterministic for a fixed seed and thread count.
    """
    from .evaluation import spearman  # local import to avoid a cycle

    for d in bws_scores.entries:
        if d not in features:
            raise RankerError(f"no feature row for scored id {d!r}")
    scored_ids = sorted(bws_scores.entries)
    fm = features.subset(scored_ids)

    feat_std = _Standardizer.fit(fm.rows)
    focus_std = None
    if fm.focus_rows is not None:
        focus_std = _Standardizer.fit(fm.focus_rows)
        if cfg.focus_hidden_dims is None:
            logger.info("focus vectors present; focus net mirrors hidden_dims")
    model = init_model(cfg, fm.dim, fm.focus_dim, feat_std, focus_std)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD1]))
    n_pairs = cfg.pairs_per_epoch or 10 * len(fm)
    optimizer = _Adam(model.named_params(), cfg.learning_rate)
    index = {d: i for i, d in enumerate(fm.doc_ids)}

    best_rho = -np.inf
    best_state = None
    stale = 0
    for epoch in range(cfg.max_epochs):
        pairs = generate_training_pairs(
            bws_scores, n_pairs, int(rng.integers(0, 2**31 - 1))
        )
        i1 = np.array([index[p.x1] for p in pairs])
        i2 = np.array([index[p.x2] for p in pairs])
        labels = np.array([p.label for p in pairs])
        order = rng.permutation(len(pairs))

        for start in range(0, len(pairs), _MINIBATCH):
            sel = order[start : start + _MINIBATCH]
            foc1 = foc2 = None
            if fm.focus_rows is not None:
                foc1, foc2 = fm.focus_rows[i1[sel]], fm.focus_rows[i2[sel]]
            batch_loss, grads = loss_and_grads(
                model, fm.rows[i1[sel]], fm.rows[i2[sel]], labels[sel],
                foc1, foc2, training=True, rng=rng,
            )
            if not math.isfinite(batch_loss):
                raise RankerError(
                    f"non-finite loss at epoch {epoch}; "
                    "lower the learning rate or check the features"
                )
            optimizer.step(model.named_params(), grads)

        if val is not None:
            val_features, val_gold = val
            preds = predict_scores(model, val_features)
            rho = spearman(preds.restrict(val_gold.ids()), val_gold)
            if rho > best_rho + 1e-12:
                best_rho, best_state, stale = rho, _snapshot(model), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    if best_state is not None:
        _restore(model, best_state)
    return model


def predict_scores(model: RankerModel, features: FeatureMatrix) -> ScoreVector:
    """Per-document scores tanh(w . (u_d, uf_d)); same ordering as the
    pairwise outputs since both are monotone in the scalar latent utility."""
    if features.dim != model.layers[0].W.shape[0]:
        raise RankerError(
            f"feature dim {features.dim} does not match model input "
            f"{model.layers[0].W.shape[0]}"
        )
    if model.has_focus and features.focus_rows is None:
        raise RankerError("model has a focus net but features carry no focus vectors")
    u = _latent(model, features.rows,
                features.focus_rows if model.has_focus else None)
    scores = np.tanh(u @ model.w)
    return ScoreVector(
        {d: float(scores[i]) for i, d in enumerate(features.doc_ids)}, "directranker"
    )


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------

def save_model(model: RankerModel, path) -> None:
    arrays = {}
    for k, v in _snapshot(model).items():
        arrays[k] = v
    cfg = model.cfg
    meta = [
        "directranker-model", "1",
        ",".join(map(str, cfg.hidden_dims)),
        ",".join(map(str, cfg.focus_hidden_dims)) if cfg.focus_hidden_dims else "",
        repr(cfg.learning_rate), repr(cfg.dropout), str(int(cfg.batch_norm)),
        str(cfg.pairs_per_epoch or 0), str(cfg.max_epochs), str(cfg.patience),
        str(cfg.seed), str(int(model.has_focus)),
    ]
    arrays["container"] = np.array(meta)
    arrays["feat_std_mean"] = model.feat_std.mean
    arrays["feat_std_std"] = model.feat_std.std
    if model.focus_std is not None:
        arrays["focus_std_mean"] = model.focus_std.mean
        arrays["focus_std_std"] = model.focus_std.std
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> RankerModel:
    with np.load(path, allow_pickle=False) as data:
        meta = list(data["container"])
        if meta[0] != "directranker-model" or meta[1] != "1":
            raise RankerError(f"{path}: not a v1 directranker model container")
        cfg = RankerConfig(
            hidden_dims=tuple(int(x) for x in meta[2].split(",")),
            focus_hidden_dims=(
                tuple(int(x) for x in meta[3].split(",")) if meta[3] else None
            ),
            learning_rate=float(meta[4]),
            dropout=float(meta[5]),
            batch_norm=bool(int(meta[6])),
            pairs_per_epoch=int(meta[7]) or None,
            max_epochs=int(meta[8]),
            patience=int(meta[9]),
            seed=int(meta[10]),
        )
        has_focus = bool(int(meta[11]))
        dim = data["feat0_W"].shape[0]
        focus_dim = data["focus0_W"].shape[0] if has_focus else 0
        feat_std = _Standardizer(data["feat_std_mean"], data["feat_std_std"])
        focus_std = (
            _Standardizer(data["focus_std_mean"], data["focus_std_std"])
            if has_focus else None
        )
        model = init_model(cfg, dim, focus_dim, feat_std, focus_std)
        state = {k: data[k] for k in data.files
                 if k not in ("container", "feat_std_mean", "feat_std_std",
                              "focus_std_mean", "focus_std_std")}
        _restore(model, state)
        return model
