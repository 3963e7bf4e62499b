"""Chebyshev spectral GCN classifier over single time points.

Architecture: a stack of graph-conv + batch-norm + ReLU blocks on 64-node
inputs, a global mean pool to a flat feature vector, then fully connected
layers with batch norm, ReLU and dropout, ending in a 4-way softmax.  The
paper-scale configuration is six conv blocks widening 1 -> 512 with
polynomial order 5 and FC widths 512 -> 1024 -> 2048 -> 4.

The adjacency mask is a trainable parameter of the model: every forward
rebuilds the scaled Laplacian from base * mask (recomputing lambda_max),
and the backward routes gradients from all conv layers into the mask.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from eegraph.graph import (
    AdjacencyMask,
    BaseAdjacency,
    ChebLayerWeights,
    cheb_conv,
    cheb_conv_backward,
    effective_adjacency,
    masked_scaled_laplacian,
    masked_scaled_laplacian_backward,
    normalized_laplacian,
    scale_laplacian,
)
from eegraph.tensor import (
    DimensionError,
    AdamState,
    Tensor,
    TrainingDivergedError,
    adam_step,
    cross_entropy,
    dropout,
    dropout_backward,
    glorot_uniform,
    linear,
    linear_backward,
    log_softmax,
    relu,
    relu_backward,
    softmax,
)


@dataclass(frozen=True)
class GcnConfig:
    """Widths and knobs of the classifier.

    ``conv_channels`` starts at the per-node input feature count (1 for a raw
    time point) and ends at the pooled feature dimension.  ``fc_hidden`` are
    the hidden FC widths between the pool and the class logits.
    """

    n_nodes: int = 64
    conv_channels: tuple[int, ...] = (1, 16, 32, 64, 128, 256, 512)
    cheb_order: int = 5
    fc_hidden: tuple[int, ...] = (1024, 2048)
    n_classes: int = 4
    dropout_rate: float = 0.5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    @classmethod
    def paper(cls) -> "GcnConfig":
        return cls()


class BatchNorm:
    """Per-channel batch normalisation with running statistics.

    Conv feature maps (batch, nodes, channels) are normalised over
    batch x nodes per channel; flat inputs (batch, features) over the batch.
    Population (n) variance throughout.
    """

    def __init__(self, n_features: int, momentum: float = 0.1, eps: float = 1e-5,
                 name: str = "bn"):
        self.gamma = Tensor(np.ones(n_features), name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(n_features), name=f"{name}.beta")
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self.momentum = momentum
        self.eps = eps

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, train: bool):
        flat = x.reshape(-1, x.shape[-1])
        if train:
            mean = flat.mean(axis=0)
            var = flat.var(axis=0)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (flat - mean) * inv_std
        out = (xhat * self.gamma.data + self.beta.data).reshape(x.shape)
        cache = (xhat, inv_std, x.shape, train)
        return out, cache

    def backward(self, grad_out: np.ndarray, cache) -> np.ndarray:
        xhat, inv_std, shape, train = cache
        g = grad_out.reshape(-1, shape[-1])
        self.gamma.add_grad((g * xhat).sum(axis=0))
        self.beta.add_grad(g.sum(axis=0))
        gx = g * self.gamma.data
        if not train:
            return (gx * inv_std).reshape(shape)
        m = g.shape[0]
        dxhat_sum = gx.sum(axis=0)
        dxhat_dot = (gx * xhat).sum(axis=0)
        dx = (gx - dxhat_sum / m - xhat * dxhat_dot / m) * inv_std
        return dx.reshape(shape)


class GcnClassifier:
    """The full masked-graph Chebyshev classifier."""

    def __init__(self, config: GcnConfig, seed: int = 0,
                 base: BaseAdjacency | None = None,
                 mask: AdjacencyMask | None = None):
        self.config = config
        self.base = base if base is not None else BaseAdjacency.fully_connected(config.n_nodes)
        if self.base.n_nodes != config.n_nodes:
            raise DimensionError("base adjacency size disagrees with config n_nodes")
        self.mask = mask if mask is not None else AdjacencyMask.ones_like(self.base)
        rng = np.random.default_rng(seed)

        self.convs: list[ChebLayerWeights] = []
        self.conv_bns: list[BatchNorm] = []
        chans = config.conv_channels
        for i in range(len(chans) - 1):
            self.convs.append(ChebLayerWeights.init(
                rng, config.cheb_order, chans[i], chans[i + 1], name=f"conv{i + 1}.theta"))
            self.conv_bns.append(BatchNorm(chans[i + 1], config.bn_momentum,
                                           config.bn_eps, name=f"conv{i + 1}.bn"))

        dims = (config.feature_dim, *config.fc_hidden, config.n_classes)
        self.fc_w: list[Tensor] = []
        self.fc_b: list[Tensor] = []
        self.fc_bns: list[BatchNorm] = []
        for i in range(len(dims) - 1):
            w = glorot_uniform(rng, dims[i], dims[i + 1], (dims[i], dims[i + 1]))
            self.fc_w.append(Tensor(w, name=f"fc{i + 1}.w"))
            self.fc_b.append(Tensor(np.zeros(dims[i + 1]), name=f"fc{i + 1}.b"))
            if i < len(dims) - 2:  # batch norm on hidden FC layers only
                self.fc_bns.append(BatchNorm(dims[i + 1], config.bn_momentum,
                                             config.bn_eps, name=f"fc{i + 1}.bn"))

    # -- parameter plumbing -------------------------------------------------

    def parameters(self, include_mask: bool = True) -> list[Tensor]:
        params: list[Tensor] = []
        if include_mask:
            params.append(self.mask.values)
        for conv, bn in zip(self.convs, self.conv_bns):
            params.extend([conv.theta, *bn.parameters()])
        for i, (w, b) in enumerate(zip(self.fc_w, self.fc_b)):
            params.extend([w, b])
            if i < len(self.fc_bns):
                params.extend(self.fc_bns[i].parameters())
        return params

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {
            "mask.values": self.mask.values.data.copy(),
            "mask.frozen": self.mask.frozen.copy(),
        }
        for p in self.parameters(include_mask=False):
            state[p.name] = p.data.copy()
        for i, bn in enumerate([*self.conv_bns, *self.fc_bns]):
            state[f"bnstat{i}.mean"] = bn.running_mean.copy()
            state[f"bnstat{i}.var"] = bn.running_var.copy()
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.mask.values.data = np.array(state["mask.values"], dtype=np.float64)
        self.mask.frozen = np.array(state["mask.frozen"], dtype=bool)
        for p in self.parameters(include_mask=False):
            p.data = np.array(state[p.name], dtype=np.float64)
        for i, bn in enumerate([*self.conv_bns, *self.fc_bns]):
            bn.running_mean = np.array(state[f"bnstat{i}.mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"bnstat{i}.var"], dtype=np.float64)

    # -- forward / backward --------------------------------------------------

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator | None = None,
                warn: bool = True):
        """Run a batch (B, n_nodes) or (B, n_nodes, in_ch) through the net.

        Returns (logits, cache).  Dropout (train mode) draws from ``rng``.
        """
        if x.ndim == 2:
            x = x[:, :, None]
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite values in model input")
        if x.shape[1] != self.config.n_nodes or x.shape[2] != self.config.conv_channels[0]:
            raise DimensionError(f"expected (B, {self.config.n_nodes}, "
                                 f"{self.config.conv_channels[0]}), got {x.shape}")
        if train and self.config.dropout_rate > 0.0 and rng is None:
            raise ValueError("training forward needs an rng for dropout")

        scaled, lap_cache = masked_scaled_laplacian(self.base, self.mask, warn=warn)
        cache: dict = {"scaled": scaled, "lap_cache": lap_cache, "conv": [], "fc": [],
                       "train": train}
        h = x
        for conv, bn in zip(self.convs, self.conv_bns):
            z = cheb_conv(h, scaled, conv)
            zb, bn_cache = bn.forward(z, train)
            a = relu(zb)
            cache["conv"].append((h, zb, bn_cache))
            h = a
        pooled = h.mean(axis=1)
        cache["pre_pool_shape"] = h.shape
        f = pooled
        n_fc = len(self.fc_w)
        for i in range(n_fc):
            z = linear(f, self.fc_w[i], self.fc_b[i])
            if i < n_fc - 1:
                zb, bn_cache = self.fc_bns[i].forward(z, train)
                a = relu(zb)
                if train and self.config.dropout_rate > 0.0:
                    d, mask = dropout(a, self.config.dropout_rate, rng)
                else:
                    d, mask = a, None
                cache["fc"].append((f, zb, bn_cache, mask))
                f = d
            else:
                cache["fc"].append((f, None, None, None))
                f = z
        return f, cache

    def backward(self, dlogits: np.ndarray, cache) -> None:
        """Accumulate gradients for a forward pass; mask grads are gated."""
        train = cache["train"]
        g = dlogits
        n_fc = len(self.fc_w)
        for i in range(n_fc - 1, -1, -1):
            f_in, zb, bn_cache, drop_mask = cache["fc"][i]
            if i < n_fc - 1:
                if drop_mask is not None:
                    g = dropout_backward(g, drop_mask)
                g = relu_backward(g, zb)
                g = self.fc_bns[i].backward(g, bn_cache)
            g = linear_backward(g, f_in, self.fc_w[i], self.fc_b[i])
        # un-pool: mean over nodes
        b, n, c = cache["pre_pool_shape"]
        g = np.repeat(g[:, None, :], n, axis=1) / n

        scaled = cache["scaled"]
        dlap = np.zeros_like(scaled.matrix)
        for conv, bn, (h_in, zb, bn_cache) in zip(
                reversed(self.convs), reversed(self.conv_bns), reversed(cache["conv"])):
            g = relu_backward(g, zb)
            g = bn.backward(g, bn_cache)
            g, dl = cheb_conv_backward(g, h_in, scaled, conv, need_dlap=True)
            dlap += dl
        masked_scaled_laplacian_backward(dlap, cache["lap_cache"], self.base, self.mask)
        self.mask.gate_gradient()

    # -- inference helpers ----------------------------------------------------

    def predict_proba(self, x: np.ndarray, batch_size: int = 1024,
                      warn: bool = False) -> np.ndarray:
        """Eval-mode class probabilities for a batch of time points."""
        outs = []
        for i in range(0, len(x), batch_size):
            logits, _ = self.forward(x[i:i + batch_size], train=False, warn=warn)
            outs.append(softmax(logits))
        return np.concatenate(outs, axis=0)

    def accuracy(self, x: np.ndarray, labels: np.ndarray, batch_size: int = 1024) -> float:
        probs = self.predict_proba(x, batch_size=batch_size)
        pred = probs.argmax(axis=1)
        return float((pred == np.asarray(labels)).mean())

    def freeze(self) -> "FeatureExtractor":
        return FeatureExtractor(self)


def forward_classify(x: np.ndarray, model: GcnClassifier, mode: str = "eval",
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities for one time point (n_nodes,) or (n_nodes, 1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, _ = model.forward(x[None], train=(mode == "train"), rng=rng, warn=False)
    return softmax(logits)[0]


class FeatureExtractor:
    """Frozen eval-mode copy exposing the pooled feature vector.

    The scaled Laplacian (and its lambda_max) is computed once at freeze time
    and cached, so extraction is deterministic and cheap.
    """

    def __init__(self, model: GcnClassifier):
        self._model = copy.deepcopy(model)
        self.config = self._model.config
        adj = effective_adjacency(self._model.base, self._model.mask)
        lap, _ = normalized_laplacian(adj, warn=False)
        self.scaled = scale_laplacian(lap, warn=False)
        self.lambda_max = self.scaled.lambda_max
        self.density = self._model.mask.density(self._model.base)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def features(self, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
        """Pooled features for a batch (B, n_nodes) of time points."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite values in extractor input")
        outs = []
        m = self._model
        for i in range(0, len(x), batch_size):
            h = x[i:i + batch_size]
            for conv, bn in zip(m.convs, m.conv_bns):
                z = cheb_conv(h, self.scaled, conv)
                zb, _ = bn.forward(z, train=False)
                h = relu(zb)
            outs.append(h.mean(axis=1))
        return np.concatenate(outs, axis=0)

    def extract(self, x: np.ndarray) -> np.ndarray:
        """Feature vector of a single time point (n_nodes,)."""
        return self.features(np.asarray(x, dtype=np.float64)[None])[0]


def extract_features(x: np.ndarray, extractor: FeatureExtractor) -> np.ndarray:
    """Single-point feature extraction; the extractor must be frozen."""
    if not isinstance(extractor, FeatureExtractor):
        raise TypeError("extract_features requires a frozen FeatureExtractor")
    return extractor.extract(x)


# ---------------------------------------------------------------------------
# training


# ---------------------------------------------------------------------------
# checkpoints


def save_gcn_checkpoint(path, model: GcnClassifier, extra_meta: dict | None = None) -> None:
    """Versioned container with named parameter blocks, the mask, its density
    and the cached lambda_max of the effective graph."""
    from eegraph.checkpoint import save_checkpoint

    adj = effective_adjacency(model.base, model.mask)
    lap, _ = normalized_laplacian(adj, warn=False)
    scaled = scale_laplacian(lap, warn=False)
    meta = {
        "config": {
            "n_nodes": model.config.n_nodes,
            "conv_channels": list(model.config.conv_channels),
            "cheb_order": model.config.cheb_order,
            "fc_hidden": list(model.config.fc_hidden),
            "n_classes": model.config.n_classes,
            "dropout_rate": model.config.dropout_rate,
            "bn_momentum": model.config.bn_momentum,
            "bn_eps": model.config.bn_eps,
        },
        "density": model.mask.density(model.base),
        "lambda_max": scaled.lambda_max,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, "gcn", model.state_dict(), meta)


def load_gcn_checkpoint(path) -> tuple[GcnClassifier, dict]:
    from eegraph.checkpoint import load_checkpoint

    _, arrays, meta = load_checkpoint(path, expect_kind="gcn")
    raw = dict(meta["config"])
    raw["conv_channels"] = tuple(raw["conv_channels"])
    raw["fc_hidden"] = tuple(raw["fc_hidden"])
    model = GcnClassifier(GcnConfig(**raw))
    model.load_state(arrays)
    return model, meta


@dataclass(frozen=True)
class GcnTrainConfig:
    """Classifier training hyperparameters (paper-scale defaults)."""

    epochs: int = 1000
    batch_size: int = 1024
    lr: float = 0.01
    seed: int = 0

    def desk(self, epochs: int, batch_size: int = 256, lr: float = 0.005) -> "GcnTrainConfig":
        return replace(self, epochs=epochs, batch_size=batch_size, lr=lr)


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_val_accuracy: float
    best_epoch: int
    val_accuracy_history: list[float] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)


def train_gcn(model: GcnClassifier, train_x: np.ndarray, train_y: np.ndarray,
              val_x: np.ndarray, val_y: np.ndarray,
              cfg: GcnTrainConfig) -> TrainResult:
    """Joint Adam training of weights and adjacency mask.

    Labels are class indices 0..n_classes-1.  Validation accuracy is
    evaluated every epoch and the best snapshot is returned.  The final
    partial batch is kept; a batch size above the dataset size means one
    full batch per epoch.  A non-finite loss aborts with diagnostics.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if train_y.min() < 0 or train_y.max() >= model.config.n_classes:
        raise ValueError("labels must be 0-based class indices")

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamState.for_params(params, lr=cfg.lr)

    result = TrainResult(best_state=model.state_dict(), best_val_accuracy=-1.0, best_epoch=-1)
    n = len(train_x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.zero_grads()
            logits, cache = model.forward(train_x[idx], train=True, rng=rng, warn=False)
            loss, dlogits = cross_entropy(logits, train_y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}")
            model.backward(dlogits, cache)
            adam_step(params, None, opt)
            # frozen mask entries must stay exactly zero
            model.mask.values.data[model.mask.frozen] = 0.0
            epoch_loss += loss * len(idx)
        result.loss_history.append(epoch_loss / n)

        val_acc = model.accuracy(val_x, val_y)
        result.val_accuracy_history.append(val_acc)
        if val_acc > result.best_val_accuracy:
            result.best_val_accuracy = val_acc
            result.best_epoch = epoch
            result.best_state = model.state_dict()
    return result
