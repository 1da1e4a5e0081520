import copy
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from alpineer import io_utils
from tqdm.auto import tqdm

from vesselprune import settings
from vesselprune.dual_graph import DualGraph

CHECKPOINT_FORMAT = "vesselprune-gat"
CHECKPOINT_VERSION = 1


class NumericalError(ArithmeticError):
    """Raised when training produces a non-finite loss or gradient."""


@dataclass
class GatParams:
    """Architecture, optimizer and pruning hyperparameters of the attention network.

    Args:
        heads (int): attention heads per layer
        hidden_dim (int): output width per head of the hidden layers
        hidden_layers (int): number of hidden (concatenating) layers
        leaky_slope (float): negative slope of the attention LeakyReLU
        lr (float): Adam learning rate
        weight_decay (float): decoupled weight decay
        epochs (int): passes over the training graphs
        threshold (float): confidence below which a segment is pruned
        init (str): `"xavier"` or `"zero"`
        standardize (bool): fit per-channel feature standardization on the training graphs
    """

    heads: int = settings.GAT_HEADS
    hidden_dim: int = settings.GAT_HIDDEN_DIM
    hidden_layers: int = settings.GAT_HIDDEN_LAYERS
    leaky_slope: float = settings.GAT_LEAKY_SLOPE
    lr: float = settings.GAT_LEARNING_RATE
    weight_decay: float = settings.GAT_WEIGHT_DECAY
    epochs: int = settings.GAT_EPOCHS
    threshold: float = settings.PRUNE_THRESHOLD
    init: str = "xavier"
    standardize: bool = False

    def validate(self):
        for name in ("heads", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be at least 1, got {getattr(self, name)}")
        if self.hidden_layers < 0:
            raise ValueError(f"hidden_layers: must be non-negative, got {self.hidden_layers}")
        if self.epochs < 0:
            raise ValueError(f"epochs: must be non-negative, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr: must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay: must be non-negative, got {self.weight_decay}")
        if self.leaky_slope < 0:
            raise ValueError(f"leaky_slope: must be non-negative, got {self.leaky_slope}")
        if not 0 <= self.threshold <= 1:
            raise ValueError(f"threshold: must lie in [0, 1], got {self.threshold}")
        if self.init not in ("xavier", "zero"):
            raise ValueError(f"init: must be one of ['xavier', 'zero'], got {self.init}")


@dataclass
class GatLayer:
    """One multi-head graph attention layer without biases.

    Args:
        W (np.ndarray): `(K, out_dim, in_dim)` per-head linear maps
        a (np.ndarray): `(K, 2 * out_dim)` attention vectors, the first half scoring the
            receiving node and the second half its neighbor
        concat (bool): hidden layer (ReLU, heads concatenated) or output layer (heads
            averaged, sigmoid)
        leaky_slope (float): attention LeakyReLU slope
    """

    W: np.ndarray
    a: np.ndarray
    concat: bool = True
    leaky_slope: float = settings.GAT_LEAKY_SLOPE

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.W.ndim != 3 or self.W.shape[0] < 1:
            raise ValueError(f"W must have shape (K, out, in) with K >= 1, got {self.W.shape}")
        if self.a.shape != (self.W.shape[0], 2 * self.W.shape[1]):
            expected = (self.heads, 2 * self.out_dim)
            raise ValueError(f"a has shape {self.a.shape}, expected {expected}")

    @property
    def heads(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    @property
    def in_dim(self) -> int:
        return self.W.shape[2]

    @property
    def width(self) -> int:
        """Feature width this layer emits."""
        return self.heads * self.out_dim if self.concat else self.out_dim


@dataclass
class GatModel:
    """Hidden attention layers followed by one averaging output layer.

    Args:
        layers (list): the `GatLayer` stack, the last one non-concatenating with `out_dim` 1
        params (GatParams): hyperparameters the model was built and trained with
        feature_mean (np.ndarray): per-channel input shift
        feature_std (np.ndarray): per-channel input scale
        seed (int): initialization seed
    """

    layers: List[GatLayer]
    params: GatParams = field(default_factory=GatParams)
    feature_mean: np.ndarray = None
    feature_std: np.ndarray = None
    seed: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("A model needs at least the output layer")
        for prev, layer in zip(self.layers, self.layers[1:]):
            if prev.width != layer.in_dim:
                raise ValueError(
                    f"Layer emits {prev.width} features, next expects {layer.in_dim}"
                )
        last = self.layers[-1]
        if last.concat or last.out_dim != 1:
            raise ValueError("The output layer must average heads into a single score")
        if self.feature_mean is None:
            self.feature_mean = np.zeros(self.in_dim)
        if self.feature_std is None:
            self.feature_std = np.ones(self.in_dim)
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(self.feature_std, dtype=np.float64)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    def parameters(self) -> List[np.ndarray]:
        """Trainable arrays in declared order: `W` then `a` of each layer."""
        return [p for layer in self.layers for p in (layer.W, layer.a)]

    def set_parameters(self, values: Sequence[np.ndarray]):
        for i, layer in enumerate(self.layers):
            layer.W, layer.a = values[2 * i], values[2 * i + 1]


@dataclass
class AdamState:
    """First and second moments per parameter plus the step counter."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    betas: Tuple[float, float] = settings.ADAM_BETAS
    eps: float = settings.ADAM_EPSILON

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def init_model(in_dim, params: GatParams, rng_seed=0) -> GatModel:
    """Builds a model with Xavier-uniform (gain 1) or all-zero parameters.

    Args:
        in_dim (int): input feature width
        params (GatParams): architecture hyperparameters
        rng_seed (int): initialization seed

    Returns:
        GatModel:
            the initialized model
    """
    params.validate()
    rng = np.random.default_rng(rng_seed)
    k, hidden = params.heads, params.hidden_dim
    shapes = []
    fan_in = in_dim
    for _ in range(params.hidden_layers):
        shapes.append((fan_in, hidden, True))
        fan_in = k * hidden
    shapes.append((fan_in, 1, False))

    layers = []
    for fan_in, fan_out, concat in shapes:
        if params.init == "zero":
            W = np.zeros((k, fan_out, fan_in))
            a = np.zeros((k, 2 * fan_out))
        else:
            bound_w = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-bound_w, bound_w, size=(k, fan_out, fan_in))
            bound_a = np.sqrt(6.0 / (2 * fan_out + 1))
            a = rng.uniform(-bound_a, bound_a, size=(k, 2 * fan_out))
        layers.append(GatLayer(W, a, concat, params.leaky_slope))
    return GatModel(layers, copy.deepcopy(params), seed=int(rng_seed))


def _sorted_sum(values, axis):
    # summing in sorted order makes the result independent of neighbor order
    return np.sort(values, axis=axis).sum(axis=axis)


def _attention(layer: GatLayer, h, table, mask) -> Dict[str, np.ndarray]:
    out = layer.out_dim
    z = np.einsum("koi,ni->kno", layer.W, h)
    score_dst = np.einsum("kno,ko->kn", z, layer.a[:, :out])
    score_src = np.einsum("kno,ko->kn", z, layer.a[:, out:])
    logits = score_dst[:, :, None] + score_src[:, table]
    leaky = np.where(logits > 0, logits, layer.leaky_slope * logits)
    shifted = np.where(mask, leaky, -np.inf)
    shifted = shifted - shifted.max(axis=2, keepdims=True)
    weights = np.where(mask, np.exp(shifted), 0.0)
    alpha = weights / _sorted_sum(weights, axis=2)[:, :, None]
    return {"h": h, "z": z, "logits": logits, "alpha": alpha}


def attention_coefficients(layer: GatLayer, h, table, mask) -> np.ndarray:
    """Softmax-normalized attention of every node over its neighborhood, per head.

    Args:
        layer (GatLayer): the layer
        h (np.ndarray): `(n, in_dim)` node features
        table (np.ndarray): `(n, D)` neighbor indices including the node itself
        mask (np.ndarray): `(n, D)` valid entries of `table`

    Returns:
        np.ndarray:
            `(K, n, D)` coefficients, zero on padding, rows summing to 1
    """
    return _attention(layer, np.asarray(h, dtype=np.float64), table, mask)["alpha"]


def _layer_forward(layer: GatLayer, h, table, mask):
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != layer.in_dim:
        raise ValueError(f"Layer expects {layer.in_dim} input features, got shape {h.shape}")
    cache = _attention(layer, h, table, mask)
    terms = cache["alpha"][..., None] * cache["z"][:, table, :]
    agg = _sorted_sum(terms, axis=2)
    cache["agg"] = agg
    if layer.concat:
        out = np.maximum(agg, 0.0).transpose(1, 0, 2).reshape(len(h), -1)
    else:
        mean = agg.mean(axis=0)
        out = 1.0 / (1.0 + np.exp(-mean))
    cache["out"] = out
    return out, cache


def layer_forward(layer: GatLayer, h, table, mask) -> np.ndarray:
    """Attention-weighted neighbor aggregation.

    Hidden layers apply ReLU per head and concatenate the heads; the output layer averages the
    head aggregations and applies a sigmoid.

    Args:
        layer (GatLayer): the layer
        h (np.ndarray): `(n, in_dim)` node features
        table (np.ndarray): `(n, D)` neighbor indices including the node itself
        mask (np.ndarray): `(n, D)` valid entries of `table`

    Returns:
        np.ndarray:
            `(n, K * out_dim)` for hidden layers, `(n, out_dim)` for the output layer
    """
    return _layer_forward(layer, h, table, mask)[0]


def _standardize(model: GatModel, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.in_dim:
        raise ValueError(
            f"Model expects {model.in_dim} features per node, got shape {features.shape}"
        )
    return (features - model.feature_mean) / model.feature_std


def _forward(model: GatModel, features, table, mask):
    h = _standardize(model, features)
    caches = []
    for layer in model.layers:
        h, cache = _layer_forward(layer, h, table, mask)
        caches.append(cache)
    return h[:, 0], caches


def forward(model: GatModel, graph: DualGraph, features=None) -> np.ndarray:
    """Scores of all dual nodes; `features` overrides the graph's own features."""
    features = graph.features if features is None else features
    if features is None:
        raise ValueError("The dual graph carries no features")
    if graph.n_nodes == 0:
        return np.zeros(0)
    table, mask = graph.neighbor_table()
    return _forward(model, features, table, mask)[0]


def predict(model: GatModel, graph: DualGraph) -> np.ndarray:
    """Per-segment confidences in (0, 1)."""
    return forward(model, graph)


def bce_loss(scores, targets) -> Tuple[float, np.ndarray]:
    """Mean binary cross entropy against soft targets and its gradient wrt the scores.

    Args:
        scores (np.ndarray): predicted confidences, clamped to `[1e-7, 1 - 1e-7]`
        targets (np.ndarray): soft targets in [0, 1]

    Returns:
        tuple:
            the loss and its gradient
    """
    g = np.asarray(targets, dtype=np.float64)
    s = np.clip(np.asarray(scores, dtype=np.float64), settings.BCE_CLAMP, 1 - settings.BCE_CLAMP)
    if s.shape != g.shape:
        raise ValueError(f"Got {s.shape} scores for {g.shape} targets")
    n = max(len(s), 1)
    loss = float(-np.sum(g * np.log(s) + (1 - g) * np.log(1 - s)) / n)
    grad = (s - g) / (s * (1 - s)) / n
    return loss, grad


def _layer_backward(layer: GatLayer, cache, d_out, table, mask):
    z, alpha, agg = cache["z"], cache["alpha"], cache["agg"]
    k, n, out = z.shape
    if layer.concat:
        d_agg = d_out.reshape(n, k, out).transpose(1, 0, 2) * (agg > 0)
    else:
        d_mean = d_out * cache["out"] * (1 - cache["out"])
        d_agg = np.broadcast_to(d_mean[None] / k, agg.shape)

    z_nb = z[:, table, :]
    d_alpha = np.einsum("kno,kndo->knd", d_agg, z_nb) * mask
    d_z = np.zeros_like(z)
    contrib = alpha[..., None] * d_agg[:, :, None, :]
    for head in range(k):
        np.add.at(d_z[head], table.ravel(), contrib[head].reshape(-1, out))

    d_leaky = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=2, keepdims=True))
    d_logits = d_leaky * np.where(cache["logits"] > 0, 1.0, layer.leaky_slope) * mask
    d_dst = d_logits.sum(axis=2)
    d_src = np.zeros((k, n))
    for head in range(k):
        np.add.at(d_src[head], table.ravel(), d_logits[head].ravel())

    a_dst, a_src = layer.a[:, :out], layer.a[:, out:]
    d_a = np.concatenate(
        [np.einsum("kn,kno->ko", d_dst, z), np.einsum("kn,kno->ko", d_src, z)], axis=1
    )
    d_z += d_dst[:, :, None] * a_dst[:, None, :] + d_src[:, :, None] * a_src[:, None, :]
    d_w = np.einsum("kno,ni->koi", d_z, cache["h"])
    d_h = np.einsum("kno,koi->ni", d_z, layer.W)
    return d_w, d_a, d_h


def _backward(model: GatModel, features, targets, table, mask):
    scores, caches = _forward(model, features, table, mask)
    loss, d_scores = bce_loss(scores, targets)
    grads = [None] * (2 * len(model.layers))
    d_out = d_scores[:, None]
    for i in range(len(model.layers) - 1, -1, -1):
        d_w, d_a, d_out = _layer_backward(model.layers[i], caches[i], d_out, table, mask)
        grads[2 * i], grads[2 * i + 1] = d_w, d_a
    return loss, grads


def backward(model: GatModel, graph: DualGraph, features=None, targets=None):
    """Reverse-mode gradients of the mean BCE loss wrt every `W` and `a`.

    Args:
        model (GatModel): the model
        graph (DualGraph): the dual graph
        features (np.ndarray): node features, defaults to the graph's
        targets (np.ndarray): soft targets, defaults to the graph's

    Returns:
        tuple:
            the loss and the gradients in `GatModel.parameters` order
    """
    features = graph.features if features is None else features
    targets = graph.targets if targets is None else targets
    if features is None or targets is None:
        raise ValueError("Both features and targets are required for a gradient")
    table, mask = graph.neighbor_table()
    return _backward(model, features, targets, table, mask)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr=settings.GAT_LEARNING_RATE,
    wd=settings.GAT_WEIGHT_DECAY,
) -> List[np.ndarray]:
    """One Adam update with decoupled weight decay applied first.

    Args:
        params (list): parameter arrays
        grads (list): matching gradients
        state (AdamState): moments, advanced in place
        lr (float): learning rate
        wd (float): decoupled weight decay

    Returns:
        list:
            the updated parameters
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(f"Got {len(grads)} gradients for {len(params)} parameters")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"Parameter shape {p.shape} disagrees with {g.shape} / {m.shape}")

    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1 - beta1**state.step
    correction2 = 1 - beta2**state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        decayed = p - lr * wd * p
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        updated.append(decayed - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return updated


def fit_standardization(graphs: Sequence[DualGraph]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over all nodes; a zero deviation becomes 1."""
    stacked = np.concatenate([g.features for g in graphs if g.n_nodes], axis=0)
    std = stacked.std(axis=0)
    return stacked.mean(axis=0), np.where(std > 0, std, 1.0)


def train(model: GatModel, dataset: Sequence[DualGraph], epochs=None, rng_seed=0, verbose=False):
    """Full-graph Adam training on soft targets.

    Graphs are visited in a seeded shuffled order each epoch, one optimizer step per graph.

    Args:
        model (GatModel): the initial model, left untouched
        dataset (list): `DualGraph`s carrying features and targets
        epochs (int): defaults to `model.params.epochs`
        rng_seed (int): shuffling seed
        verbose (bool): show a progress bar over epochs

    Returns:
        tuple:
            the trained model and the mean loss per epoch

    Raises:
        NumericalError:
            if a loss or gradient turns non-finite
    """
    graphs = [g for g in dataset if g.n_nodes]
    if not graphs:
        raise ValueError("Cannot train on an empty dataset")
    for g in graphs:
        if g.features is None or g.targets is None:
            raise ValueError("Every training graph needs features and targets")
        if g.features.shape[1] != model.in_dim:
            raise ValueError(
                f"Training graph has {g.features.shape[1]} features, model expects {model.in_dim}"
            )

    model = copy.deepcopy(model)
    hp = model.params
    epochs = hp.epochs if epochs is None else epochs
    if hp.standardize:
        model.feature_mean, model.feature_std = fit_standardization(graphs)

    prepared = [(g.features, g.targets, *g.neighbor_table()) for g in graphs]
    rng = np.random.default_rng(rng_seed)
    state = AdamState.zeros_like(model.parameters())
    history = []
    for epoch in tqdm(range(epochs), desc="Training", disable=not verbose):
        losses = []
        for idx in rng.permutation(len(prepared)):
            loss, grads = _backward(model, *prepared[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NumericalError(f"Non-finite loss {loss} at epoch {epoch}, graph {idx}")
            model.set_parameters(
                adam_step(model.parameters(), grads, state, hp.lr, hp.weight_decay)
            )
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return model, history


def checkpoint_to_bytes(model: GatModel) -> bytes:
    """A JSON header line followed by the little-endian float32 parameter blob.

    The blob holds `W` and `a` of every layer in order, then the feature mean and deviation.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "in_dim": model.in_dim,
        "seed": model.seed,
        "hyperparams": {
            "heads": model.params.heads,
            "hidden_dim": model.params.hidden_dim,
            "hidden_layers": model.params.hidden_layers,
            "leaky_slope": model.params.leaky_slope,
            "lr": model.params.lr,
            "weight_decay": model.params.weight_decay,
            "epochs": model.params.epochs,
            "threshold": model.params.threshold,
            "init": model.params.init,
            "standardize": model.params.standardize,
        },
        "layers": [
            {"w_shape": list(layer.W.shape), "a_shape": list(layer.a.shape), "concat": layer.concat}
            for layer in model.layers
        ],
    }
    arrays = model.parameters() + [model.feature_mean, model.feature_std]
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + blob


def checkpoint_from_bytes(buffer: bytes) -> GatModel:
    line, _, blob = buffer.partition(b"\n")
    header = json.loads(line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint header {line[:80]!r}")

    values = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    shapes = [s for info in header["layers"] for s in (info["w_shape"], info["a_shape"])]
    shapes += [[header["in_dim"]], [header["in_dim"]]]
    expected = sum(int(np.prod(s)) for s in shapes)
    if values.size != expected:
        raise ValueError(f"Checkpoint blob holds {values.size} values, expected {expected}")

    arrays, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(values[offset : offset + size].reshape(shape))
        offset += size
    params = GatParams(**header["hyperparams"])
    layers = [
        GatLayer(arrays[2 * i], arrays[2 * i + 1], info["concat"], params.leaky_slope)
        for i, info in enumerate(header["layers"])
    ]
    return GatModel(layers, params, arrays[-2], arrays[-1], header["seed"])


def save_checkpoint(checkpoint_path, model: GatModel):
    io_utils.validate_paths(os.path.dirname(os.path.abspath(checkpoint_path)))
    with open(checkpoint_path, mode="wb") as f:
        f.write(checkpoint_to_bytes(model))


def load_checkpoint(checkpoint_path) -> GatModel:
    io_utils.validate_paths(checkpoint_path)
    with open(checkpoint_path, mode="rb") as f:
        return checkpoint_from_bytes(f.read())
