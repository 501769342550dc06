"""A small convolutional classifier with explicit forward/backward passes.

Everything is float64 numpy. Inputs are (batch, height, width, channel)
arrays. The last layer is always the classification head, a dense layer
that can be swapped out; an optional aggregation stage on top of it sums
subclass logits into class scores through a sparse binary matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data_model import AggregationMatrix, DataError, Hyperparameters
from .rng import derive_rng

SUBCLASS_SPACE = "subclass"
CLASS_SPACE = "class"


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv2D:
    """Valid-padding convolution (cross-correlation) with square kernels."""

    kind = "conv"

    def __init__(self, kernel: int, in_channels: int, out_channels: int, stride: int = 1,
                 rng: np.random.Generator | None = None, trainable: bool = True):
        self.kernel = kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.trainable = trainable
        rng = rng or np.random.default_rng(0)
        fan_in = kernel * kernel * in_channels
        fan_out = kernel * kernel * out_channels
        self.params = {
            "W": _glorot(rng, (kernel, kernel, in_channels, out_channels), fan_in, fan_out),
            "b": np.zeros(out_channels),
        }

    def out_shape(self, h: int, w: int) -> tuple[int, int]:
        oh = (h - self.kernel) // self.stride + 1
        ow = (w - self.kernel) // self.stride + 1
        return oh, ow

    def _windows(self, x: np.ndarray) -> np.ndarray:
        win = np.lib.stride_tricks.sliding_window_view(x, (self.kernel, self.kernel), axis=(1, 2))
        return win[:, :: self.stride, :: self.stride]

    def forward(self, x: np.ndarray):
        oh, ow = self.out_shape(x.shape[1], x.shape[2])
        if oh < 1 or ow < 1:
            raise DataError(
                f"conv kernel {self.kernel} stride {self.stride} does not fit input "
                f"{x.shape[1]}x{x.shape[2]}"
            )
        win = self._windows(x)
        y = np.einsum("nhwcij,ijco->nhwo", win, self.params["W"]) + self.params["b"]
        return y, x

    def backward(self, dy: np.ndarray, x: np.ndarray):
        win = self._windows(x)
        grads = {
            "W": np.einsum("nhwcij,nhwo->ijco", win, dy),
            "b": dy.sum(axis=(0, 1, 2)),
        }
        dx = np.zeros_like(x)
        oh, ow = dy.shape[1], dy.shape[2]
        s, k = self.stride, self.kernel
        for i in range(k):
            for j in range(k):
                dx[:, i : i + oh * s : s, j : j + ow * s : s, :] += np.einsum(
                    "nhwo,co->nhwc", dy, self.params["W"][i, j]
                )
        return dx, grads

    def config(self) -> dict:
        return {
            "kernel": self.kernel,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "stride": self.stride,
        }


class MaxPool2D:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped."""

    kind = "pool"

    def __init__(self, window: int, trainable: bool = False):
        self.window = window
        self.trainable = False
        self.params: dict[str, np.ndarray] = {}

    def out_shape(self, h: int, w: int) -> tuple[int, int]:
        return h // self.window, w // self.window

    def forward(self, x: np.ndarray):
        n, h, w, c = x.shape
        ph, pw = self.out_shape(h, w)
        if ph < 1 or pw < 1:
            raise DataError(f"pool window {self.window} does not fit input {h}x{w}")
        v = x[:, : ph * self.window, : pw * self.window, :]
        v = v.reshape(n, ph, self.window, pw, self.window, c)
        flat = v.transpose(0, 1, 3, 5, 2, 4).reshape(n, ph, pw, c, self.window * self.window)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy: np.ndarray, cache):
        x_shape, idx = cache
        n, h, w, c = x_shape
        ph, pw = dy.shape[1], dy.shape[2]
        flat = np.zeros((n, ph, pw, c, self.window * self.window))
        np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
        v = flat.reshape(n, ph, pw, c, self.window, self.window).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(x_shape)
        dx[:, : ph * self.window, : pw * self.window, :] = v.reshape(
            n, ph * self.window, pw * self.window, c
        )
        return dx, {}

    def config(self) -> dict:
        return {"window": self.window}


class ReLU:
    kind = "relu"

    def __init__(self, trainable: bool = False):
        self.trainable = False
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray):
        return np.maximum(x, 0.0), x

    def backward(self, dy: np.ndarray, x: np.ndarray):
        return dy * (x > 0), {}

    def config(self) -> dict:
        return {}


class Dense:
    """Fully connected layer; flattens any trailing input dimensions."""

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 trainable: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.trainable = trainable
        rng = rng or np.random.default_rng(0)
        self.params = {
            "W": _glorot(rng, (in_dim, out_dim), in_dim, out_dim),
            "b": np.zeros(out_dim),
        }

    def forward(self, x: np.ndarray):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_dim:
            raise DataError(f"dense layer expects {self.in_dim} features, got {flat.shape[1]}")
        return flat @ self.params["W"] + self.params["b"], (x.shape, flat)

    def backward(self, dy: np.ndarray, cache):
        x_shape, flat = cache
        grads = {"W": flat.T @ dy, "b": dy.sum(axis=0)}
        dx = (dy @ self.params["W"].T).reshape(x_shape)
        return dx, grads

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim}


Layer = Conv2D | MaxPool2D | ReLU | Dense

_LAYER_KINDS = {"conv": Conv2D, "pool": MaxPool2D, "relu": ReLU, "dense": Dense}


@dataclass
class Model:
    """Layer stack whose last layer is the classification head."""

    layers: list[Layer]
    input_size: int
    head_label_space: str = CLASS_SPACE
    hierarchy_id: str = ""
    train_steps: int = 0
    aggregation_W: np.ndarray | None = None
    aggregation_trainable: bool = False

    @property
    def head(self) -> Dense:
        head = self.layers[-1]
        if not isinstance(head, Dense):
            raise DataError("model head must be a dense layer")
        return head

    @property
    def n_outputs(self) -> int:
        return self.head.out_dim

    def parameter_snapshot(self) -> list[dict[str, np.ndarray]]:
        return [{k: v.copy() for k, v in layer.params.items()} for layer in self.layers]


def build_default_model(
    input_size: int,
    n_out: int,
    seed: int,
    conv_channels: tuple[int, int] = (16, 32),
    fc_dim: int = 64,
) -> Model:
    """The stock small classifier: two conv/pool blocks and a dense neck."""
    c1, c2 = conv_channels
    layers: list[Layer] = [
        Conv2D(5, 3, c1, stride=2, rng=derive_rng(seed, "layer", 0)),
        ReLU(),
        MaxPool2D(2),
        Conv2D(3, c1, c2, stride=1, rng=derive_rng(seed, "layer", 3)),
        ReLU(),
        MaxPool2D(2),
    ]
    h = w = input_size
    for layer in layers:
        if hasattr(layer, "out_shape"):
            h, w = layer.out_shape(h, w)
            if h < 1 or w < 1:
                raise DataError(f"input size {input_size} too small for the default stack")
    layers.append(Dense(h * w * c2, fc_dim, rng=derive_rng(seed, "layer", 6)))
    layers.append(ReLU())
    layers.append(Dense(fc_dim, n_out, rng=derive_rng(seed, "head", 0)))
    return Model(layers=layers, input_size=input_size)


def forward(model: Model, x: np.ndarray, with_caches: bool = False):
    """Head logits for a batch; optionally keep per-layer caches."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != model.input_size or x.shape[2] != model.input_size:
        raise DataError(
            f"expected batch of {model.input_size}x{model.input_size} patches, got {x.shape}"
        )
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return (x, caches) if with_caches else x


def class_scores(model: Model, logits: np.ndarray) -> np.ndarray:
    """Class scores via the aggregation matrix: row j sums subclasses of j."""
    if model.aggregation_W is None:
        raise DataError("model has no aggregation stage")
    return logits @ model.aggregation_W.T


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits: np.ndarray, label: int) -> float:
    """Negative log softmax probability of the true label, one row."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[label])


def _mean_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    m = logits.shape[0]
    probs = softmax(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    ce = float(np.mean(logsumexp - z[np.arange(m), labels]))
    grad = probs.copy()
    grad[np.arange(m), labels] -= 1.0
    return ce, grad / m, probs


@dataclass(frozen=True)
class HierarchicalLossOutput:
    total: float
    subclass_ce: float
    class_ce: float
    decay: float


def hierarchical_loss(
    p: np.ndarray,
    subclass_labels: np.ndarray,
    class_labels: np.ndarray,
    W: AggregationMatrix | np.ndarray,
    alpha: float,
    beta: float,
    theta_sq_sum: float,
) -> tuple[HierarchicalLossOutput, np.ndarray, np.ndarray]:
    """Joint subclass and class loss on subclass logits p (batch x n).

    Class scores are W @ p per sample; both label spaces get softmax
    cross-entropy, averaged over the batch, and the class term is weighted
    by alpha. The decay term is beta/2 times the supplied squared
    parameter norm. Returns the loss parts, the gradient w.r.t. p, and the
    gradient w.r.t. W (used only when W is trainable).
    """
    Wm = W.W if isinstance(W, AggregationMatrix) else np.asarray(W, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    m, n = p.shape
    if Wm.shape[1] != n:
        raise DataError(f"aggregation matrix has {Wm.shape[1]} columns for {n} subclass logits")
    subclass_labels = np.asarray(subclass_labels)
    class_labels = np.asarray(class_labels)
    if isinstance(W, AggregationMatrix):
        expected = np.argmax(Wm[:, subclass_labels], axis=0)
        if not np.array_equal(expected, class_labels):
            bad = int(np.nonzero(expected != class_labels)[0][0])
            raise DataError(
                f"sample {bad}: class label {int(class_labels[bad])} is not the parent "
                f"of subclass {int(subclass_labels[bad])}"
            )

    subclass_ce, dp_sub, _ = _mean_ce(p, subclass_labels)
    scores = p @ Wm.T
    class_ce, dscores, q = _mean_ce(scores, class_labels)
    dp = dp_sub + alpha * (dscores @ Wm)
    dW = alpha * (dscores.T @ p)
    decay = 0.5 * beta * theta_sq_sum
    total = subclass_ce + alpha * class_ce + decay
    out = HierarchicalLossOutput(
        total=total, subclass_ce=subclass_ce, class_ce=class_ce, decay=decay
    )
    return out, dp, dW


@dataclass
class SGDState:
    """Per-stage optimizer state; the iteration drives the step schedule."""

    iteration: int = 0


def learning_rate(hyper: Hyperparameters, iteration: int) -> float:
    return hyper.lr0 / hyper.lr_factor ** (iteration // hyper.lr_step)


def _trainable_sq_sum(model: Model) -> float:
    total = 0.0
    for layer in model.layers:
        if layer.trainable:
            for v in layer.params.values():
                total += float(np.sum(v * v))
    if model.aggregation_W is not None and model.aggregation_trainable:
        total += float(np.sum(model.aggregation_W**2))
    return total


def backward_and_step(
    model: Model,
    batch: np.ndarray,
    labels,
    hyper: Hyperparameters,
    state: SGDState,
    hierarchical: bool = False,
    alpha: float | None = None,
) -> HierarchicalLossOutput:
    """One SGD step; only trainable tensors move.

    Plain mode treats ``labels`` as integer labels in the head's own label
    space. Hierarchical mode needs the aggregation stage attached and
    ``labels`` as a (subclass_labels, class_labels) pair. Weight decay is
    applied as part of the gradient on every trainable tensor.
    """
    theta_sq = _trainable_sq_sum(model)
    logits, caches = forward(model, batch, with_caches=True)
    dW_agg = None
    if hierarchical:
        if model.aggregation_W is None:
            raise DataError("hierarchical loss needs an aggregation stage on the model")
        sub_labels, cls_labels = labels
        out, dlogits, dW_agg = hierarchical_loss(
            logits,
            np.asarray(sub_labels),
            np.asarray(cls_labels),
            model.aggregation_W,
            hyper.alpha if alpha is None else alpha,
            hyper.beta,
            theta_sq,
        )
    else:
        labels = np.asarray(labels)
        ce, dlogits, _ = _mean_ce(logits, labels)
        decay = 0.5 * hyper.beta * theta_sq
        if model.head_label_space == SUBCLASS_SPACE:
            out = HierarchicalLossOutput(ce + decay, ce, float("nan"), decay)
        else:
            out = HierarchicalLossOutput(ce + decay, float("nan"), ce, decay)

    if not np.isfinite(out.total) or not np.all(np.isfinite(dlogits)):
        raise NumericalAbort("non-finite loss or gradient", state.iteration)

    lr = learning_rate(hyper, state.iteration)
    grad = dlogits
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        grad, grads = layer.backward(grad, cache)
        if layer.trainable:
            for name, g in grads.items():
                layer.params[name] -= lr * (g + hyper.beta * layer.params[name])
    if model.aggregation_W is not None and model.aggregation_trainable and dW_agg is not None:
        model.aggregation_W -= lr * (dW_agg + hyper.beta * model.aggregation_W)

    state.iteration += 1
    model.train_steps += 1
    return out


def replace_head(model: Model, new_out_dim: int, seed: int, label_space: str | None = None) -> Model:
    """Swap in a freshly initialized head; every other tensor is untouched."""
    if new_out_dim < 2:
        raise DataError(f"head needs at least 2 outputs, got {new_out_dim}")
    old = model.head
    model.layers[-1] = Dense(old.in_dim, new_out_dim, rng=derive_rng(seed, "head"))
    model.aggregation_W = None
    model.aggregation_trainable = False
    if label_space is not None:
        model.head_label_space = label_space
    return model


def add_hierarchy_head(model: Model, W: AggregationMatrix) -> Model:
    """Attach the class-score aggregation stage on top of a subclass head."""
    if W.n_subclasses != model.n_outputs:
        raise DataError(
            f"aggregation matrix expects {W.n_subclasses} subclass logits, head has "
            f"{model.n_outputs}"
        )
    model.aggregation_W = W.W.copy()
    model.aggregation_trainable = bool(W.trainable)
    model.head_label_space = SUBCLASS_SPACE
    return model


def set_aggregation_trainable(model: Model, trainable: bool) -> None:
    if model.aggregation_W is None:
        raise DataError("model has no aggregation stage")
    model.aggregation_trainable = trainable


# ---------------------------------------------------------------------------
# Checkpoints: json header + raw float64 tensor bytes, fully deterministic.
# ---------------------------------------------------------------------------

_MAGIC = b"SCHCKPT1\n"


def save_checkpoint(path, model: Model) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    layer_specs = []
    for i, layer in enumerate(model.layers):
        layer_specs.append(
            {"kind": layer.kind, "config": layer.config(), "trainable": bool(layer.trainable)}
        )
        for name in sorted(layer.params):
            tensors.append((f"layer{i}.{name}", layer.params[name]))
    if model.aggregation_W is not None:
        tensors.append(("aggregation.W", model.aggregation_W))
    header = {
        "version": 1,
        "input_size": model.input_size,
        "head_label_space": model.head_label_space,
        "hierarchy_id": model.hierarchy_id,
        "train_steps": model.train_steps,
        "layers": layer_specs,
        "aggregation": (
            {"trainable": bool(model.aggregation_trainable)}
            if model.aggregation_W is not None
            else None
        ),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode("utf-8"))
        layers: list[Layer] = []
        for spec in header["layers"]:
            cls = _LAYER_KINDS[spec["kind"]]
            layer = cls(**spec["config"])
            layer.trainable = spec["trainable"]
            layers.append(layer)
        model = Model(
            layers=layers,
            input_size=header["input_size"],
            head_label_space=header["head_label_space"],
            hierarchy_id=header["hierarchy_id"],
            train_steps=header["train_steps"],
        )
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
            name = entry["name"]
            if name == "aggregation.W":
                model.aggregation_W = data
            else:
                layer_part, param = name.split(".")
                layers[int(layer_part[len("layer"):])].params[param] = data
        if header["aggregation"] is not None:
            model.aggregation_trainable = header["aggregation"]["trainable"]
    return model
