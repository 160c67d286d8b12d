"""
NNCORE SERVICE - Minimal deterministic training core

This service is the numerical engine every experiment runs on:
1. Layers (dense, conv2d, pad2d, relu, maxpool2x2, upsample2x, flatten, birnn, softmax_output)
   with hand-written forward/backward passes over numpy arrays
2. ModelGraph - ordered layers, named parameters and gradient buffers, seeded init
3. forward / backward - probabilities out, mean cross-entropy gradients back
4. sgd_step - momentum SGD with weight decay, per-step lr decay and a freeze mask
5. fit / predict / predict_features - batch loops used by the harness

Activations are NHWC for images and (batch, time, features) for sequences.
Every weight product goes through a matmul kernel so inference can swap the
BLAS product for the reference multiply kernel or the shift-add kernel.
"""

import copy
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

from powquant.utils import Constants, ShapeMismatchError, TargetError, get_logger

logger = get_logger(__name__)

# (activations 2-D, parameter name, weight 2-D) -> activations @ weight
MatmulKernel = Callable[[np.ndarray, str, np.ndarray], np.ndarray]

LAYER_KINDS = (
    "dense", "conv2d", "pad2d", "relu", "maxpool2x2", "upsample2x",
    "flatten", "birnn", "softmax_output",
)


def matmul_kernel(x: np.ndarray, name: str, w: np.ndarray) -> np.ndarray:
    """Default kernel: BLAS matrix product (training and everyday inference)."""
    return x @ w


def reduce_products(x: np.ndarray, w_shape: Tuple[int, int],
                    make_products: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """
    Row-chunked sum over the middle axis of an explicit (rows, K, N) product tensor.

    Both the multiply reference kernel and the shift-add kernel reduce through
    this function, so identical product tensors give identical sums.
    """
    rows = x.shape[0]
    chunk = max(1, Constants.KERNEL_CHUNK_ELEMENTS // max(1, w_shape[0] * w_shape[1]))
    out = None
    for start in range(0, rows, chunk):
        block = np.sum(make_products(x[start:start + chunk]), axis=1)
        if out is None:
            out = np.empty((rows, w_shape[1]), dtype=block.dtype)
        out[start:start + chunk] = block
    if out is None:
        out = np.zeros((0, w_shape[1]), dtype=x.dtype)
    return out


def multiply_kernel(x: np.ndarray, name: str, w: np.ndarray) -> np.ndarray:
    """Reference kernel: one multiply per weight, fixed-order accumulation."""
    return reduce_products(x, w.shape, lambda xs: xs[:, :, None] * w[None, :, :])


# Layer specification
@dataclass(frozen=True)
class LayerSpec:
    """Kind plus the hyperparameters that kind needs."""

    kind: str
    units: Optional[int] = None
    filters: Optional[int] = None
    kernel_size: Optional[int] = None
    hidden: Optional[int] = None
    pad: Optional[int] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind '{self.kind}'")


class Layer:
    """Base class: parameters, gradients and cached activations of one layer."""

    kind = "layer"
    quantizable: Tuple[str, ...] = ()

    def __init__(self):
        self.name = ""
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    def build(self, input_shape: Tuple[int, ...], rng: np.random.Generator, dtype) -> Tuple[int, ...]:
        return input_shape

    def forward(self, x: np.ndarray, kernel: MatmulKernel) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_name(self, key: str) -> str:
        return f"{self.name}.{key}"

    def _init_uniform(self, rng, shape, fan_in, dtype, gain=6.0):
        # He-style uniform scaled by fan-in
        limit = np.sqrt(gain / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense(Layer):
    """Affine map over the last axis (time-distributed on sequences)."""

    kind = "dense"
    quantizable = ("weight",)

    def __init__(self, units: int):
        super().__init__()
        self.units = units

    def build(self, input_shape, rng, dtype):
        fan_in = input_shape[-1]
        self.params["weight"] = self._init_uniform(rng, (fan_in, self.units), fan_in, dtype)
        self.params["bias"] = np.zeros(self.units, dtype=dtype)
        return input_shape[:-1] + (self.units,)

    def forward(self, x, kernel):
        x2 = x.reshape(-1, x.shape[-1])
        y = kernel(x2, self.param_name("weight"), self.params["weight"]) + self.params["bias"]
        self._cache = x2
        return y.reshape(x.shape[:-1] + (self.units,))

    def backward(self, grad):
        x2 = self._cache
        g2 = grad.reshape(-1, self.units)
        self.grads["weight"] = x2.T @ g2
        self.grads["bias"] = g2.sum(axis=0)
        dx = g2 @ self.params["weight"].T
        return dx.reshape(grad.shape[:-1] + (x2.shape[-1],))


class Conv2D(Layer):
    """Stride-1, valid-padding convolution via im2col."""

    kind = "conv2d"
    quantizable = ("weight",)

    def __init__(self, filters: int, kernel_size: int):
        super().__init__()
        self.filters = filters
        self.k = kernel_size

    def build(self, input_shape, rng, dtype):
        h, w, c = input_shape
        if h < self.k or w < self.k:
            raise ShapeMismatchError(f"conv2d kernel {self.k} larger than input {h}x{w}")
        fan_in = self.k * self.k * c
        self.params["weight"] = self._init_uniform(rng, (self.k, self.k, c, self.filters), fan_in, dtype)
        self.params["bias"] = np.zeros(self.filters, dtype=dtype)
        return (h - self.k + 1, w - self.k + 1, self.filters)

    def forward(self, x, kernel):
        b, h, w, c = x.shape
        ho, wo = h - self.k + 1, w - self.k + 1
        # (b, ho, wo, c, k, k) -> (b, ho, wo, k, k, c) so columns match the weight layout
        windows = sliding_window_view(x, (self.k, self.k), axis=(1, 2))
        cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, -1)
        w2 = self.params["weight"].reshape(-1, self.filters)
        y = kernel(cols, self.param_name("weight"), w2) + self.params["bias"]
        self._cache = (cols, x.shape)
        return y.reshape(b, ho, wo, self.filters)

    def backward(self, grad):
        cols, in_shape = self._cache
        b, h, w, c = in_shape
        ho, wo = h - self.k + 1, w - self.k + 1
        g2 = grad.reshape(-1, self.filters)
        w2 = self.params["weight"].reshape(-1, self.filters)
        self.grads["weight"] = (cols.T @ g2).reshape(self.params["weight"].shape)
        self.grads["bias"] = g2.sum(axis=0)
        dcols = (g2 @ w2.T).reshape(b, ho, wo, self.k, self.k, c)
        dx = np.zeros(in_shape, dtype=grad.dtype)
        for i in range(self.k):
            for j in range(self.k):
                dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
        return dx


class Pad2D(Layer):
    """Zero padding on both spatial axes."""

    kind = "pad2d"

    def __init__(self, pad: int):
        super().__init__()
        self.pad = pad

    def build(self, input_shape, rng, dtype):
        h, w, c = input_shape
        return (h + 2 * self.pad, w + 2 * self.pad, c)

    def forward(self, x, kernel):
        p = self.pad
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))

    def backward(self, grad):
        p = self.pad
        if p == 0:
            return grad
        return grad[:, p:-p, p:-p, :]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, kernel):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype)

    def backward(self, grad):
        return np.where(self._cache, grad, 0).astype(grad.dtype)


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2x2"

    def build(self, input_shape, rng, dtype):
        h, w, c = input_shape
        if h < 2 or w < 2:
            raise ShapeMismatchError(f"maxpool2x2 needs at least 2x2 input, got {h}x{w}")
        return (h // 2, w // 2, c)

    def forward(self, x, kernel):
        b, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        blocks = x[:, :h2 * 2, :w2 * 2, :].reshape(b, h2, 2, w2, 2, c)
        blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
        # ties route the gradient to the first maximum
        arg = blocks.argmax(axis=-1)
        self._cache = (arg, x.shape)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        arg, in_shape = self._cache
        b, h, w, c = in_shape
        h2, w2 = h // 2, w // 2
        onehot = np.zeros(grad.shape + (4,), dtype=grad.dtype)
        np.put_along_axis(onehot, arg[..., None], grad[..., None], axis=-1)
        blocks = onehot.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h2 * 2, w2 * 2, c)
        dx = np.zeros(in_shape, dtype=grad.dtype)
        dx[:, :h2 * 2, :w2 * 2, :] = blocks
        return dx


class Upsample2x(Layer):
    """Nearest-neighbour 2x upsampling (FCN decoder)."""

    kind = "upsample2x"

    def build(self, input_shape, rng, dtype):
        h, w, c = input_shape
        return (h * 2, w * 2, c)

    def forward(self, x, kernel):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, grad):
        b, h, w, c = grad.shape
        return grad.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class Flatten(Layer):
    kind = "flatten"

    def build(self, input_shape, rng, dtype):
        return (int(np.prod(input_shape)),)

    def forward(self, x, kernel):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cache)


class BiRNN(Layer):
    """
    Vanilla bidirectional tanh RNN over (batch, time, features).

    Output concatenates the forward and backward hidden states: (batch, time, 2*hidden).
    """

    kind = "birnn"
    quantizable = ("wx_f", "wh_f", "wx_b", "wh_b")

    def __init__(self, hidden: int):
        super().__init__()
        self.hidden = hidden

    def build(self, input_shape, rng, dtype):
        t, f = input_shape
        h = self.hidden
        for d in ("f", "b"):
            self.params[f"wx_{d}"] = self._init_uniform(rng, (f, h), f, dtype, gain=1.0)
            self.params[f"wh_{d}"] = self._init_uniform(rng, (h, h), h, dtype, gain=1.0)
            self.params[f"b_{d}"] = np.zeros(h, dtype=dtype)
        return (t, 2 * h)

    def _run(self, x, d, kernel):
        b, t, f = x.shape
        xw = kernel(x.reshape(-1, f), self.param_name(f"wx_{d}"), self.params[f"wx_{d}"])
        xw = xw.reshape(b, t, self.hidden) + self.params[f"b_{d}"]
        order = range(t) if d == "f" else range(t - 1, -1, -1)
        states = np.zeros((b, t, self.hidden), dtype=x.dtype)
        h = np.zeros((b, self.hidden), dtype=x.dtype)
        for step in order:
            a = xw[:, step] + kernel(h, self.param_name(f"wh_{d}"), self.params[f"wh_{d}"])
            h = np.tanh(a)
            states[:, step] = h
        return states

    def forward(self, x, kernel):
        hf = self._run(x, "f", kernel)
        hb = self._run(x, "b", kernel)
        self._cache = (x, hf, hb)
        return np.concatenate([hf, hb], axis=-1)

    def _bptt(self, x, states, grad, d):
        b, t, f = x.shape
        wh = self.params[f"wh_{d}"]
        order = list(range(t)) if d == "f" else list(range(t - 1, -1, -1))
        da_all = np.zeros_like(states)
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((b, self.hidden), dtype=grad.dtype)
        for pos in range(t - 1, -1, -1):
            step = order[pos]
            dh = grad[:, step] + dh_next
            da = dh * (1 - states[:, step] ** 2)
            da_all[:, step] = da
            if pos > 0:
                dwh += states[:, order[pos - 1]].T @ da
            dh_next = da @ wh.T
        x2 = x.reshape(-1, f)
        da2 = da_all.reshape(-1, self.hidden)
        self.grads[f"wx_{d}"] = x2.T @ da2
        self.grads[f"wh_{d}"] = dwh
        self.grads[f"b_{d}"] = da2.sum(axis=0)
        return (da2 @ self.params[f"wx_{d}"].T).reshape(x.shape)

    def backward(self, grad):
        x, hf, hb = self._cache
        h = self.hidden
        return self._bptt(x, hf, grad[..., :h], "f") + self._bptt(x, hb, grad[..., h:], "b")


class SoftmaxOutput(Layer):
    """Softmax over the last axis; paired with cross-entropy in backward()."""

    kind = "softmax_output"

    def forward(self, x, kernel):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=-1, keepdims=True)
        self._cache = probs
        return probs

    def backward(self, grad):
        # grad here is already d(loss)/d(logits); see backward()
        return grad


def build_layer(spec: LayerSpec) -> Layer:
    """Instantiate a layer from its spec."""
    if spec.kind == "dense":
        return Dense(spec.units)
    if spec.kind == "conv2d":
        return Conv2D(spec.filters, spec.kernel_size)
    if spec.kind == "pad2d":
        return Pad2D(spec.pad)
    if spec.kind == "birnn":
        return BiRNN(spec.hidden)
    simple = {"relu": ReLU, "maxpool2x2": MaxPool2x2, "upsample2x": Upsample2x,
              "flatten": Flatten, "softmax_output": SoftmaxOutput}
    return simple[spec.kind]()


class ModelGraph:
    """Ordered layers with seeded parameters; holds W, the full float weight set."""

    def __init__(self, input_shape: Sequence[int], specs: Sequence[LayerSpec],
                 seed: int = 0, dtype=np.float32, name: str = "model"):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.specs = list(specs)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.name = name
        self.layers: List[Layer] = []

        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for index, spec in enumerate(self.specs):
            layer = build_layer(spec)
            layer.name = f"{index}.{spec.kind}"
            shape = layer.build(shape, rng, self.dtype)
            self.layers.append(layer)
        self.output_shape = shape

    @property
    def params(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for layer in self.layers:
            for key, value in layer.params.items():
                out[layer.param_name(key)] = value
        return out

    @property
    def grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for key, value in layer.grads.items():
                out[layer.param_name(key)] = value
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        layer_name, key = name.rsplit(".", 1)
        for layer in self.layers:
            if layer.name == layer_name and key in layer.params:
                if layer.params[key].shape != value.shape:
                    raise ShapeMismatchError(
                        f"{name}: expected shape {layer.params[key].shape}, got {value.shape}"
                    )
                layer.params[key] = np.asarray(value, dtype=self.dtype).copy()
                return
        raise KeyError(name)

    def quantizable_names(self) -> List[str]:
        """Weight matrices eligible for quantization (biases never are)."""
        return [layer.param_name(key) for layer in self.layers for key in layer.quantizable]

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ShapeMismatchError(f"state is missing parameters: {sorted(missing)}")
        for name, value in state.items():
            self.set_param(name, value)

    def penultimate_index(self) -> int:
        """Index of the last layer that owns parameters."""
        for index in range(len(self.layers) - 1, -1, -1):
            if self.layers[index].params:
                return index
        raise ShapeMismatchError("model has no parametric layer")


def copy_model(model: ModelGraph) -> ModelGraph:
    return copy.deepcopy(model)


def _check_batch(model: ModelGraph, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != len(model.input_shape) + 1 or tuple(batch.shape[1:]) != model.input_shape:
        raise ShapeMismatchError(
            f"batch shape {batch.shape[1:]} does not match model input {model.input_shape}"
        )
    return batch.astype(model.dtype, copy=False)


def forward(model: ModelGraph, batch: np.ndarray, kernel: Optional[MatmulKernel] = None) -> np.ndarray:
    """Run the model; returns per-class probabilities on the last axis."""
    kernel = kernel or matmul_kernel
    x = _check_batch(model, batch)
    for layer in model.layers:
        x = layer.forward(x, kernel)
    return x


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the softmax logits."""
    targets = np.asarray(targets)
    if targets.shape != probs.shape[:-1]:
        raise TargetError(f"targets shape {targets.shape} does not match predictions {probs.shape[:-1]}")
    if targets.dtype.kind not in "iu":
        raise TargetError("targets must be integer class indices")
    n_classes = probs.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise TargetError(f"targets must lie in [0, {n_classes})")

    flat_p = probs.reshape(-1, n_classes)
    flat_t = targets.reshape(-1)
    rows = np.arange(flat_t.size)
    picked = np.clip(flat_p[rows, flat_t], np.finfo(probs.dtype).tiny, None)
    loss = float(-np.mean(np.log(picked)))

    grad = flat_p.copy()
    grad[rows, flat_t] -= 1
    grad /= flat_t.size
    return loss, grad.reshape(probs.shape)


def backward(model: ModelGraph, batch: np.ndarray, targets: np.ndarray) -> Tuple[Dict[str, np.ndarray], float]:
    """Gradients of mean cross-entropy w.r.t. every parameter, plus the loss."""
    if not isinstance(model.layers[-1], SoftmaxOutput):
        raise ShapeMismatchError("backward() needs a softmax_output head")
    probs = forward(model, batch)
    loss, grad = cross_entropy(probs, targets)
    for layer in reversed(model.layers):
        grad = layer.backward(grad)
    return model.grads, loss


@dataclass
class OptimizerState:
    """Momentum SGD hyperparameters plus velocity buffers."""

    learning_rate: float
    lr_decay: float = 0.0
    momentum: float = 0.0
    weight_decay: float = 0.0
    step_drop_at: Optional[int] = None
    step_drop_lr: Optional[float] = None
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], opt: OptimizerState,
             freeze_mask: Optional[Dict[str, np.ndarray]] = None) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    One momentum-SGD update, in place.

    Free weights: v <- momentum*v + g + weight_decay*w; w <- w - lr*v.
    Frozen weights (freeze_mask True) keep their exact bits and a zero velocity.
    """
    freeze_mask = freeze_mask or {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != w.shape:
            raise ShapeMismatchError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(w)
        v *= opt.momentum
        v += g
        if opt.weight_decay:
            v += opt.weight_decay * w

        frozen = freeze_mask.get(name)
        if frozen is None:
            w -= opt.learning_rate * v
        else:
            if frozen.shape != w.shape:
                raise ShapeMismatchError(f"{name}: freeze mask shape {frozen.shape} != {w.shape}")
            np.subtract(w, opt.learning_rate * v, out=w, where=~frozen)
            v[frozen] = 0

    opt.step_count += 1
    opt.learning_rate *= (1.0 - opt.lr_decay)
    if opt.step_drop_at is not None and opt.step_count == opt.step_drop_at and opt.step_drop_lr:
        logger.info(f"learning rate step drop to {opt.step_drop_lr} at step {opt.step_count}")
        opt.learning_rate = opt.step_drop_lr
    return params, opt


def fit(model: ModelGraph, X: np.ndarray, Y: np.ndarray, opt: OptimizerState, epochs: int,
        batch_size: int = Constants.DEFAULT_BATCH_SIZE, freeze_mask: Optional[Dict[str, np.ndarray]] = None,
        seed: int = 0, progress: bool = False) -> List[float]:
    """
    Train for a number of epochs with seeded shuffling; returns mean loss per epoch.
    """
    rng = np.random.default_rng(seed)
    n = len(X)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in tqdm(range(0, n, batch_size), disable=not progress, desc=f"epoch {epoch + 1}/{epochs}"):
            idx = order[start:start + batch_size]
            grads, loss = backward(model, X[idx], Y[idx])
            sgd_step(model.params, grads, opt, freeze_mask)
            total += loss
            batches += 1
        mean_loss = total / max(batches, 1)
        losses.append(mean_loss)
        logger.debug(f"{model.name} epoch {epoch + 1}: loss {mean_loss:.4f}",
                     extra={"event": "epoch_end", "model": model.name, "epoch": epoch + 1, "loss": mean_loss})
    return losses


def predict(model: ModelGraph, X: np.ndarray, batch_size: int = 256,
            kernel: Optional[MatmulKernel] = None) -> np.ndarray:
    """Batched forward pass."""
    outputs = [forward(model, X[start:start + batch_size], kernel) for start in range(0, len(X), batch_size)]
    if not outputs:
        return np.zeros((0,) + tuple(model.output_shape), dtype=model.dtype)
    return np.concatenate(outputs, axis=0)


def predict_features(model: ModelGraph, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """
    Mean-pooled activations entering the last parametric layer, one row per sample.
    """
    stop = model.penultimate_index()
    rows = []
    for start in range(0, len(X), batch_size):
        x = _check_batch(model, X[start:start + batch_size])
        for layer in model.layers[:stop]:
            x = layer.forward(x, matmul_kernel)
        rows.append(x.reshape(x.shape[0], -1, x.shape[-1]).mean(axis=1))
    return np.concatenate(rows, axis=0)
