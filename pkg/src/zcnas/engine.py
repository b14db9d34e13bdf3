"""Dense-tensor layer graph with reverse-mode differentiation.

Networks are ordered graphs of layer nodes; a node's input is the
elementwise sum of its predecessors' outputs, so residual wiring is
expressed in the graph rather than in the layer vocabulary.  All
arithmetic is 64-bit: downstream statistics take logs of small
per-sample gradient variances that underflow in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import StateError, StructuralError

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

LOSS_KINDS = ("cross_entropy", "mse", "sum")


def gelu(x: Array) -> Array:
    """Exact Gaussian-CDF GeLU: x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: Array) -> Array:
    """Analytic derivative Phi(x) + x * phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return phi_cdf + x * pdf


def _as64(x) -> Array:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Layer nodes
# ---------------------------------------------------------------------------


class LayerNode:
    """Base layer.  Subclasses implement forward/backward as pure functions
    of (input, params); per-pass state lives in the tape, so one instance
    can serve concurrent passes on distinct networks."""

    kind = "?"

    def __init__(self):
        self.depth_index = 0  # assigned by NetworkInstance, 1-based
        self.params: dict[str, Array] = {}

    @property
    def has_params(self) -> bool:
        return bool(self.params)

    @property
    def is_activation(self) -> bool:
        return self.kind in ("ReLU", "GeLU")

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: Array):
        """Returns (output, cache)."""
        raise NotImplementedError

    def backward(self, grad_y: Array, cache):
        """Returns (grad_x, {param name: grad})."""
        raise NotImplementedError

    def per_sample_param_grads(self, grad_y: Array, cache) -> dict[str, Array]:
        """Per-sample parameter gradients, shape (S, *param.shape).

        Valid when grad_y rows are per-sample loss gradients, which holds
        for any feed-forward graph: samples never mix across the batch
        axis buying us all S gradients from a single backward pass.
        """
        raise NotImplementedError

    def describe(self) -> str:
        return f"{self.kind}(depth={self.depth_index})"


class Linear(LayerNode):
    kind = "Linear"

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {"weight": np.zeros((out_features, in_features))}
        if bias:
            self.params["bias"] = np.zeros(out_features)

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.in_features:
            raise StructuralError(
                f"{self.describe()} expects (S, {self.in_features}), got {in_shape}"
            )
        return (in_shape[0], self.out_features)

    def forward(self, x):
        y = x @ self.params["weight"].T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y, x

    def backward(self, grad_y, cache):
        x = cache
        grads = {"weight": grad_y.T @ x}
        if "bias" in self.params:
            grads["bias"] = grad_y.sum(axis=0)
        return grad_y @ self.params["weight"], grads

    def per_sample_param_grads(self, grad_y, cache):
        x = cache
        out = {"weight": grad_y[:, :, None] * x[:, None, :]}
        if "bias" in self.params:
            out["bias"] = grad_y.copy()
        return out


class Conv2d(LayerNode):
    """Stride-1 convolution with 'same' zero padding (kernel 1 or 3)."""

    kind = "Conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.pad = kernel_size // 2
        self.params = {
            "weight": np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        }
        if bias:
            self.params["bias"] = np.zeros(out_channels)

    def out_shape(self, in_shape):
        if len(in_shape) != 4 or in_shape[1] != self.in_channels:
            raise StructuralError(
                f"{self.describe()} expects (S, {self.in_channels}, H, W), got {in_shape}"
            )
        return (in_shape[0], self.out_channels, in_shape[2], in_shape[3])

    def _im2col(self, x):
        s, c, h, w = x.shape
        k, p = self.kernel_size, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        patches = np.empty((s, c, k, k, h, w))
        for ki in range(k):
            for kj in range(k):
                patches[:, :, ki, kj] = xp[:, :, ki:ki + h, kj:kj + w]
        # (S, C*k*k, H*W); row order matches weight.reshape(out, -1) columns
        return patches.reshape(s, c * k * k, h * w)

    def forward(self, x):
        s, _, h, w = x.shape
        cols = self._im2col(x)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        y = np.matmul(wmat, cols)  # (S, out, HW)
        if "bias" in self.params:
            y = y + self.params["bias"][:, None]
        return y.reshape(s, self.out_channels, h, w), (cols, x.shape)

    def backward(self, grad_y, cache):
        cols, x_shape = cache
        s, c, h, w = x_shape
        k, p = self.kernel_size, self.pad
        gy = grad_y.reshape(s, self.out_channels, -1)  # (S, out, HW)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        grads = {"weight": np.tensordot(gy, cols, axes=([0, 2], [0, 2])).reshape(
            self.params["weight"].shape)}
        if "bias" in self.params:
            grads["bias"] = gy.sum(axis=(0, 2))
        gcols = np.matmul(wmat.T, gy)  # (S, C*k*k, HW)
        gpatches = gcols.reshape(s, c, k, k, h, w)
        gxp = np.zeros((s, c, h + 2 * p, w + 2 * p))
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + h, kj:kj + w] += gpatches[:, :, ki, kj]
        return gxp[:, :, p:p + h, p:p + w], grads

    def per_sample_param_grads(self, grad_y, cache):
        cols, _ = cache
        s = grad_y.shape[0]
        gy = grad_y.reshape(s, self.out_channels, -1)
        pw = np.matmul(gy, cols.transpose(0, 2, 1))  # (S, out, C*k*k)
        out = {"weight": pw.reshape((s,) + self.params["weight"].shape)}
        if "bias" in self.params:
            out["bias"] = gy.sum(axis=2)
        return out


class ReLU(LayerNode):
    kind = "ReLU"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, grad_y, cache):
        return np.where(cache, grad_y, 0.0), {}


class GeLU(LayerNode):
    kind = "GeLU"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return gelu(x), x

    def backward(self, grad_y, cache):
        return grad_y * gelu_grad(cache), {}


class Flatten(LayerNode):
    kind = "Flatten"

    def out_shape(self, in_shape):
        return (in_shape[0], int(np.prod(in_shape[1:])))

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_y, cache):
        return grad_y.reshape(cache), {}


class Pool(LayerNode):
    """Average pooling.  variant "avg3": 3x3, stride 1, zero padding 1,
    divisor fixed at 9; variant "global": mean over spatial dims."""

    kind = "Pool"
    VARIANTS = ("avg3", "global")

    def __init__(self, variant: str = "global"):
        super().__init__()
        if variant not in self.VARIANTS:
            raise StructuralError(f"unknown Pool variant {variant!r}")
        self.variant = variant

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise StructuralError(
                f"{self.describe()} expects (S, C, H, W), got {in_shape}"
            )
        if self.variant == "global":
            return in_shape[:2]
        return in_shape

    def forward(self, x):
        if self.variant == "global":
            return x.mean(axis=(2, 3)), x.shape
        s, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        y = np.zeros_like(x)
        for ki in range(3):
            for kj in range(3):
                y += xp[:, :, ki:ki + h, kj:kj + w]
        return y / 9.0, x.shape

    def backward(self, grad_y, cache):
        x_shape = cache
        if self.variant == "global":
            s, c, h, w = x_shape
            g = grad_y[:, :, None, None] / (h * w)
            return np.broadcast_to(g, x_shape).copy(), {}
        s, c, h, w = x_shape
        gp = np.zeros((s, c, h + 2, w + 2))
        g = grad_y / 9.0
        for ki in range(3):
            for kj in range(3):
                gp[:, :, ki:ki + h, kj:kj + w] += g
        return gp[:, :, 1:1 + h, 1:1 + w], {}


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

INPUT = -1  # predecessor index denoting the network input


class NetworkInstance:
    """Ordered layer graph.  ``inputs[i]`` lists predecessor indices of
    node i (INPUT = the network input); a node consumes the elementwise
    sum of its predecessors.  Immutable after construction except for
    explicit parameter writes; do not share one instance across threads
    mid-pass."""

    def __init__(self, layers: list[LayerNode], inputs: list[tuple[int, ...]] | None = None,
                 genotype_id: str | None = None, meta: dict | None = None):
        if inputs is None:
            inputs = [(i - 1,) for i in range(len(layers))]  # plain chain
        if len(inputs) != len(layers):
            raise StructuralError("inputs list must match layers list")
        for i, preds in enumerate(inputs):
            if not preds:
                raise StructuralError(f"node {i} has no inputs")
            for p in preds:
                if not (INPUT <= p < i):
                    raise StructuralError(f"node {i} references invalid predecessor {p}")
        self.layers = layers
        self.inputs = [tuple(p) for p in inputs]
        self.genotype_id = genotype_id
        self.meta = dict(meta or {})
        for i, layer in enumerate(layers):
            layer.depth_index = i + 1

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameterized_layers(self) -> list[LayerNode]:
        return [l for l in self.layers if l.has_params]

    def activation_layers(self) -> list[LayerNode]:
        return [l for l in self.layers if l.is_activation]

    def param_items(self):
        """Yields ((depth_index, name), array) over every parameter tensor."""
        for layer in self.layers:
            for name, arr in layer.params.items():
                yield (layer.depth_index, name), arr

    def get_param(self, depth_index: int, name: str) -> Array:
        return self.layers[depth_index - 1].params[name]

    def set_param(self, depth_index: int, name: str, value: Array) -> None:
        layer = self.layers[depth_index - 1]
        if layer.params[name].shape != value.shape:
            raise StructuralError(
                f"shape mismatch writing {name} of {layer.describe()}"
            )
        layer.params[name] = _as64(value)

    def infer_shapes(self, input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
        """Shape of every node's output; validates graph consistency."""
        shapes: list[tuple[int, ...]] = []
        for i, layer in enumerate(self.layers):
            preds = self.inputs[i]
            pred_shapes = [input_shape if p == INPUT else shapes[p] for p in preds]
            first = pred_shapes[0]
            for p, ps in zip(preds, pred_shapes):
                if ps != first:
                    a = "input" if preds[0] == INPUT else self.layers[preds[0]].describe()
                    b = "input" if p == INPUT else self.layers[p].describe()
                    raise StructuralError(
                        f"sum-join shape mismatch feeding {layer.describe()}: "
                        f"{a} gives {first}, {b} gives {ps}"
                    )
            shapes.append(layer.out_shape(first))
        return shapes

    def assert_activation_pairing(self):  # used by tests
        for l in self.layers:
            assert 1 <= l.depth_index <= self.depth


def chain(*layers: LayerNode, genotype_id: str | None = None) -> NetworkInstance:
    """Plain sequential network."""
    return NetworkInstance(list(layers), genotype_id=genotype_id)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ActivationCache:
    """Post-activation outputs of every ReLU/GeLU node, keyed by depth."""

    by_depth: dict[int, Array]
    total_depth: int


@dataclass
class ForwardResult:
    loss: float
    outputs: Array
    activations: ActivationCache
    loss_kind: str
    loss_scale: float
    per_sample_losses: Array | None
    # internals for backward()
    _values: list[Array] = field(repr=False, default_factory=list)
    _caches: list = field(repr=False, default_factory=list)
    _seed: Array | None = field(repr=False, default=None)  # d(per-sample loss)/d(outputs)


@dataclass
class GradientRecord:
    """One gradient array per parameter tensor, keyed by (depth, name)."""

    grads: dict[tuple[int, str], Array]
    per_sample: bool
    total_depth: int
    input_grad: Array | None = None

    def flat(self) -> Array:
        return np.concatenate([g.ravel() for g in self.grads.values()])


def _loss_and_seed(outputs: Array, labels, loss_kind: str):
    """Per-sample losses and d(loss_i)/d(outputs_i), un-averaged."""
    if loss_kind == "cross_entropy":
        if labels is None:
            raise StructuralError("cross_entropy requires integer labels")
        labels = np.asarray(labels)
        if outputs.ndim != 2:
            raise StructuralError("cross_entropy expects (S, classes) outputs")
        z = outputs - outputs.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        s = outputs.shape[0]
        losses = -logp[np.arange(s), labels]
        seed = np.exp(logp)
        seed[np.arange(s), labels] -= 1.0
        return losses, seed
    if loss_kind == "mse":
        if labels is None:
            raise StructuralError("mse requires labels")
        labels = _as64(labels)
        if labels.shape != outputs.shape:
            raise StructuralError(
                f"mse labels shape {labels.shape} != outputs shape {outputs.shape}"
            )
        diff = outputs - labels
        losses = 0.5 * (diff * diff).reshape(diff.shape[0], -1).sum(axis=1)
        return losses, diff
    if loss_kind == "sum":
        losses = outputs.reshape(outputs.shape[0], -1).sum(axis=1)
        return losses, np.ones_like(outputs)
    raise StructuralError(f"unknown loss kind {loss_kind!r}")


def forward(net: NetworkInstance, batch: Array, labels=None,
            loss_kind: str = "cross_entropy", loss_scale: float = 1.0) -> ForwardResult:
    """Full forward pass; caches per-node values for backward and all
    ReLU/GeLU post-activations.

    The batch loss is the mean of per-sample losses for cross_entropy and
    mse, and their sum for the internal "sum" kind.
    """
    batch = _as64(batch)
    if batch.shape[0] < 1:
        raise StructuralError("batch must contain at least one sample")
    net.infer_shapes(batch.shape)
    values: list[Array] = []
    caches: list = []
    activations: dict[int, Array] = {}
    for i, layer in enumerate(net.layers):
        preds = net.inputs[i]
        x = batch if preds[0] == INPUT else values[preds[0]]
        for p in preds[1:]:
            x = x + (batch if p == INPUT else values[p])
        y, cache = layer.forward(x)
        values.append(y)
        caches.append(cache)
        if layer.is_activation:
            activations[layer.depth_index] = y
    outputs = values[-1]
    per_losses, seed = _loss_and_seed(outputs, labels, loss_kind)
    agg = per_losses.sum() if loss_kind == "sum" else per_losses.mean()
    loss = float(loss_scale * agg)
    if not np.isfinite(loss):
        raise StructuralError("non-finite loss on forward pass")
    return ForwardResult(
        loss=loss,
        outputs=outputs,
        activations=ActivationCache(activations, net.depth),
        loss_kind=loss_kind,
        loss_scale=loss_scale,
        per_sample_losses=per_losses,
        _values=values,
        _caches=caches,
        _seed=seed,
    )


def _backprop(net: NetworkInstance, result: ForwardResult, out_grad: Array,
              per_sample: bool) -> GradientRecord:
    node_grads: list[Array | None] = [None] * net.depth
    node_grads[-1] = out_grad
    input_grad: Array | None = None
    grads: dict[tuple[int, str], Array] = {}
    for i in range(net.depth - 1, -1, -1):
        g = node_grads[i]
        if g is None:
            continue
        layer = net.layers[i]
        gx, pgrads = layer.backward(g, result._caches[i])
        if per_sample and layer.has_params:
            pgrads = layer.per_sample_param_grads(g, result._caches[i])
        for name, pg in pgrads.items():
            grads[(layer.depth_index, name)] = pg
        for p in net.inputs[i]:
            # accumulation always allocates fresh arrays, so sharing gx
            # across predecessors is safe
            if p == INPUT:
                input_grad = gx if input_grad is None else input_grad + gx
            elif node_grads[p] is None:
                node_grads[p] = gx
            else:
                node_grads[p] = node_grads[p] + gx
    # parameters of unreachable nodes (zero fan-in paths) get zero grads
    for key, arr in net.param_items():
        if key not in grads:
            shape = ((out_grad.shape[0],) + arr.shape) if per_sample else arr.shape
            grads[key] = np.zeros(shape)
    ordered = {key: grads[key] for key, _ in net.param_items()}
    return GradientRecord(ordered, per_sample=per_sample, total_depth=net.depth,
                          input_grad=input_grad)


def backward(net: NetworkInstance, result: ForwardResult) -> GradientRecord:
    """Gradient of the (scaled) batch loss for every parameter tensor."""
    if result._seed is None or len(result._values) != net.depth:
        raise StateError("backward requires a ForwardResult from this network")
    s = result.outputs.shape[0]
    scale = result.loss_scale if result.loss_kind == "sum" else result.loss_scale / s
    return _backprop(net, result, result._seed * scale, per_sample=False)


def input_gradient_rows(net: NetworkInstance, batch: Array) -> Array:
    """d(sum of outputs_i)/d(batch_i) per sample, flattened to (S, -1).

    Rows are exact per-sample input Jacobian contractions because samples
    never interact inside the graph.
    """
    res = forward(net, batch, labels=None, loss_kind="sum")
    rec = _backprop(net, res, res._seed, per_sample=False)
    if rec.input_grad is None:
        g = np.zeros_like(_as64(batch))
    else:
        g = rec.input_grad
    return g.reshape(g.shape[0], -1)


def per_sample_gradients(net: NetworkInstance, batch: Array, labels=None,
                         loss_kind: str = "cross_entropy",
                         method: str = "batched") -> list[GradientRecord]:
    """Gradients of each un-averaged per-sample loss.

    method "batched" extracts all S records from one forward/backward over
    the batch (rows of the flowing gradient are already per-sample);
    method "loop" runs S single-sample passes and exists as the slow
    reference the batched path is tested against.
    """
    batch = _as64(batch)
    s = batch.shape[0]
    if s < 2:
        raise ValueError("per-sample gradient statistics require S >= 2")
    if method == "loop":
        records = []
        for i in range(s):
            lab_i = None if labels is None else np.asarray(labels)[i:i + 1]
            res = forward(net, batch[i:i + 1], lab_i, loss_kind)
            rec = _backprop(net, res, res._seed, per_sample=False)
            records.append(GradientRecord(rec.grads, per_sample=True,
                                          total_depth=net.depth,
                                          input_grad=rec.input_grad))
        return records
    if method != "batched":
        raise ValueError(f"unknown per-sample method {method!r}")
    res = forward(net, batch, labels, loss_kind)
    stacked = _backprop(net, res, res._seed, per_sample=True)
    records = []
    for i in range(s):
        grads = {key: g[i] for key, g in stacked.grads.items()}
        ig = None if stacked.input_grad is None else stacked.input_grad[i:i + 1]
        records.append(GradientRecord(grads, per_sample=True,
                                      total_depth=net.depth, input_grad=ig))
    return records


def gradient_moments(net: NetworkInstance, batch: Array, labels=None,
                     loss_kind: str = "cross_entropy") -> dict[tuple[int, str], dict[str, Array]]:
    """Per-weight moments of per-sample gradients, one pass over the batch.

    For each parameter tensor returns sum_g, sum_abs, sum_sq over samples
    plus the sample count; enough to reconstruct mean/std of both raw and
    absolute per-sample gradients without materializing S records.
    """
    batch = _as64(batch)
    s = batch.shape[0]
    if s < 2:
        raise ValueError("gradient moments require S >= 2")
    res = forward(net, batch, labels, loss_kind)
    stacked = _backprop(net, res, res._seed, per_sample=True)
    moments = {}
    for key, g in stacked.grads.items():
        moments[key] = {
            "n": s,
            "sum": g.sum(axis=0),
            "sum_abs": np.abs(g).sum(axis=0),
            "sum_sq": (g * g).sum(axis=0),
        }
    return moments


def numerical_gradients(net: NetworkInstance, batch: Array, labels,
                        loss_kind: str, h: float = 1e-5,
                        max_entries_per_tensor: int | None = None,
                        rng: np.random.Generator | None = None):
    """Central finite differences of the batch loss; oracle for backward().

    Returns {(depth, name): {flat_index: derivative}}; optionally probes a
    random subset of entries per tensor to keep large nets affordable.
    """
    out: dict[tuple[int, str], dict[int, float]] = {}
    for key, arr in net.param_items():
        n = arr.size
        if max_entries_per_tensor is not None and n > max_entries_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_entries_per_tensor, replace=False)
        else:
            idxs = np.arange(n)
        entries = {}
        flat = arr.ravel()
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + h
            lp = forward(net, batch, labels, loss_kind).loss
            flat[j] = orig - h
            lm = forward(net, batch, labels, loss_kind).loss
            flat[j] = orig
            entries[int(j)] = (lp - lm) / (2.0 * h)
        out[key] = entries
    return out
