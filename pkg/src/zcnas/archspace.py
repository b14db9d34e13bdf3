"""Toy cell-based search spaces: genotype sampling, instantiation, counting.

Genotypes serialize to a canonical JSON text form::

    {"depth":<int>,"genes":[[<op>,<width>],...],"space":"<space id>"}

written with sorted keys and no whitespace, so equal genotypes always
produce byte-identical text.  The identity hash is derived from that text.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import (
    INPUT,
    Conv2d,
    Flatten,
    GeLU,
    Linear,
    LayerNode,
    NetworkInstance,
    Pool,
    ReLU,
)
from .errors import ConfigError, StructuralError

OPS = ("skip", "zeroize", "conv1x1", "conv3x3", "avgpool")
WIDTH_SENSITIVE_OPS = ("conv1x1", "conv3x3")
ACTIVATIONS = {"ReLU": ReLU, "GeLU": GeLU}

DEFAULT_OP_QUALITY = {
    "conv3x3": 1.0,
    "conv1x1": 0.7,
    "avgpool": 0.35,
    "skip": 0.2,
    "zeroize": 0.05,
}

INIT_STRATEGIES = ("KaimingUniform", "KaimingNormal", "XavierUniform",
                   "XavierNormal", "Gaussian")


@dataclass(frozen=True)
class SearchSpaceDef:
    """Discrete cell-based space; immutable and shareable across workers."""

    space_id: str
    op_vocabulary: tuple[str, ...]
    depth_range: tuple[int, int]
    width_choices: tuple[int, ...]
    activation: str = "ReLU"
    in_channels: int = 3
    image_size: int = 8
    stem_width: int = 8
    n_classes: int = 10
    default_batch_size: int = 64
    op_quality: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_OP_QUALITY))
    accuracy_noise: float = 0.5
    accuracy_saturation: float = 4.0
    accuracy_seed: int = 0
    width_in_accuracy: bool = True  # False: channel widths do not move accuracy
    # "residual": cell = act(branch(x) + shortcut(x)); "chain": cell is a
    # plain op -> activation sequence (keeps activation scales flat with
    # depth, so gradient statistics stay comparable across percentiles)
    cell_style: str = "residual"
    # per-position width palettes (requires a fixed depth); used by the
    # planted-signal space to keep early cells narrow and late cells wide
    position_widths: tuple[tuple[int, ...], ...] | None = None
    # inclusive gene-index range that alone drives synthetic accuracy
    signal_band: tuple[int, int] | None = None

    def widths_at(self, position: int) -> tuple[int, ...]:
        if self.position_widths is not None:
            return self.position_widths[position]
        return self.width_choices

    @property
    def max_width(self) -> int:
        if self.position_widths is not None:
            return max(w for pal in self.position_widths for w in pal)
        return max(self.width_choices)


def validate_space(space: SearchSpaceDef) -> None:
    if not space.op_vocabulary:
        raise ConfigError("op_vocabulary must not be empty")
    for op in space.op_vocabulary:
        if op not in OPS:
            raise ConfigError(f"unknown op {op!r}; known ops: {OPS}")
    lo, hi = space.depth_range
    if not (1 <= lo <= hi):
        raise ConfigError(f"bad depth_range {space.depth_range}")
    if space.activation not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {tuple(ACTIVATIONS)}")
    if space.cell_style not in ("residual", "chain"):
        raise ConfigError(f"unknown cell_style {space.cell_style!r}")
    if space.cell_style == "chain" and "zeroize" in space.op_vocabulary:
        raise ConfigError("zeroize requires residual cells; a chain zero map "
                          "would disconnect the network")
    if space.position_widths is not None:
        if lo != hi:
            raise ConfigError("position_widths requires a fixed depth")
        if len(space.position_widths) != lo:
            raise ConfigError("position_widths length must equal the fixed depth")
        if any(not pal for pal in space.position_widths):
            raise ConfigError("every position width palette must be non-empty")
    elif not space.width_choices:
        raise ConfigError("width_choices must not be empty")
    if space.signal_band is not None:
        b0, b1 = space.signal_band
        if not (0 <= b0 <= b1 < hi):
            raise ConfigError(f"signal_band {space.signal_band} outside gene range")


def builtin_space(name: str) -> SearchSpaceDef:
    if name == "toy-micro":
        return SearchSpaceDef(
            space_id="toy-micro",
            op_vocabulary=OPS,
            depth_range=(3, 5),
            width_choices=(8, 16),
            activation="ReLU",
            default_batch_size=64,
        )
    if name == "toy-micro-mini":
        # fully enumerable (5 ops ** depth 5 = 3125), single width
        return SearchSpaceDef(
            space_id="toy-micro-mini",
            op_vocabulary=OPS,
            depth_range=(5, 5),
            width_choices=(8,),
            activation="ReLU",
            default_batch_size=64,
        )
    if name == "toy-macro":
        return SearchSpaceDef(
            space_id="toy-macro",
            op_vocabulary=("conv1x1", "conv3x3"),
            depth_range=(3, 7),
            width_choices=(8, 16, 32),
            activation="GeLU",
            default_batch_size=32,
            cell_style="chain",
        )
    if name == "toy-planted":
        # early genes are narrow distractors, late genes carry the signal
        return SearchSpaceDef(
            space_id="toy-planted",
            op_vocabulary=("conv1x1", "conv3x3", "avgpool"),
            depth_range=(10, 10),
            width_choices=(6,),
            activation="ReLU",
            stem_width=6,
            default_batch_size=64,
            cell_style="chain",
            position_widths=tuple([(6,)] * 6 + [(12, 24)] * 4),
            signal_band=(6, 9),
        )
    raise ConfigError(f"unknown builtin space {name!r}")


# ---------------------------------------------------------------------------
# Genotypes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchGenotype:
    space: SearchSpaceDef
    genes: tuple[tuple[str, int], ...]

    @property
    def depth(self) -> int:
        return len(self.genes)

    def canonical_text(self) -> str:
        payload = {
            "depth": self.depth,
            "genes": [[op, int(w)] for op, w in self.genes],
            "space": self.space.space_id,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @property
    def identity(self) -> str:
        digest = hashlib.sha256(self.canonical_text().encode()).hexdigest()
        return "g" + digest[:16]


def parse_genotype(text: str, space: SearchSpaceDef) -> ArchGenotype:
    try:
        payload = json.loads(text)
        genes = tuple((str(op), int(w)) for op, w in payload["genes"])
        depth = int(payload["depth"])
        space_id = payload["space"]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"unparsable genotype text: {exc}") from exc
    if space_id != space.space_id:
        raise ConfigError(f"genotype belongs to {space_id!r}, not {space.space_id!r}")
    if depth != len(genes):
        raise ConfigError("genotype depth field disagrees with genes list")
    g = ArchGenotype(space, genes)
    _check_genes(g)
    return g


def _check_genes(g: ArchGenotype) -> None:
    lo, hi = g.space.depth_range
    if not (lo <= g.depth <= hi):
        raise ConfigError(f"depth {g.depth} outside {g.space.depth_range}")
    for pos, (op, w) in enumerate(g.genes):
        if op not in g.space.op_vocabulary:
            raise ConfigError(f"op {op!r} at position {pos} not in vocabulary")
        if w not in g.space.widths_at(pos):
            raise ConfigError(f"width {w} at position {pos} not in palette")


def _depth_sizes(space: SearchSpaceDef) -> list[tuple[int, int]]:
    """(depth, #genotypes of that depth) pairs."""
    lo, hi = space.depth_range
    out = []
    for d in range(lo, hi + 1):
        n = 1
        for pos in range(d):
            n *= len(space.op_vocabulary) * len(space.widths_at(pos))
        out.append((d, n))
    return out


def space_size(space: SearchSpaceDef) -> int:
    validate_space(space)
    return sum(n for _, n in _depth_sizes(space))


def genotype_from_index(space: SearchSpaceDef, index: int) -> ArchGenotype:
    """Mixed-radix decode of a flat index into a genotype (uniform coding)."""
    if index < 0:
        raise ConfigError("index must be non-negative")
    for d, n in _depth_sizes(space):
        if index < n:
            genes = []
            rem = index
            for pos in range(d):
                pal = space.widths_at(pos)
                radix = len(space.op_vocabulary) * len(pal)
                digit = rem % radix
                rem //= radix
                genes.append((space.op_vocabulary[digit // len(pal)],
                              pal[digit % len(pal)]))
            return ArchGenotype(space, tuple(genes))
        index -= n
    raise ConfigError("index beyond space size")


def sample_genotype(space: SearchSpaceDef, rng) -> ArchGenotype:
    """Uniform draw over the whole discrete space."""
    validate_space(space)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    sizes = _depth_sizes(space)
    total = sum(n for _, n in sizes)
    # two-stage draw keeps every genotype equally likely for huge spaces
    u = int(rng.integers(0, total)) if total <= 2 ** 62 else None
    if u is not None:
        return genotype_from_index(space, u)
    probs = np.array([n for _, n in sizes], dtype=np.float64)
    d = int(rng.choice([d for d, _ in sizes], p=probs / probs.sum()))
    genes = []
    for pos in range(d):
        op = space.op_vocabulary[int(rng.integers(0, len(space.op_vocabulary)))]
        pal = space.widths_at(pos)
        genes.append((op, pal[int(rng.integers(0, len(pal)))]))
    return ArchGenotype(space, tuple(genes))


def enumerate_space(space: SearchSpaceDef, check_collisions: bool = True):
    """Yields every genotype; verifies identity-hash injectivity as it goes
    (spaces this is called on are small by construction)."""
    total = space_size(space)
    seen: set[str] = set() if (check_collisions and total <= 10 ** 6) else None
    for i in range(total):
        g = genotype_from_index(space, i)
        if seen is not None:
            ident = g.identity
            if ident in seen:
                raise ConfigError(f"identity hash collision at index {i}")
            seen.add(ident)
        yield g


def mutate_genotype(g: ArchGenotype, rng: np.random.Generator,
                    rate: float) -> ArchGenotype:
    """Point mutation over op/width/depth genes."""
    space = g.space
    genes = list(g.genes)
    lo, hi = space.depth_range
    # depth gene: insert or drop one cell (only in variable-depth spaces)
    if lo != hi and rng.random() < rate:
        if len(genes) > lo and (len(genes) >= hi or rng.random() < 0.5):
            genes.pop(int(rng.integers(0, len(genes))))
        else:
            pos = int(rng.integers(0, len(genes) + 1))
            op = space.op_vocabulary[int(rng.integers(0, len(space.op_vocabulary)))]
            pal = space.widths_at(min(pos, len(genes)) if space.position_widths else 0)
            genes.insert(pos, (op, pal[int(rng.integers(0, len(pal)))]))
    for pos in range(len(genes)):
        op, w = genes[pos]
        if rng.random() < rate:
            op = space.op_vocabulary[int(rng.integers(0, len(space.op_vocabulary)))]
        if rng.random() < rate:
            pal = space.widths_at(pos)
            w = pal[int(rng.integers(0, len(pal)))]
        genes[pos] = (op, w)
    mutated = ArchGenotype(space, tuple(genes))
    _check_genes(mutated)
    return mutated


# ---------------------------------------------------------------------------
# Instantiation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitStrategy:
    kind: str = "KaimingUniform"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in INIT_STRATEGIES:
            raise ConfigError(f"unknown init strategy {self.kind!r}")


def _fans(arr: np.ndarray) -> tuple[int, int]:
    if arr.ndim == 2:  # linear (out, in)
        return arr.shape[1], arr.shape[0]
    if arr.ndim == 4:  # conv (out, in, k, k)
        rec = arr.shape[2] * arr.shape[3]
        return arr.shape[1] * rec, arr.shape[0] * rec
    raise StructuralError(f"cannot infer fans for shape {arr.shape}")


def init_weight(arr: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = _fans(arr)
    if kind == "KaimingUniform":
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=arr.shape)
    if kind == "KaimingNormal":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=arr.shape)
    if kind == "XavierUniform":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=arr.shape)
    if kind == "XavierNormal":
        return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=arr.shape)
    if kind == "Gaussian":
        return rng.normal(0.0, 0.1, size=arr.shape)
    raise ConfigError(f"unknown init strategy {kind!r}")


def initialize(net: NetworkInstance, strategy: InitStrategy) -> NetworkInstance:
    """Weights per strategy, biases zero; one stream in topological order,
    so (strategy, seed, genotype) -> bit-identical parameters."""
    rng = np.random.default_rng(strategy.seed)
    for (depth, name), arr in net.param_items():
        if name == "bias":
            net.set_param(depth, name, np.zeros(arr.shape))
        else:
            net.set_param(depth, name, init_weight(arr, strategy.kind, rng))
    return net


def _build_graph(genotype: ArchGenotype) -> tuple[list[LayerNode], list[tuple[int, ...]]]:
    space = genotype.space
    act_cls = ACTIVATIONS[space.activation]
    layers: list[LayerNode] = []
    inputs: list[tuple[int, ...]] = []

    def add(layer, preds) -> int:
        layers.append(layer)
        inputs.append(tuple(preds))
        return len(layers) - 1

    stem = add(Conv2d(space.in_channels, space.stem_width, 3), (INPUT,))
    prev = add(act_cls(), (stem,))
    channels = space.stem_width
    chain_cells = space.cell_style == "chain"
    for op, width in genotype.genes:
        if op == "skip":
            continue  # identity wire, no nodes
        if op == "zeroize":
            # the chosen branch is an exact zero map, so only the identity
            # shortcut reaches the cell activation
            prev = add(act_cls(), (prev,))
            continue
        if op == "avgpool":
            branch = add(Pool("avg3"), (prev,))
            prev = add(act_cls(), (branch,) if chain_cells else (branch, prev))
            continue
        k = 1 if op == "conv1x1" else 3
        branch = add(Conv2d(channels, width, k), (prev,))
        if chain_cells:
            prev = add(act_cls(), (branch,))
        else:
            if width == channels:
                shortcut = prev
            else:
                shortcut = add(Conv2d(channels, width, 1, bias=False), (prev,))
            prev = add(act_cls(), (branch, shortcut))
        channels = width
    gap = add(Pool("global"), (prev,))
    flat = add(Flatten(), (gap,))
    add(Linear(channels, space.n_classes), (flat,))
    return layers, inputs


def instantiate(genotype: ArchGenotype, strategy: InitStrategy) -> NetworkInstance:
    _check_genes(genotype)
    layers, inputs = _build_graph(genotype)
    net = NetworkInstance(layers, inputs, genotype_id=genotype.identity,
                          meta={"genotype": genotype, "strategy": strategy})
    net.infer_shapes((1, genotype.space.in_channels,
                      genotype.space.image_size, genotype.space.image_size))
    return initialize(net, strategy)


def count_params(net: NetworkInstance) -> int:
    return int(sum(arr.size for _, arr in net.param_items()))


def count_flops(net: NetworkInstance, input_shape: tuple[int, ...]) -> int:
    """Multiply-accumulates of linear/conv nodes for one sample."""
    shapes = net.infer_shapes(input_shape)
    total = 0
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv2d):
            _, out_c, h, w = shapes[i]
            total += out_c * layer.in_channels * layer.kernel_size ** 2 * h * w
        elif isinstance(layer, Linear):
            total += layer.in_features * layer.out_features
    return int(total)


# ---------------------------------------------------------------------------
# Synthetic ground truth and batches
# ---------------------------------------------------------------------------


def _capacity(space: SearchSpaceDef, genotype: ArchGenotype) -> float:
    b0, b1 = space.signal_band if space.signal_band is not None else (0, genotype.depth - 1)
    cap = 0.0
    wmax = space.max_width
    for pos in range(b0, min(b1 + 1, genotype.depth)):
        op, w = genotype.genes[pos]
        q = space.op_quality.get(op, 0.0)
        if space.width_in_accuracy and op in WIDTH_SENSITIVE_OPS:
            q *= 0.4 + 0.6 * (w / wmax)
        cap += q
    return cap


def synthetic_accuracy(space: SearchSpaceDef, genotype: ArchGenotype) -> float:
    """Deterministic smooth accuracy surrogate plus seeded per-arch noise."""
    cap = _capacity(space, genotype)
    acc = 100.0 * cap / (cap + space.accuracy_saturation)
    if space.accuracy_noise > 0.0:
        digest = hashlib.sha256(
            f"{space.accuracy_seed}|{genotype.canonical_text()}".encode()
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        acc += float(rng.normal(0.0, space.accuracy_noise))
    return float(np.clip(acc, 0.0, 100.0))


def make_batch(space: SearchSpaceDef, size: int, seed: int):
    """Standard-normal image batch with uniform class labels."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((size, space.in_channels,
                             space.image_size, space.image_size))
    labels = rng.integers(0, space.n_classes, size=size)
    descriptor = f"{space.space_id}:S{size}:seed{seed}"
    return x, labels, descriptor


def space_with(space: SearchSpaceDef, **overrides) -> SearchSpaceDef:
    out = replace(space, **overrides)
    validate_space(out)
    return out
