"""Composite activations, data-starving filter layers, and the CNN stacks.

A composite activation pairs a hard forward map (Heaviside, or Heaviside of a
cosine) with an independently chosen backward "derivative".  The forward pass
therefore emits exact binary values while backpropagation still receives a
finite, informative signal.

Filtering layers binarize their output and are penalized for the amount of
signal they pass: 1x1 convolution filters carry an L1 activation penalty,
per-pixel offset filters carry an entropy penalty on their rescaled
thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Rng, Tensor

ACTIVATION_IDS = ("hsid", "hsat", "hsnd", "cos_hsat", "cos_hsnd")
CANDIDATES = ("standard", "a", "b", "c")

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def heaviside(x):
    """Unit step with an inclusive boundary: 1 where x >= 0, else 0."""
    arr = np.asarray(x)
    out = (arr >= 0).astype(arr.dtype if arr.dtype.kind == "f" else np.float64)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def _normal_density(u: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-(u * u) / (2.0 * sigma * sigma)) / (sigma * _SQRT_2PI)


@dataclass(frozen=True)
class CompositeActivation:
    """A (hard forward, synthetic backward) pair applied elementwise.

    kind:
      hsid     -- step forward, constant-1 backward
      hsat     -- step forward, arctangent-derivative backward 1/(1+x^2)
      hsnd     -- step forward, normal-density backward
      cos_hsat -- step-of-cosine forward, backward -sin(x)/(1+cos(x)^2)
      cos_hsnd -- step-of-cosine forward, backward -sin(x)*density(cos(x))

    sigma sets the width of the normal density for the *hsnd variants.
    """

    kind: str
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ACTIVATION_IDS:
            raise ValueError(f"unknown composite activation {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def forward_values(self, x: np.ndarray) -> np.ndarray:
        if self.kind.startswith("cos_"):
            return (np.cos(x) >= 0).astype(x.dtype)
        return (x >= 0).astype(x.dtype)

    def backward_values(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "hsid":
            return np.ones_like(x)
        if self.kind == "hsat":
            return 1.0 / (1.0 + x * x)
        if self.kind == "hsnd":
            return _normal_density(x, self.sigma).astype(x.dtype)
        if self.kind == "cos_hsat":
            c = np.cos(x)
            return -np.sin(x) / (1.0 + c * c)
        c = np.cos(x)  # cos_hsnd
        return (-np.sin(x) * _normal_density(c, self.sigma)).astype(x.dtype)


def composite_backward(kind: str, x, sigma: float = 1.0):
    """Closed-form synthetic derivative of a composite activation at x."""
    act = CompositeActivation(kind, sigma)
    arr = np.asarray(x, dtype=np.float64)
    out = act.backward_values(arr)
    return float(out) if arr.ndim == 0 else out


def composite_activation(x, act: CompositeActivation) -> Tensor:
    """Apply a composite activation on the tape.

    Forward emits exact {0,1}; backward multiplies the upstream gradient by
    the synthetic derivative evaluated at the pre-activation input.
    """
    tx = T._unwrap(x)
    xd = tx.data
    out = Tensor(act.forward_values(xd))

    def backward(g):
        return (g * act.backward_values(xd),)

    return T.record(out, (tx,), backward, f"composite[{act.kind}]")


def thermometer_encode(value: float, thresholds) -> tuple[int, ...]:
    """Unary threshold code: bit k is 1 iff value > thresholds[k].

    Thresholds must be strictly descending, so the 1-bits always form a
    suffix (e.g. 42 against (80, 60, 40, 20) encodes as (0, 0, 1, 1)).
    """
    th = [float(t) for t in thresholds]
    if any(a <= b for a, b in zip(th, th[1:])):
        raise ValueError("thresholds must be strictly descending")
    return tuple(1 if value > t else 0 for t in th)


def l1_activation_penalty(activations) -> Tensor:
    """Sum of absolute activations; equals the count of ones on binary maps."""
    return T.l1_sum(activations)


def entropy_bias_penalty(thresholds, stats, mode: str = "binary_entropy") -> Tensor:
    """Penalty on rescaled offset-filter thresholds.

    Each threshold is rescaled to B = (t - min) / (max - min), clamped to
    [1e-6, 1 - 1e-6].  ``binary_entropy`` mode sums -[B ln B + (1-B) ln(1-B)]
    (maximal at 1/2, zero at the edges); ``plogp`` sums B ln B.
    Positions whose input range is degenerate (min == max) contribute 0.
    """
    if mode not in ("binary_entropy", "plogp"):
        raise ValueError(f"unknown entropy mode {mode!r}")
    tt = T._unwrap(thresholds)
    tv = tt.data
    eps = 1e-6
    x_min = np.asarray(stats.x_min, dtype=tv.dtype).reshape(tv.shape)
    x_max = np.asarray(stats.x_max, dtype=tv.dtype).reshape(tv.shape)
    span = x_max - x_min
    used = span > 0
    safe_span = np.where(used, span, 1.0)
    b_raw = (tv - x_min) / safe_span
    b = np.clip(b_raw, eps, 1.0 - eps)
    if mode == "binary_entropy":
        vals = -(b * np.log(b) + (1.0 - b) * np.log(1.0 - b))
        dpen_db = np.log(1.0 - b) - np.log(b)
    else:
        vals = b * np.log(b)
        dpen_db = np.log(b) + 1.0
    out = Tensor(np.asarray(vals[used].sum() if used.any() else 0.0, dtype=tv.dtype))
    interior = used & (b_raw > eps) & (b_raw < 1.0 - eps)

    def backward(g):
        dt = np.zeros_like(tv)
        dt[interior] = g * dpen_db[interior] / safe_span[interior]
        return (dt,)

    return T.record(out, (tt,), backward, f"entropy_bias[{mode}]")


# ---------------------------------------------------------------------------
# layers


class ConvFilterLayer:
    """1x1 convolution filters under a composite activation, L1-penalized.

    With positive weights each step-forward filter fires exactly when its
    input crosses the cutoff -b/w, so a stack of filters forms a learned
    thermometer code.  Initialization seeds distinct cutoffs evenly spread
    over (0, 1): step-forward filters start at w=1 with biases in (-1, 0);
    cosine-forward filters start at w=pi with biases placed so the cosine's
    sign change lands on the same input-space cutoffs (w=1 would keep the
    pre-activation inside one positive half-wave and pass no information).
    """

    def __init__(self, name: str, in_channels: int, filters: int,
                 act: CompositeActivation, dtype=np.float32):
        if filters < 1:
            raise ValueError("filters must be >= 1")
        self.name = name
        self.filters = filters
        self.act = act
        cutoffs = [(k + 1) / (filters + 1) for k in range(filters)]
        if act.kind.startswith("cos_"):
            weight = math.pi
            biases = [-math.pi * (t + 0.5) for t in cutoffs]
        else:
            weight = 1.0
            biases = [-t for t in cutoffs]
        self.w = Parameter(T.construct((filters, in_channels, 1, 1), fill=weight, dtype=dtype),
                           f"{name}.w")
        self.b = Parameter(T.construct((filters,), data=biases, dtype=dtype), f"{name}.b")

    def forward(self, x: Tensor) -> Tensor:
        z = T.conv2d_1x1(x, self.w, self.b)
        return composite_activation(z, self.act)

    def penalty(self, out: Tensor) -> Tensor:
        return l1_activation_penalty(out)

    def cutoffs(self) -> np.ndarray:
        """Implied activation cutoff -b/w per filter (single-channel input)."""
        w = self.w.value.data[:, :, 0, 0]
        if w.shape[1] != 1:
            raise ValueError("cutoffs are only defined for single-channel filters")
        return -self.b.value.data / w[:, 0]

    def parameters(self):
        return [self.w, self.b]


class OffsetFilterLayer:
    """Per-pixel learned-threshold binarization with unit, frozen weights.

    Forward is act(weight * x - t) elementwise; only the thresholds t train.
    The entropy penalty on the rescaled thresholds pushes them toward the
    extremes of each pixel's observed range.
    """

    def __init__(self, name: str, height: int, width: int, act: CompositeActivation,
                 stats, entropy_mode: str = "binary_entropy", dtype=np.float32):
        self.name = name
        self.height = height
        self.width = width
        self.act = act
        self.entropy_mode = entropy_mode
        self.stats = stats
        init = (np.asarray(stats.x_min) + np.asarray(stats.x_max)) / 2.0
        self.thresholds = Parameter(
            T.construct((height * width,), data=init.reshape(-1), dtype=dtype),
            f"{name}.thresholds",
        )
        self.weight = Tensor(np.ones(height * width, dtype=dtype))  # fixed at 1, never trained

    def forward(self, x: Tensor) -> Tensor:
        tx = T._unwrap(x)
        xd = tx.data
        n, c, h, w = xd.shape
        if c != 1 or (h, w) != (self.height, self.width):
            raise ValueError(f"offset filter expects [N,1,{self.height},{self.width}], got {xd.shape}")
        tape = T.active_tape()
        if tape is not None:
            tape.register_parameter(self.thresholds)
        wmap = self.weight.data.reshape(1, 1, h, w)
        tmap = self.thresholds.value.data.reshape(1, 1, h, w)
        z = wmap * xd - tmap
        out = Tensor(self.act.forward_values(z))
        act = self.act
        tparam = self.thresholds.value

        def backward(g):
            gz = g * act.backward_values(z)
            dx = gz * wmap
            dt = -gz.sum(axis=(0, 1)).reshape(-1)
            return dx, dt

        return T.record(out, (tx, tparam), backward, "offset_filter")

    def penalty(self, out: Tensor) -> Tensor:
        return entropy_bias_penalty(self.thresholds, self.stats, self.entropy_mode)

    def parameters(self):
        return [self.thresholds]


class ConvBlock:
    """3x3 valid convolution; ReLU or a composite activation.

    Under a composite activation the block doubles as a filtering layer and
    contributes an L1 activation penalty.
    """

    def __init__(self, name: str, in_channels: int, filters: int, rng: Rng,
                 activation="relu", dtype=np.float32):
        self.name = name
        self.activation = activation
        fan_in = in_channels * 9
        self.w = Parameter(T.he_uniform_init((filters, in_channels, 3, 3), fan_in, rng, dtype),
                           f"{name}.w")
        self.b = Parameter(T.construct((filters,), dtype=dtype), f"{name}.b")

    @property
    def is_filtering(self) -> bool:
        return isinstance(self.activation, CompositeActivation)

    def forward(self, x: Tensor) -> Tensor:
        z = T.conv2d(x, self.w, self.b)
        if self.is_filtering:
            return composite_activation(z, self.activation)
        return T.relu(z)

    def penalty(self, out: Tensor) -> Tensor:
        return l1_activation_penalty(out)

    def parameters(self):
        return [self.w, self.b]


class MaxPool:
    name = "pool"

    def forward(self, x: Tensor) -> Tensor:
        return T.maxpool2x2(x)

    def parameters(self):
        return []


class Flatten:
    name = "flatten"

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return T.reshape(x, (n, -1))

    def parameters(self):
        return []


class Dense:
    def __init__(self, name: str, in_features: int, out_features: int, rng: Rng,
                 activation: str = "relu", dtype=np.float32):
        self.name = name
        self.activation = activation
        self.w = Parameter(T.he_uniform_init((in_features, out_features), in_features, rng, dtype),
                           f"{name}.w")
        self.b = Parameter(T.construct((out_features,), dtype=dtype), f"{name}.b")

    def forward(self, x: Tensor) -> Tensor:
        z = T.add(T.matmul(x, self.w), self.b)
        return T.relu(z) if self.activation == "relu" else z

    def parameters(self):
        return [self.w, self.b]


# ---------------------------------------------------------------------------
# network assembly


@dataclass
class PixelRange:
    """Per-position min/max over a training split (offset-filter rescaling)."""

    x_min: np.ndarray
    x_max: np.ndarray

    def __post_init__(self):
        self.x_min = np.asarray(self.x_min, dtype=np.float64).reshape(-1)
        self.x_max = np.asarray(self.x_max, dtype=np.float64).reshape(-1)
        if self.x_min.shape != self.x_max.shape:
            raise ValueError("min/max shapes differ")
        if (self.x_min > self.x_max).any():
            raise ValueError("found position with min > max")

    @classmethod
    def full_range(cls, n_positions: int) -> "PixelRange":
        return cls(np.zeros(n_positions), np.ones(n_positions))


@dataclass
class BuildConfig:
    """Hyperparameters for assembling a candidate network."""

    filters: int = 4          # number of 1x1 encoding filters (thresholds)
    sigma: float = 1.0        # width of the normal-density backward
    input_hw: tuple[int, int] = (28, 28)
    entropy_mode: str = "binary_entropy"
    stats: "PixelRange | None" = None
    seed: int = 0
    dtype: type = np.float32


class Network:
    """An ordered layer stack ending in 10-class logits."""

    def __init__(self, candidate: str, layers: list, build: BuildConfig):
        self.candidate = candidate
        self.layers = layers
        self.build = build

    def forward(self, x) -> tuple[Tensor, list[Tensor]]:
        """Run the stack; returns (logits, filtering penalties)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.build.dtype))
        penalties = []
        for layer in self.layers:
            x = layer.forward(x)
            if isinstance(layer, (ConvFilterLayer, OffsetFilterLayer)):
                penalties.append(layer.penalty(x))
            elif isinstance(layer, ConvBlock) and layer.is_filtering:
                penalties.append(layer.penalty(x))
        return x, penalties

    def parameters(self) -> list[Parameter]:
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def logits(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Forward pass without a tape, batched over samples."""
        images = np.asarray(images, dtype=self.build.dtype)
        chunks = []
        for i in range(0, len(images), batch_size):
            out, _ = self.forward(Tensor(images[i : i + batch_size]))
            chunks.append(out.data)
        return np.concatenate(chunks, axis=0)

    def predict(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Class indices by argmax; ties resolve to the lowest index."""
        return self.logits(images, batch_size).argmax(axis=1)

    def filter_layers(self) -> list:
        return [l for l in self.layers
                if isinstance(l, (ConvFilterLayer, OffsetFilterLayer))
                or (isinstance(l, ConvBlock) and l.is_filtering)]


def _stack_shapes(hw: tuple[int, int]) -> tuple[int, int]:
    h, w = hw
    for _ in range(2):  # two conv pairs, each followed by a 2x2 pool
        h, w = h - 4, w - 4
        if h < 2 or w < 2 or h % 2 or w % 2:
            raise ValueError(f"input {hw} is incompatible with the conv/pool stack")
        h, w = h // 2, w // 2
    return h, w


def build_network(candidate: str, hyper: BuildConfig | None = None) -> Network:
    """Assemble one of the four candidate stacks with fresh parameters.

    standard -- all-ReLU CNN, no filtering layer
    a        -- offset filter (hsat, entropy penalty) ahead of the CNN
    b        -- 1x1 filter layer (hsnd) plus cos_hsnd composite activations
                on the second conv of each pair
    c        -- 1x1 filter layer (cos_hsat) ahead of the CNN
    """
    candidate = str(candidate).lower()
    if candidate not in CANDIDATES:
        raise ValueError(f"unknown candidate {candidate!r}; expected one of {CANDIDATES}")
    hyper = hyper or BuildConfig()
    rng = Rng(hyper.seed)
    dtype = hyper.dtype
    h, w = hyper.input_hw
    layers: list = []
    in_ch = 1

    if candidate == "a":
        stats = hyper.stats or PixelRange.full_range(h * w)
        act = CompositeActivation("hsat")
        layers.append(OffsetFilterLayer("filter1", h, w, act, stats,
                                        hyper.entropy_mode, dtype=dtype))
    elif candidate == "b":
        layers.append(ConvFilterLayer("filter1", 1, hyper.filters,
                                      CompositeActivation("hsnd", hyper.sigma), dtype=dtype))
        in_ch = hyper.filters
    elif candidate == "c":
        layers.append(ConvFilterLayer("filter1", 1, hyper.filters,
                                      CompositeActivation("cos_hsat"), dtype=dtype))
        in_ch = hyper.filters

    second_act = (CompositeActivation("cos_hsnd", hyper.sigma) if candidate == "b" else "relu")
    layers.append(ConvBlock("conv1", in_ch, 32, rng.split(1), "relu", dtype=dtype))
    layers.append(ConvBlock("conv2", 32, 32, rng.split(2), second_act, dtype=dtype))
    layers.append(MaxPool())
    layers.append(ConvBlock("conv3", 32, 32, rng.split(3), "relu", dtype=dtype))
    layers.append(ConvBlock("conv4", 32, 32, rng.split(4), second_act, dtype=dtype))
    layers.append(MaxPool())
    layers.append(Flatten())
    fh, fw = _stack_shapes((h, w))
    layers.append(Dense("dense1", 32 * fh * fw, 50, rng.split(5), "relu", dtype=dtype))
    layers.append(Dense("logits", 50, 10, rng.split(6), "linear", dtype=dtype))
    return Network(candidate, layers, hyper)


# ---------------------------------------------------------------------------
# filter diagnostics


@dataclass
class FilterRow:
    layer: str
    index: int
    rate: float
    cutoff: float | None
    dead: bool


def filter_activation_report(net: Network, images: np.ndarray,
                             batch_size: int = 512) -> list[FilterRow]:
    """Activation rate and implied cutoff for every 1x1 encoding filter.

    The rate is the fraction of (sample, pixel) positions a filter fires on
    over the given dataset; a filter is dead iff its rate is exactly 0.
    """
    conv_filters = [l for l in net.layers if isinstance(l, ConvFilterLayer)]
    if not conv_filters:
        raise ValueError("network has no convolution-filter layers")
    images = np.asarray(images, dtype=net.build.dtype)
    ones: dict[str, np.ndarray] = {l.name: np.zeros(l.filters, dtype=np.float64)
                                   for l in conv_filters}
    totals: dict[str, int] = {l.name: 0 for l in conv_filters}
    for i in range(0, len(images), batch_size):
        x = Tensor(images[i : i + batch_size])
        for layer in net.layers:
            x = layer.forward(x)
            if isinstance(layer, ConvFilterLayer):
                n, f, hh, ww = x.shape
                ones[layer.name] += x.data.sum(axis=(0, 2, 3))
                totals[layer.name] += n * hh * ww
    rows = []
    for layer in conv_filters:
        try:
            cut = layer.cutoffs()
        except ValueError:
            cut = [None] * layer.filters
        for k in range(layer.filters):
            rate = float(ones[layer.name][k] / totals[layer.name])
            c = None if cut[k] is None else float(cut[k])
            rows.append(FilterRow(layer.name, k, rate, c, rate == 0.0))
    return rows
