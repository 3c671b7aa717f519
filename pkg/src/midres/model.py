"""Architecture configs and builders for the MidResBlock classifier and the LeNet-style baseline."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .gradcheck import Stage
from .tensor import Parameter, ShapeError, Tensor

VARIANTS = ("baseline_lenet", "midres_classifier")

FULL_INPUT_SIZE = 512
FULL_CHANNEL_PLAN = (32, 64, 128, 256)
FULL_FC_WIDTHS = {"baseline_lenet": (4096, 4096), "midres_classifier": (4096,)}

# Class order of the output layer for the MRI task.
TUMOR_CLASSES = ("glioma", "meningioma", "pituitary")


class ConfigError(ValueError):
    pass


def _check_positive_int(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class MidResBlockConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3

    def __post_init__(self):
        _check_positive_int("in_channels", self.in_channels)
        _check_positive_int("out_channels", self.out_channels)
        _check_positive_int("kernel", self.kernel)
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd so same padding keeps the spatial size, got {self.kernel}")


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative architecture. Defaults are the desk-scale network used by the tests."""

    variant: str = "midres_classifier"
    input_channels: int = 1
    input_size: int = 64
    channel_plan: tuple[int, ...] = (4, 8, 16, 32)
    fc_widths: tuple[int, ...] = (64,)
    num_classes: int = 3
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channel_plan", tuple(self.channel_plan))
        object.__setattr__(self, "fc_widths", tuple(self.fc_widths))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        _check_positive_int("input_channels", self.input_channels)
        _check_positive_int("input_size", self.input_size)
        _check_positive_int("kernel", self.kernel)
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if not self.channel_plan:
            raise ConfigError("channel_plan must not be empty")
        for c in self.channel_plan:
            _check_positive_int("channel_plan entry", c)
        for w in self.fc_widths:
            _check_positive_int("fc_widths entry", w)
        if isinstance(self.num_classes, bool) or not isinstance(self.num_classes, (int, np.integer)) \
                or self.num_classes < 2:
            raise ConfigError(f"num_classes must be an integer >= 2, got {self.num_classes!r}")
        if self.variant == "midres_classifier" and len(self.channel_plan) != 4:
            raise ConfigError(f"midres_classifier needs exactly 4 encoder stages, got channel_plan {list(self.channel_plan)}")
        if self.input_size % 2:
            raise ConfigError(f"input_size must be even, got {self.input_size}")
        if self.input_size % (2 ** self.num_pools):
            raise ConfigError(f"input_size {self.input_size} is not divisible by 2^{self.num_pools} "
                              f"({self.num_pools} pooling stages)")

    @property
    def num_pools(self) -> int:
        # the baseline has an extra pooling layer in its stem
        return len(self.channel_plan) + (1 if self.variant == "baseline_lenet" else 0)

    @property
    def final_size(self) -> int:
        return self.input_size // 2 ** self.num_pools

    @property
    def flatten_width(self) -> int:
        return self.channel_plan[-1] * self.final_size ** 2

    def replace(self, **changes) -> "NetworkConfig":
        d = self.to_dict()
        d.update(changes)
        return NetworkConfig.from_dict(d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["channel_plan"] = list(self.channel_plan)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown network config keys: {', '.join(unknown)}")
        return cls(**d)


def full_scale_config(variant: str = "midres_classifier") -> NetworkConfig:
    """512x512 inputs, channel plan doubling from 32, 4096-wide hidden FC layers."""
    return NetworkConfig(variant=variant, input_size=FULL_INPUT_SIZE, channel_plan=FULL_CHANNEL_PLAN,
                         fc_widths=FULL_FC_WIDTHS[variant])


# ---------------------------------------------------------------------------
# layers


class Layer:
    name = ""
    convs = 0
    pools = 0

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, model: "Model", x: Tensor) -> Tensor:
        raise NotImplementedError


class Conv(Layer):
    convs = 1

    def __init__(self, name: str, cin: int, cout: int, kernel: int):
        self.name, self.cin, self.cout, self.kernel = name, cin, cout, kernel

    def param_shapes(self):
        return {f"{self.name}.weight": (self.cout, self.cin, self.kernel, self.kernel),
                f"{self.name}.bias": (self.cout,)}

    def out_shape(self, shape):
        return (self.cout,) + shape[1:]

    def forward(self, model, x):
        return T.conv2d(x, model.param(f"{self.name}.weight"), model.param(f"{self.name}.bias"),
                        padding=self.kernel // 2)


class ReLU(Layer):
    def forward(self, model, x):
        return T.relu(x)


class MaxPool(Layer):
    pools = 1

    def out_shape(self, shape):
        c, h, w = shape
        return (c, h // 2, w // 2)

    def forward(self, model, x):
        return T.maxpool2d(x)


class Flatten(Layer):
    def out_shape(self, shape):
        return (math.prod(shape),)

    def forward(self, model, x):
        return T.flatten(x)


class Dense(Layer):
    def __init__(self, name: str, fin: int, fout: int):
        self.name, self.fin, self.fout = name, fin, fout

    def param_shapes(self):
        return {f"{self.name}.weight": (self.fin, self.fout), f"{self.name}.bias": (self.fout,)}

    def out_shape(self, shape):
        return (self.fout,)

    def forward(self, model, x):
        return T.dense(x, model.param(f"{self.name}.weight"), model.param(f"{self.name}.bias"))


def midresblock_forward(params: Mapping[str, Tensor], x: Tensor, return_medial: bool = False):
    """One MidResBlock encoder unit.

    ``conv1 -> ReLU -> maxpool`` produces the medial feature at half resolution;
    ``conv2 -> ReLU`` on top of it is added back onto the medial feature. Both
    convolutions use same padding, so the two summands always share a shape.
    ``params`` maps ``conv1.weight``, ``conv1.bias``, ``conv2.weight``, ``conv2.bias``.
    """
    w1, w2 = params["conv1.weight"], params["conv2.weight"]
    medial = T.maxpool2d(T.relu(T.conv2d(x, w1, params["conv1.bias"], padding=w1.shape[-1] // 2)))
    branch = T.relu(T.conv2d(medial, w2, params["conv2.bias"], padding=w2.shape[-1] // 2))
    out = T.residual_add(medial, branch)
    return (out, medial) if return_medial else out


class MidResBlock(Layer):
    convs = 2
    pools = 1

    def __init__(self, name: str, cfg: MidResBlockConfig):
        self.name, self.cfg = name, cfg

    def param_shapes(self):
        c, k = self.cfg, self.cfg.kernel
        return {f"{self.name}.conv1.weight": (c.out_channels, c.in_channels, k, k),
                f"{self.name}.conv1.bias": (c.out_channels,),
                f"{self.name}.conv2.weight": (c.out_channels, c.out_channels, k, k),
                f"{self.name}.conv2.bias": (c.out_channels,)}

    def out_shape(self, shape):
        _, h, w = shape
        return (self.cfg.out_channels, h // 2, w // 2)

    def block_params(self, model: "Model") -> dict[str, Parameter]:
        return {key[len(self.name) + 1:]: model.param(key) for key in self.param_shapes()}

    def forward(self, model, x):
        return midresblock_forward(self.block_params(model), x)


# ---------------------------------------------------------------------------
# model


class Model:
    """A built network: its config, layer sequence and named parameters.

    Parameter arrays are allocated on first use, so full-scale configs (whose
    first FC layer alone holds ~10^9 weights) can be built and inspected
    without materializing the head.
    """

    def __init__(self, config: NetworkConfig, layers: Sequence[Layer], dtype: Any = T.DEFAULT_DTYPE):
        self.config = config
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.param_shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            for name, shape in layer.param_shapes().items():
                if name in self.param_shapes:
                    raise ConfigError(f"duplicate parameter name {name}")
                self.param_shapes[name] = shape
        self._params: dict[str, Parameter] = {}

    def param(self, name: str) -> Parameter:
        p = self._params.get(name)
        if p is None:
            p = Parameter(np.zeros(self.param_shapes[name], dtype=self.dtype), name=name)
            self._params[name] = p
        return p

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name in self.param_shapes:
            yield name, self.param(name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    @property
    def param_count(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes.values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def layer_census(self) -> dict[str, int]:
        convs = sum(layer.convs for layer in self.layers)
        pools = sum(layer.pools for layer in self.layers)
        return {"conv": convs, "pool": pools, "conv+pool": convs + pools,
                "dense": sum(isinstance(layer, Dense) for layer in self.layers)}

    def shape_trace(self) -> list[tuple[str, tuple[int, ...]]]:
        """Per-layer output shapes (without batch dim), computed from the config alone."""
        shape: tuple[int, ...] = (self.config.input_channels, self.config.input_size, self.config.input_size)
        trace = []
        for layer in self.layers:
            shape = layer.out_shape(shape)
            trace.append((layer.name or type(layer).__name__.lower(), shape))
        return trace

    @property
    def feature_shape(self) -> tuple[int, ...]:
        """Shape of the final feature map fed to the flatten layer."""
        shape = (self.config.input_channels, self.config.input_size, self.config.input_size)
        for layer in self.layers:
            if isinstance(layer, Flatten):
                return shape
            shape = layer.out_shape(shape)
        return shape

    def check_input(self, batch: Any) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=self.dtype)
        c, s = self.config.input_channels, self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (c, s, s) or x.shape[0] < 1:
            raise ShapeError(f"expected input batch [N, {c}, {s}, {s}], got {x.shape}")
        if x.dtype != self.dtype:
            x = Tensor(x.data, dtype=self.dtype)
        return x

    def encode(self, batch: Any) -> Tensor:
        x = self.check_input(batch)
        for layer in self.layers:
            if isinstance(layer, Flatten):
                break
            x = layer.forward(self, x)
        return x

    def forward(self, batch: Any) -> Tensor:
        x = self.check_input(batch)
        for layer in self.layers:
            x = layer.forward(self, x)
        return x

    __call__ = forward

    def stages(self, batch: Any, loss_fn) -> list[Stage]:
        """The forward pass split per layer, for staged gradient checks; ``loss_fn`` closes it to a scalar."""
        x = self.check_input(batch)
        stages = [Stage(lambda _: x)]
        for layer in self.layers:
            ps = [self.param(n) for n in layer.param_shapes()]
            stages.append(Stage(lambda act, layer=layer: layer.forward(self, act), ps))
        stages.append(Stage(loss_fn))
        return stages

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.param_shapes) - set(state)
        extra = set(state) - set(self.param_shapes)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            arr = np.asarray(arr)
            if arr.shape != self.param_shapes[name]:
                raise ShapeError(f"parameter {name}: expected shape {self.param_shapes[name]}, got {arr.shape}")
            self.param(name).data[...] = arr


def build_midres_classifier(config: NetworkConfig, dtype: Any = T.DEFAULT_DTYPE) -> Model:
    if config.variant != "midres_classifier":
        raise ConfigError(f"build_midres_classifier needs variant midres_classifier, got {config.variant}")
    layers: list[Layer] = []
    cin = config.input_channels
    for i, cout in enumerate(config.channel_plan, start=1):
        layers.append(MidResBlock(f"enc{i}", MidResBlockConfig(cin, cout, config.kernel)))
        cin = cout
    layers.append(Flatten())
    layers.extend(_head(config))
    return Model(config, layers, dtype)


def build_baseline_lenet(config: NetworkConfig, dtype: Any = T.DEFAULT_DTYPE) -> Model:
    """Plain conv/pool stack without skips: stem conv+pool, then three convs and a pool per stage."""
    if config.variant != "baseline_lenet":
        raise ConfigError(f"build_baseline_lenet needs variant baseline_lenet, got {config.variant}")
    k = config.kernel
    c0 = config.channel_plan[0]
    layers: list[Layer] = [Conv("stem.conv", config.input_channels, c0, k), ReLU(), MaxPool()]
    cin = c0
    for i, cout in enumerate(config.channel_plan, start=1):
        layers += [Conv(f"stage{i}.conv1", cin, cout, k), ReLU(),
                   Conv(f"stage{i}.conv2", cout, cout, k), ReLU(),
                   Conv(f"stage{i}.conv3", cout, cout, k), ReLU(),
                   MaxPool()]
        cin = cout
    layers.append(Flatten())
    layers.extend(_head(config))
    return Model(config, layers, dtype)


def _head(config: NetworkConfig) -> list[Layer]:
    layers: list[Layer] = []
    fin = config.flatten_width
    for i, width in enumerate(config.fc_widths, start=1):
        layers += [Dense(f"fc{i}", fin, width), ReLU()]
        fin = width
    layers.append(Dense("out", fin, config.num_classes))
    return layers


def build_model(config: NetworkConfig, dtype: Any = T.DEFAULT_DTYPE) -> Model:
    if config.variant == "midres_classifier":
        return build_midres_classifier(config, dtype)
    return build_baseline_lenet(config, dtype)


def init_parameters(model: Model, seed: int) -> Model:
    """He-normal weights (std sqrt(2/fan_in)), zero biases; fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    for name, shape in model.param_shapes.items():
        p = model.param(name)
        if name.endswith(".bias"):
            p.data[...] = 0
            continue
        fan_in = math.prod(shape[1:]) if len(shape) == 4 else shape[0]
        p.data[...] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        p.zero_grad()
    return model


def forward_logits(model: Model, batch: Any) -> Tensor:
    return model.forward(batch)


def predict_class(model: Model, batch: Any) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    with T.no_grad():
        logits = model.forward(batch)
    return logits.data.argmax(axis=1)
