"""
Hierarchical vector-attention context model, the training-free baseline and
the bit-cost loss.

The network sees a target's neighbourhood in two stages. Stage 1 attends
over the group around each of the K1 nearest neighbours, with that
neighbour's own feature as query. Stage 2 attends over the K1 aggregated
features around the target with a zero query. The head emits a normalised
location offset and a scale per channel; the IDW prediction is added back
afterwards.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .neighborhood import PRED_SCALE
from .utilities import INPUT_MODES, ConfigError, FormatError

LOG = logging.getLogger(__name__)

B_MIN = 0.05
B_LEVELS = 256
BASELINE_DECAY = 0.99
BASELINE_INIT_DIVISOR = 16
LN2 = np.log(2.0)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 1
    feature_dim: int = 64
    hidden_dim: int = 64
    k: int = 32
    k1: int = 8
    k2: int = 8
    input_mode: str = "residual"
    seed: int = 0

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ConfigError("Models handle 1 or 3 attribute channels.")
        if min(self.feature_dim, self.hidden_dim) < 1:
            raise ConfigError("feature_dim and hidden_dim must be at least 1.")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(
                "input_mode must be one of {}.".format(", ".join(INPUT_MODES))
            )

    @classmethod
    def from_dict(cls, values):
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        try:
            return cls(**known)
        except TypeError as e:
            raise FormatError("Bad model configuration: {}".format(e))


##
# Quantized Laplace parameters
##


def b_grid(max_attri):
    """
    The 256 admissible scales for one channel, log-spaced over [0.05, max_attri].
    """
    return B_MIN * (float(max_attri) / B_MIN) ** (np.arange(B_LEVELS) / (B_LEVELS - 1))


@dataclass
class LaplaceParams:
    """
    Per target, per channel location and scale after fixed-point quantization.

    mu64    -- location in 1/64 symbol units
    b_index -- position on the channel's b_grid
    """

    mu64: np.ndarray
    b_index: np.ndarray
    max_attri: tuple

    def __len__(self):
        return len(self.mu64)

    def rows(self):
        for i in range(len(self)):
            yield LaplaceParams(self.mu64[i : i + 1], self.b_index[i : i + 1], self.max_attri)

    @property
    def mu(self):
        return self.mu64 / PRED_SCALE

    @property
    def b(self):
        return np.stack(
            [b_grid(m)[self.b_index[:, c]] for c, m in enumerate(self.max_attri)], axis=1
        )

    @classmethod
    def quantize(cls, mu, b, max_attri):
        """
        Snap float (mu, b), shaped (B, C), onto the coding grids.
        """
        mu = np.asarray(mu, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        top = PRED_SCALE * (np.asarray(max_attri, dtype=np.int64) - 1)
        mu64 = np.clip(np.rint(mu * PRED_SCALE), 0, top).astype(np.int64)

        span = np.log(np.asarray(max_attri, dtype=np.float64) / B_MIN)
        position = np.log(np.maximum(b, B_MIN) / B_MIN) / span * (B_LEVELS - 1)
        b_index = np.clip(np.rint(position), 0, B_LEVELS - 1).astype(np.int64)
        return cls(mu64, b_index, tuple(int(m) for m in max_attri))


##
# Layers
##


class Linear:
    def __init__(self, name, n_in, n_out, rng):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = T.Tensor(
            rng.uniform(-bound, bound, size=(n_in, n_out)),
            requires_grad=True,
            name=name + ".weight",
        )
        self.bias = T.Tensor(np.zeros(n_out), requires_grad=True, name=name + ".bias")

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class MLP:
    """
    Linear, relu, Linear.
    """

    def __init__(self, name, n_in, n_hidden, n_out, rng):
        self.layers = [
            Linear(name + ".0", n_in, n_hidden, rng),
            Linear(name + ".1", n_hidden, n_out, rng),
        ]

    def __call__(self, x):
        return self.layers[1](T.relu(self.layers[0](x)))

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class AttentionStage:
    """
    Vector attention with position embedding and key-query subtraction.
    """

    def __init__(self, name, config, rng, with_query):
        d, h = config.feature_dim, config.hidden_dim
        self.score = MLP(name + ".score", d, h, d, rng)
        self.delta_mul = MLP(name + ".delta_mul", 3, h, d, rng)
        self.delta_bias = MLP(name + ".delta_bias", 3, h, d, rng)
        self.key = MLP(name + ".key", d, h, d, rng)
        self.value = MLP(name + ".value", d, h, d, rng)
        self.query = MLP(name + ".query", d, h, d, rng) if with_query else None

    def parameters(self):
        blocks = [self.score, self.delta_mul, self.delta_bias, self.key, self.value]
        if self.query is not None:
            blocks.append(self.query)
        return [p for block in blocks for p in block.parameters()]


def attention_stage(stage, features, zbar, use_query=True):
    """
    Aggregate `features` (..., T, d) positioned at `zbar` (..., T, 3).

    With `use_query` the first element's feature is the query, otherwise the
    query is zero. Weights are a softmax over T, separately per channel.
    """
    features = T.as_tensor(features)
    zbar = T.as_tensor(zbar)
    if features.shape[-2] == 0:
        raise ValueError("attention over an empty group")

    relation = stage.key(features)
    if use_query:
        if stage.query is None:
            raise ValueError("this stage has no query network")
        relation = relation - stage.query(T.gather(features, [0], axis=-2))

    position_bias = stage.delta_bias(zbar)
    scores = stage.score(stage.delta_mul(zbar) * relation + position_bias)
    weights = T.softmax(scores, axis=-2)
    values = stage.value(features) + position_bias
    return T.sum(weights * values, axis=-2)


##
# Context model
##


class ContextModel:
    """
    Neighbourhood bundle in, Laplace (mu, b) per channel out.
    """

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c, d, h = config.channels, config.feature_dim, config.hidden_dim
        self.embed = MLP("embed", c + 3, h, d, rng)
        self.stage1 = AttentionStage("stage1", config, rng, with_query=True)
        self.stage2 = AttentionStage("stage2", config, rng, with_query=False)
        self.head = MLP("head", d, h, 2 * c, rng)

        # An untrained model codes like the baseline: mu = IDW prediction,
        # softplus(beta) = 1/16, i.e. b = max_attri / 16.
        self.head.layers[1].weight.data[:] = 0.0
        self.head.layers[1].bias.data[c:] = np.log(np.expm1(1.0 / BASELINE_INIT_DIVISOR))

    def parameters(self):
        return (
            self.embed.parameters()
            + self.stage1.parameters()
            + self.stage2.parameters()
            + self.head.parameters()
        )

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def embed_inputs(self, bundle, max_attri):
        """
        Pointwise MLP over [xbar, zbar] for every group member: (B, K1, K2, d).
        """
        if self.config.input_mode == "raw":
            xbar = bundle.attrs / np.asarray(max_attri, dtype=np.float64)
        else:
            xbar = bundle.xbar
        return self.embed(np.concatenate([xbar, bundle.zbar], axis=-1))

    def forward(self, bundle, max_attri):
        """
        Float (mu, b) tensors shaped (B, C) in symbol units, before quantization.
        """
        c = self.config.channels
        if bundle.xbar.shape[-1] != c:
            raise ConfigError(
                "Model expects {} channel(s), bundle has {}.".format(c, bundle.xbar.shape[-1])
            )
        scale = np.asarray(max_attri, dtype=np.float64)

        f = self.embed_inputs(bundle, max_attri)
        inner = attention_stage(self.stage1, f, bundle.zbar, use_query=True)
        pooled = attention_stage(self.stage2, inner, bundle.zbar2, use_query=False)
        out = self.head(pooled)

        mu = T.gather(out, np.arange(c), axis=-1) * scale
        if self.config.input_mode == "residual":
            mu = mu + bundle.pred
        b = T.softplus(T.gather(out, np.arange(c, 2 * c), axis=-1)) * scale
        return mu, b

    def predict_params(self, bundle, max_attri):
        """
        Quantized LaplaceParams for every target of the bundle.
        """
        mu, b = self.forward(bundle, max_attri)
        return LaplaceParams.quantize(mu.data, b.data, max_attri)


##
# Baseline
##


class BaselineState:
    """
    Exponentially weighted mean absolute residual per channel.
    """

    def __init__(self, max_attri):
        self.max_attri = tuple(int(m) for m in max_attri)
        self.scale = np.asarray(self.max_attri, dtype=np.float64) / BASELINE_INIT_DIVISOR

    def update(self, residual):
        scale = BASELINE_DECAY * self.scale + (1.0 - BASELINE_DECAY) * np.abs(
            np.asarray(residual, dtype=np.float64)
        )
        self.scale = np.maximum(scale, B_MIN)


def baseline_predict(bundle, state):
    """
    mu from the IDW prediction, b from the running scale.

    Yields one single-row LaplaceParams per target in coding order. Each row
    is quantized when drawn, so the caller feeds the coded residual to
    `state.update` before drawing the next one.
    """
    pred = np.asarray(bundle.pred, dtype=np.float64)
    for i in range(len(pred)):
        yield LaplaceParams.quantize(pred[i : i + 1], state.scale[None, :], state.max_attri)


##
# Loss
##


def nll_loss(mu, b, x):
    """
    Total bits of integers `x` under Laplace(mu, b) integrated over unit bins.

    Bins entirely on one side of mu use the tail form, bins around mu the
    two-sided form with the residual masked to stay finite.
    """
    mu, b = T.as_tensor(mu), T.as_tensor(b)
    x = np.asarray(x, dtype=np.float64)
    if mu.shape != x.shape or b.shape != x.shape:
        raise ValueError(
            "nll_loss: shapes {}, {} and {} differ".format(mu.shape, b.shape, x.shape)
        )

    residual = x - mu
    near = (np.abs(x - mu.data) < 0.5).astype(np.float64)
    far = 1.0 - near
    sign = np.where(x - mu.data >= 0, 1.0, -1.0)

    inv_b = 1.0 / b
    far_logp = (
        np.log(0.5)
        - (residual * (sign * far) - 0.5) * inv_b
        + T.log1mexp(inv_b)
    )
    r_near = residual * near
    near_p = (
        1.0
        - 0.5 * T.exp((r_near - 0.5) * inv_b)
        - 0.5 * T.exp((-0.5 - r_near) * inv_b)
    )
    logp = far_logp * far + T.log(near_p) * near
    return T.sum(logp) * (-1.0 / LN2)


def bits_per_point(mu, b, x):
    return float(nll_loss(mu, b, x).data) / max(1, len(np.asarray(x)))


##
# Checkpoints
##


def save_checkpoint(model):
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    return T.save_archive(tensors, asdict(model.config))


def load_checkpoint(data, channels=None):
    """
    Rebuild a ContextModel from an archive; `channels` guards against using
    a color model on reflectance and vice versa.
    """
    tensors, config = T.load_archive(data)
    model = ContextModel(ModelConfig.from_dict(config))
    if channels is not None and model.config.channels != channels:
        raise ConfigError(
            "Checkpoint was trained for {} channel(s), the stream has {}.".format(
                model.config.channels, channels
            )
        )

    params = model.named_parameters()
    if set(params) != set(tensors):
        raise FormatError("Checkpoint tensors do not match the model architecture.")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise FormatError("Checkpoint tensor '{}' has the wrong shape.".format(name))
        p.data = tensors[name]
    LOG.debug("Loaded checkpoint with %d tensors", len(tensors))
    return model
