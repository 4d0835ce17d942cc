"""Layers and the CNN + LSTM landfall network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from tclandfall import autodiff as ad
from tclandfall.autodiff import Tensor
from tclandfall.errors import ShapeError

CHANNEL_ORDER = (
    "lats", "longs",
    "u225", "v225", "z225",
    "u500", "v500", "z500",
    "u700", "v700", "z700",
    "SST",
)


def _uniform(rng: np.random.Generator, shape, limit: float) -> Tensor:
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


class Conv2d:
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        k2 = kernel_size * kernel_size
        limit = np.sqrt(6.0 / (in_channels * k2 + out_channels * k2))
        self.weight = _uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), limit)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_forward(self, x)


def conv2d_forward(layer: Conv2d, x) -> Tensor:
    """Valid convolution of ``x[C,H,W]`` or a batch ``x[N,C,H,W]``."""
    x = ad.as_tensor(x)
    if x.data.ndim == 3:
        return ad.reshape(conv2d_forward(layer, ad.reshape(x, (1,) + x.shape)),
                          _drop_lead(conv_out_shape(layer, x.shape)))
    if x.data.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"conv2d: expected {layer.in_channels} input channels, got shape {x.shape}")
    return ad.conv2d(x, layer.weight, layer.bias)


def conv_out_shape(layer: Conv2d, shape):
    k = layer.kernel_size
    return (1, layer.out_channels, shape[-2] - k + 1, shape[-1] - k + 1)


def _drop_lead(shape):
    return tuple(shape[1:])


def maxpool2(x) -> Tensor:
    x = ad.as_tensor(x)
    if x.data.ndim == 3:
        c, h, w = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2: spatial dims {h}x{w} below 2")
        return ad.reshape(ad.maxpool2(ad.reshape(x, (1, c, h, w))), (c, h // 2, w // 2))
    return ad.maxpool2(x)


class Dense:
    def __init__(self, in_features: int, out_features: int, activation: str | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        limit = np.sqrt(6.0 / (in_features + out_features))
        self.weight = _uniform(rng, (in_features, out_features), limit)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense: expected [N,{self.in_features}], got {x.shape}")
        y = ad.add(ad.matmul(x, self.weight),
                   ad.expand(ad.reshape(self.bias, (1, self.out_features)), (x.shape[0], self.out_features)))
        if self.activation == "relu":
            y = ad.relu(y)
        return y


class LSTMLayer:
    """Standard LSTM cell; the four gate blocks are stacked as (input, forget, candidate, output).

    ``weight`` has shape ``[input+hidden, 4*hidden]`` and acts on ``concat(x_t, h_prev)``.
    ``cell_activation`` swaps the tanh on the candidate and the cell output (``"relu"`` for
    experiments); the gates always use the sigmoid.
    """

    def __init__(self, input_size: int, hidden_size: int, cell_activation: str = "tanh",
                 rng: np.random.Generator | None = None):
        if cell_activation not in ("tanh", "relu"):
            raise ValueError(f"unknown cell activation {cell_activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.cell_activation = cell_activation
        limit = np.sqrt(1.0 / hidden_size)
        self.weight = _uniform(rng, (input_size + hidden_size, 4 * hidden_size), limit)
        self.bias = _uniform(rng, (4 * hidden_size,), limit)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def n_params(self) -> int:
        return 4 * ((self.input_size + self.hidden_size) * self.hidden_size + self.hidden_size)

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden_size))
        return Tensor(z), Tensor(z.copy())

    def __call__(self, xs: list[Tensor]) -> list[Tensor]:
        """Run over a time-ordered list of ``[N, input]`` tensors; return the hidden states."""
        h, c = self.initial_state(xs[0].shape[0])
        out = []
        for x in xs:
            h, c = lstm_step(self, x, h, c)
            out.append(h)
        return out


def lstm_step(layer: LSTMLayer, x_t, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    """One recurrence step for ``[N, ·]`` batches (1-D vectors are accepted as N=1)."""
    x_t, h_prev, c_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    if x_t.data.ndim == 1:
        h, c = lstm_step(layer, ad.reshape(x_t, (1, x_t.shape[0])),
                         ad.reshape(h_prev, (1, h_prev.shape[0])), ad.reshape(c_prev, (1, c_prev.shape[0])))
        return ad.reshape(h, (layer.hidden_size,)), ad.reshape(c, (layer.hidden_size,))
    n, hs = x_t.shape[0], layer.hidden_size
    if x_t.shape != (n, layer.input_size) or h_prev.shape != (n, hs) or c_prev.shape != (n, hs):
        raise ShapeError(
            f"lstm_step: expected x[{n},{layer.input_size}], h/c[{n},{hs}]; "
            f"got {x_t.shape}, {h_prev.shape}, {c_prev.shape}"
        )
    z = ad.add(ad.matmul(ad.concat([x_t, h_prev], axis=1), layer.weight),
               ad.expand(ad.reshape(layer.bias, (1, 4 * hs)), (n, 4 * hs)))
    act = ad.tanh if layer.cell_activation == "tanh" else ad.relu
    i = ad.sigmoid(z[:, 0:hs])
    f = ad.sigmoid(z[:, hs:2 * hs])
    g = act(z[:, 2 * hs:3 * hs])
    o = ad.sigmoid(z[:, 3 * hs:4 * hs])
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, act(c))
    return h, c


@dataclass
class ModelConfig:
    """Architecture descriptor; the defaults give roughly 150.6k parameters."""

    n_steps: int = 8
    head_width: int = 2
    in_channels: int = 12
    grid_size: int = 33
    conv_channels: tuple[int, ...] = (16, 32, 32)
    kernel_size: int = 3
    encoder_width: int = 64
    lstm_sizes: tuple[int, ...] = (112, 64)
    head_hidden: int = 32
    cell_activation: str = "tanh"
    channel_order: tuple[str, ...] = field(default=CHANNEL_ORDER)

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.lstm_sizes = tuple(int(s) for s in self.lstm_sizes)
        self.channel_order = tuple(self.channel_order)
        if self.head_width not in (1, 2):
            raise ValueError(f"head_width must be 1 (time) or 2 (location), got {self.head_width}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be positive, got {self.n_steps}")

    @property
    def target(self) -> str:
        return "location" if self.head_width == 2 else "time"

    def feature_map_size(self) -> int:
        s = self.grid_size
        for _ in self.conv_channels:
            s = (s - self.kernel_size + 1) // 2
            if s < 1:
                raise ValueError(f"grid {self.grid_size} too small for {len(self.conv_channels)} conv blocks")
        return s

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class LandfallModel:
    """TimeDistributed CNN encoder -> stacked LSTM -> dense head.

    The encoder (conv/ReLU/maxpool blocks, flatten, dense/ReLU) is one set of
    weights applied to every frame of the window.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.convs = []
        c_in = cfg.in_channels
        for c_out in cfg.conv_channels:
            self.convs.append(Conv2d(c_in, c_out, cfg.kernel_size, rng=rng))
            c_in = c_out
        s = cfg.feature_map_size()
        self.flat_width = c_in * s * s
        self.encoder_dense = Dense(self.flat_width, cfg.encoder_width, activation="relu", rng=rng)
        self.lstms = []
        width = cfg.encoder_width
        for hidden in cfg.lstm_sizes:
            self.lstms.append(LSTMLayer(width, hidden, cfg.cell_activation, rng=rng))
            width = hidden
        self.head_hidden = Dense(width, cfg.head_hidden, activation="relu", rng=rng)
        self.head_out = Dense(cfg.head_hidden, cfg.head_width, rng=rng)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, conv in enumerate(self.convs):
            out += [(f"encoder.conv{i}.{n}", p) for n, p in conv.parameters()]
        out += [(f"encoder.dense.{n}", p) for n, p in self.encoder_dense.parameters()]
        for i, lstm in enumerate(self.lstms):
            out += [(f"lstm{i}.{n}", p) for n, p in lstm.parameters()]
        out += [(f"head.hidden.{n}", p) for n, p in self.head_hidden.parameters()]
        out += [(f"head.out.{n}", p) for n, p in self.head_out.parameters()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def encoder_parameters(self) -> list[Tensor]:
        return [p for n, p in self.named_parameters() if n.startswith("encoder.")]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def encode(self, frames) -> Tensor:
        """Encode a batch of frames ``[M, C, H, W]`` into ``[M, encoder_width]``."""
        x = ad.as_tensor(frames)
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.grid_size, cfg.grid_size):
            raise ShapeError(
                f"encoder: expected frames [M,{cfg.in_channels},{cfg.grid_size},{cfg.grid_size}], got {x.shape}"
            )
        for conv in self.convs:
            x = ad.maxpool2(ad.relu(conv(x)))
        x = ad.reshape(x, (x.shape[0], self.flat_width))
        return self.encoder_dense(x)

    def forward(self, x) -> Tensor:
        """Predict from one window ``[T, C, H, W]`` (returns ``[head]``) or a batch ``[N, T, C, H, W]``."""
        x = ad.as_tensor(x)
        if x.data.ndim == 4:
            y = self.forward(ad.reshape(x, (1,) + x.shape))
            return ad.reshape(y, (self.config.head_width,))
        cfg = self.config
        if x.data.ndim != 5:
            raise ShapeError(f"forward: expected [N,T,C,H,W] or [T,C,H,W], got {x.shape}")
        n, t = x.shape[:2]
        if t != cfg.n_steps:
            raise ShapeError(f"forward: model expects windows of {cfg.n_steps} frames, got {t}")
        feats = self.encode(ad.reshape(x, (n * t,) + x.shape[2:]))
        feats = ad.reshape(feats, (n, t, cfg.encoder_width))
        seq = [ad.reshape(feats[:, k, :], (n, cfg.encoder_width)) for k in range(t)]
        for lstm in self.lstms:
            seq = lstm(seq)
        return self.head_out(self.head_hidden(seq[-1]))

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Graph-free batched inference on ``[N, T, C, H, W]``; returns ``[N, head]``."""
        x = np.asarray(x)
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(Tensor(x[i:i + batch_size])).data)
        if not out:
            return np.zeros((0, self.config.head_width))
        return np.concatenate(out, axis=0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_parameters():
            if n not in state:
                raise KeyError(f"missing parameter {n}")
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {n}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def encode_timestep(model: LandfallModel, frame) -> np.ndarray:
    """Feature vector for a single ``[12, H, W]`` frame."""
    frame = np.asarray(frame.data if isinstance(frame, Tensor) else frame, dtype=np.float64)
    cfg = model.config
    if frame.shape != (cfg.in_channels, cfg.grid_size, cfg.grid_size):
        raise ShapeError(f"encode_timestep: expected frame {(cfg.in_channels, cfg.grid_size, cfg.grid_size)}, "
                         f"got {frame.shape}")
    with ad.no_grad():
        return model.encode(Tensor(frame[None])).data[0]
