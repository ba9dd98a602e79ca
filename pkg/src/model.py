"""Mask-estimation network with hand-derived gradients.

The network maps normalized mixture features (one frame per time step) to
S masks per frame. Hidden layers are dense, recurrent (tanh cell or LSTM,
left to right) or bidirectional (both directions, outputs concatenated). Dropout is
applied to the input of every layer above the first, never across time
steps.
"""

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dsp import MagSpectrogram
from .errors import BadConfigError, CheckpointError, ShapeMismatchError
from .masks import MaskKind, MaskSet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UPITCKPT"
CHECKPOINT_VERSION = 1
CHECKPOINT_PREAMBLE = struct.Struct("<8sII")


class LayerKind(str, Enum):
    DENSE = "dense"
    RECURRENT = "recurrent"
    BIRECURRENT = "birecurrent"
    LSTM = "lstm"
    BILSTM = "bilstm"


BIDIRECTIONAL = (LayerKind.BIRECURRENT, LayerKind.BILSTM)
GATED = (LayerKind.LSTM, LayerKind.BILSTM)


class Activation(str, Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    RELU = "relu"
    TANH = "tanh"


HIDDEN_ACTIVATIONS = (Activation.RELU, Activation.TANH)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    width: int

    @property
    def output_width(self) -> int:
        return 2 * self.width if self.kind in BIDIRECTIONAL else self.width


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_bins: int
    num_speakers: int
    layers: Tuple[LayerSpec, ...]
    activation: Activation = Activation.SOFTMAX
    hidden_activation: Activation = Activation.RELU
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self,
            "layers",
            tuple(LayerSpec(LayerKind(l.kind), int(l.width)) for l in self.layers),
        )
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "hidden_activation", Activation(self.hidden_activation))

        if self.input_dim < 1 or self.num_bins < 1 or self.num_speakers < 1:
            raise BadConfigError(
                f"invalid model dimensions: input {self.input_dim}, bins {self.num_bins}, "
                f"speakers {self.num_speakers}"
            )
        if any(layer.width < 1 for layer in self.layers):
            raise BadConfigError("every hidden layer needs a positive width")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise BadConfigError(
                f"hidden activation must be relu or tanh, got {self.hidden_activation.value}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def output_dim(self) -> int:
        return self.num_bins * self.num_speakers

    @classmethod
    def parse_layers(cls, text: str, width: int) -> Tuple[LayerSpec, ...]:
        """``"birecurrent,birecurrent"`` or ``"dense:128,bilstm:64"``."""

        layers = []
        for item in filter(None, (part.strip() for part in text.split(","))):
            kind, _, layer_width = item.partition(":")
            try:
                layers.append(LayerSpec(LayerKind(kind), int(layer_width) if layer_width else width))
            except ValueError as e:
                raise BadConfigError(f"invalid layer '{item}': {e}")
        return tuple(layers)

    def to_dict(self) -> Dict:
        return {
            "input_dim": self.input_dim,
            "num_bins": self.num_bins,
            "num_speakers": self.num_speakers,
            "layers": [[layer.kind.value, layer.width] for layer in self.layers],
            "activation": self.activation.value,
            "hidden_activation": self.hidden_activation.value,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelSpec":
        return cls(
            input_dim=data["input_dim"],
            num_bins=data["num_bins"],
            num_speakers=data["num_speakers"],
            layers=tuple(LayerSpec(LayerKind(kind), width) for kind, width in data["layers"]),
            activation=Activation(data["activation"]),
            hidden_activation=Activation(data["hidden_activation"]),
            dropout=data["dropout"],
        )


ParamDict = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelParams:
    spec: ModelSpec
    layers: Tuple[ParamDict, ...]
    feature_mean: np.ndarray = field(repr=False)
    feature_std: np.ndarray = field(repr=False)

    @property
    def output(self) -> ParamDict:
        return self.layers[-1]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for layer in self.layers for v in layer.values())

    def with_normalization(self, mean: np.ndarray, std: np.ndarray) -> "ModelParams":
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        std = np.asarray(std, dtype=np.float64).reshape(-1)
        if mean.size != self.spec.input_dim or std.size != self.spec.input_dim:
            raise ShapeMismatchError(
                f"normalization statistics must have {self.spec.input_dim} entries"
            )
        return replace(self, feature_mean=mean, feature_std=std)

    def with_dropout(self, dropout: float) -> "ModelParams":
        return replace(self, spec=replace(self.spec, dropout=dropout))

    def num_parameters(self) -> int:
        return sum(v.size for layer in self.layers for v in layer.values())


@dataclass
class ForwardTrace:
    inputs: List[np.ndarray]
    dropout_masks: List[Optional[np.ndarray]]
    hidden: List[Dict]
    output_pre: np.ndarray
    output_act: np.ndarray


def _param_shapes(spec: ModelSpec) -> List[Dict[str, Tuple[int, ...]]]:

    shapes = []
    fan_in = spec.input_dim
    for layer in spec.layers:
        H = layer.width
        G = 4 * H if layer.kind in GATED else H
        if layer.kind == LayerKind.DENSE:
            shapes.append({"W": (fan_in, H), "b": (H,)})
        elif layer.kind in BIDIRECTIONAL:
            shapes.append(
                {
                    "W_f": (fan_in, G), "U_f": (H, G), "b_f": (G,),
                    "W_b": (fan_in, G), "U_b": (H, G), "b_b": (G,),
                }
            )
        else:
            shapes.append({"W": (fan_in, G), "U": (H, G), "b": (G,)})
        fan_in = layer.output_width
    shapes.append({"W": (fan_in, spec.output_dim), "b": (spec.output_dim,)})
    return shapes


def init_params(spec: ModelSpec, rng_seed: int = 0) -> ModelParams:
    """Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)); zero biases."""

    rng = np.random.default_rng(rng_seed)
    layers = []
    for shapes in _param_shapes(spec):
        params = {}
        for name, shape in shapes.items():
            if len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-bound, bound, size=shape)
        layers.append(params)

    logger.debug(f"Initialized {len(layers)} layers from seed {rng_seed}")
    return ModelParams(
        spec=spec,
        layers=tuple(layers),
        feature_mean=np.zeros(spec.input_dim),
        feature_std=np.ones(spec.input_dim),
    )


def compute_feature_stats(features: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std over every frame of D x T feature arrays."""

    if not features:
        raise ShapeMismatchError("no features to compute normalization statistics from")
    frames = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=1)
    mean = frames.mean(axis=1)
    std = frames.std(axis=1)
    std[std < 1e-8] = 1.0
    return mean, std


def stack_features(mixture_mag: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Second-stage input: the mixture features on top of first-stage masks."""

    S, F, T = masks.shape
    return np.concatenate([mixture_mag, masks.reshape(S * F, T)], axis=0)


def _hidden_forward(pre: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.RELU:
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _hidden_backward(grad: np.ndarray, pre: np.ndarray, out: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.RELU:
        return grad * (pre > 0)
    return grad * (1.0 - out * out)


def _recurrent_forward(x: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray) -> Dict[str, np.ndarray]:

    T = x.shape[0]
    H = U.shape[0]
    projected = x @ W + b
    states = np.zeros((T, H))
    prev = np.zeros(H)
    for t in range(T):
        prev = np.tanh(projected[t] + prev @ U)
        states[t] = prev
    return {"h": states}


def _recurrent_backward(
    x: np.ndarray, cache: Dict[str, np.ndarray], d_states: np.ndarray, W: np.ndarray, U: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backpropagation through time for h_t = tanh(x_t W + h_{t-1} U + b)."""

    states = cache["h"]
    T, H = states.shape
    d_pre = np.zeros((T, H))
    carry = np.zeros(H)
    for t in range(T - 1, -1, -1):
        d_h = d_states[t] + carry
        d_pre[t] = d_h * (1.0 - states[t] * states[t])
        carry = d_pre[t] @ U.T

    previous = np.vstack([np.zeros((1, H)), states[:-1]])
    return x.T @ d_pre, previous.T @ d_pre, d_pre.sum(axis=0), d_pre @ W.T


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _lstm_forward(x: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray) -> Dict[str, np.ndarray]:
    """Gate blocks are input, forget, output, candidate, each H wide."""

    T = x.shape[0]
    H = U.shape[0]
    projected = x @ W + b
    gates = np.zeros((T, 4 * H))
    cells = np.zeros((T, H))
    states = np.zeros((T, H))
    h, c = np.zeros(H), np.zeros(H)
    for t in range(T):
        z = projected[t] + h @ U
        i, f, o = _sigmoid(z[:H]), _sigmoid(z[H : 2 * H]), _sigmoid(z[2 * H : 3 * H])
        g = np.tanh(z[3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[t] = np.concatenate([i, f, o, g])
        cells[t], states[t] = c, h
    return {"h": states, "c": cells, "gates": gates}


def _lstm_backward(
    x: np.ndarray, cache: Dict[str, np.ndarray], d_states: np.ndarray, W: np.ndarray, U: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:

    states, cells, gates = cache["h"], cache["c"], cache["gates"]
    T, H = states.shape
    d_z = np.zeros((T, 4 * H))
    carry_h, carry_c = np.zeros(H), np.zeros(H)
    for t in range(T - 1, -1, -1):
        i, f, o, g = gates[t, :H], gates[t, H : 2 * H], gates[t, 2 * H : 3 * H], gates[t, 3 * H :]
        c_prev = cells[t - 1] if t > 0 else np.zeros(H)
        tanh_c = np.tanh(cells[t])

        d_h = d_states[t] + carry_h
        d_c = d_h * o * (1.0 - tanh_c * tanh_c) + carry_c
        d_z[t] = np.concatenate(
            [
                d_c * g * i * (1.0 - i),
                d_c * c_prev * f * (1.0 - f),
                d_h * tanh_c * o * (1.0 - o),
                d_c * i * (1.0 - g * g),
            ]
        )
        carry_c = d_c * f
        carry_h = d_z[t] @ U.T

    previous = np.vstack([np.zeros((1, H)), states[:-1]])
    return x.T @ d_z, previous.T @ d_z, d_z.sum(axis=0), d_z @ W.T


def _cell_forward(kind: LayerKind, x: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray) -> Dict[str, np.ndarray]:
    return (_lstm_forward if kind in GATED else _recurrent_forward)(x, W, U, b)


def _cell_backward(
    kind: LayerKind, x: np.ndarray, cache: Dict[str, np.ndarray], d_states: np.ndarray, W: np.ndarray, U: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (_lstm_backward if kind in GATED else _recurrent_backward)(x, cache, d_states, W, U)


def _output_activation(pre: np.ndarray, activation: Activation) -> np.ndarray:

    if activation == Activation.SOFTMAX:
        shifted = np.exp(pre - pre.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)
    if activation == Activation.SIGMOID:
        return 0.5 * (1.0 + np.tanh(0.5 * pre))
    if activation == Activation.RELU:
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _output_backward(grad: np.ndarray, pre: np.ndarray, act: np.ndarray, activation: Activation) -> np.ndarray:

    if activation == Activation.SOFTMAX:
        return act * (grad - np.sum(act * grad, axis=1, keepdims=True))
    if activation == Activation.SIGMOID:
        return grad * act * (1.0 - act)
    if activation == Activation.RELU:
        return grad * (pre > 0)
    return grad * (1.0 - act * act)


def _features_array(features: Union[MagSpectrogram, np.ndarray]) -> np.ndarray:
    if isinstance(features, MagSpectrogram):
        return features.values
    return np.asarray(features, dtype=np.float64)


def forward(
    params: ModelParams,
    features: Union[MagSpectrogram, np.ndarray],
    train_mode: bool = False,
    rng_seed: Optional[int] = None,
) -> Tuple[MaskSet, ForwardTrace]:
    """Masks of shape S x F x T for a D x T feature matrix."""

    spec = params.spec
    values = _features_array(features)
    if values.ndim != 2 or values.shape[0] != spec.input_dim:
        raise ShapeMismatchError(
            f"feature width {values.shape[0] if values.ndim == 2 else values.shape} "
            f"does not match model input {spec.input_dim}"
        )
    if not params.all_finite():
        raise BadConfigError("model parameters contain NaN or Inf")

    rng = np.random.default_rng(rng_seed) if train_mode and spec.dropout > 0 else None
    x = (values.T - params.feature_mean) / params.feature_std

    inputs, dropout_masks, hidden = [], [], []
    for index, layer_params in enumerate(params.layers):
        mask = None
        if rng is not None and index > 0:
            keep = 1.0 - spec.dropout
            mask = (rng.random(x.shape) < keep) / keep
            x = x * mask
        inputs.append(x)
        dropout_masks.append(mask)

        if index == len(spec.layers):
            break

        layer = spec.layers[index]
        if layer.kind == LayerKind.DENSE:
            pre = x @ layer_params["W"] + layer_params["b"]
            out = _hidden_forward(pre, spec.hidden_activation)
            hidden.append({"pre": pre, "out": out})
        elif layer.kind in BIDIRECTIONAL:
            fwd = _cell_forward(layer.kind, x, layer_params["W_f"], layer_params["U_f"], layer_params["b_f"])
            # backward direction runs on reversed time; its cache stays reversed
            bwd = _cell_forward(layer.kind, x[::-1], layer_params["W_b"], layer_params["U_b"], layer_params["b_b"])
            out = np.concatenate([fwd["h"], bwd["h"][::-1]], axis=1)
            hidden.append({"fwd": fwd, "bwd": bwd, "out": out})
        else:
            cell = _cell_forward(layer.kind, x, layer_params["W"], layer_params["U"], layer_params["b"])
            out = cell["h"]
            hidden.append({"cell": cell, "out": out})
        x = out

    T = values.shape[1]
    pre = (x @ params.output["W"] + params.output["b"]).reshape(T, spec.num_speakers, spec.num_bins)
    act = _output_activation(pre, spec.activation)

    masks = MaskSet(act.transpose(1, 2, 0), MaskKind.ESTIMATED)
    trace = ForwardTrace(
        inputs=inputs,
        dropout_masks=dropout_masks,
        hidden=hidden,
        output_pre=pre,
        output_act=act,
    )
    return masks, trace


def backward(params: ModelParams, trace: ForwardTrace, upstream: np.ndarray) -> Tuple[ParamDict, ...]:
    """Parameter gradients given dJ/dM̂ of shape S x F x T."""

    spec = params.spec
    upstream = np.asarray(upstream, dtype=np.float64)
    if len(trace.inputs) != len(params.layers) or len(trace.hidden) != len(spec.layers):
        raise ShapeMismatchError("forward trace does not match the model layers")
    if upstream.transpose(2, 0, 1).shape != trace.output_act.shape:
        raise ShapeMismatchError(
            f"upstream gradient {upstream.shape} does not match model output "
            f"{trace.output_act.transpose(1, 2, 0).shape}"
        )

    T = trace.output_pre.shape[0]
    d_pre = _output_backward(
        upstream.transpose(2, 0, 1), trace.output_pre, trace.output_act, spec.activation
    ).reshape(T, spec.output_dim)

    x = trace.inputs[-1]
    grads: List[ParamDict] = [{"W": x.T @ d_pre, "b": d_pre.sum(axis=0)}]
    d_x = d_pre @ params.output["W"].T
    if trace.dropout_masks[-1] is not None:
        d_x = d_x * trace.dropout_masks[-1]

    for index in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[index]
        layer_params = params.layers[index]
        cache = trace.hidden[index]
        x = trace.inputs[index]

        if layer.kind == LayerKind.DENSE:
            d_hidden = _hidden_backward(d_x, cache["pre"], cache["out"], spec.hidden_activation)
            grads.append({"W": x.T @ d_hidden, "b": d_hidden.sum(axis=0)})
            d_x = d_hidden @ layer_params["W"].T
        elif layer.kind in BIDIRECTIONAL:
            H = layer.width
            dW_f, dU_f, db_f, dx_f = _cell_backward(
                layer.kind, x, cache["fwd"], d_x[:, :H], layer_params["W_f"], layer_params["U_f"]
            )
            dW_b, dU_b, db_b, dx_b = _cell_backward(
                layer.kind, x[::-1], cache["bwd"], d_x[::-1, H:], layer_params["W_b"], layer_params["U_b"]
            )
            grads.append(
                {"W_f": dW_f, "U_f": dU_f, "b_f": db_f, "W_b": dW_b, "U_b": dU_b, "b_b": db_b}
            )
            d_x = dx_f + dx_b[::-1]
        else:
            dW, dU, db, d_x = _cell_backward(
                layer.kind, x, cache["cell"], d_x, layer_params["W"], layer_params["U"]
            )
            grads.append({"W": dW, "U": dU, "b": db})

        if trace.dropout_masks[index] is not None:
            d_x = d_x * trace.dropout_masks[index]

    return tuple(reversed(grads))


def zeros_like_params(params: ModelParams) -> Tuple[ParamDict, ...]:
    return tuple({name: np.zeros_like(value) for name, value in layer.items()} for layer in params.layers)


def average_gradients(gradients: Sequence[Tuple[ParamDict, ...]]) -> Tuple[ParamDict, ...]:
    """Mean over utterances, summed in list order."""

    count = len(gradients)
    total = tuple({name: value.copy() for name, value in layer.items()} for layer in gradients[0])
    for grads in gradients[1:]:
        for layer_total, layer in zip(total, grads):
            for name, value in layer.items():
                layer_total[name] += value
    return tuple({name: value / count for name, value in layer.items()} for layer in total)


def apply_update(params: ModelParams, step: Sequence[ParamDict], scale: float) -> ModelParams:
    """Return params - scale * step."""

    if scale == 0.0:
        return params
    layers = tuple(
        {name: value - scale * layer_step[name] for name, value in layer.items()}
        for layer, layer_step in zip(params.layers, step)
    )
    return replace(params, layers=layers)


def save_checkpoint(path: str, params: ModelParams) -> str:

    shapes = [[[name, list(value.shape)] for name, value in layer.items()] for layer in params.layers]
    header = json.dumps({"spec": params.spec.to_dict(), "shapes": shapes}, sort_keys=True).encode("utf-8")

    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "wb") as f:
        f.write(CHECKPOINT_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for layer in params.layers:
            for value in layer.values():
                f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(params.feature_mean, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(params.feature_std, dtype="<f8").tobytes())

    logger.info(f"Saved checkpoint with {params.num_parameters()} parameters to {out_path}")
    return str(out_path)


def load_checkpoint(path: str) -> ModelParams:

    if not Path(path).exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    with open(path, "rb") as f:
        preamble = f.read(CHECKPOINT_PREAMBLE.size)
        if len(preamble) != CHECKPOINT_PREAMBLE.size:
            raise CheckpointError(f"{path} is truncated")
        magic, version, header_len = CHECKPOINT_PREAMBLE.unpack(preamble)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a model checkpoint")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path} has unsupported checkpoint version {version}")

        header = json.loads(f.read(header_len).decode("utf-8"))
        blob = f.read()

    spec = ModelSpec.from_dict(header["spec"])
    values = np.frombuffer(blob, dtype="<f8")
    offset = 0

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        if offset + count > values.size:
            raise CheckpointError(f"{path} is truncated")
        chunk = values[offset : offset + count].astype(np.float64).reshape(shape)
        offset += count
        return chunk

    layers = tuple({name: take(tuple(shape)) for name, shape in layer} for layer in header["shapes"])
    mean = take((spec.input_dim,))
    std = take((spec.input_dim,))
    if offset != values.size:
        raise CheckpointError(f"{path} has {values.size - offset} trailing values")

    expected = _param_shapes(spec)
    for layer, shapes in zip(layers, expected):
        if {name: value.shape for name, value in layer.items()} != shapes:
            raise CheckpointError(f"{path}: parameter shapes do not match the layer specs")

    logger.info(f"Loaded checkpoint from {path}")
    return ModelParams(spec=spec, layers=layers, feature_mean=mean, feature_std=std)
