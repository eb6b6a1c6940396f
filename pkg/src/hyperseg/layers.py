"""Graph/hypergraph convolutional layers and the MLP classification head.

A convolutional layer runs propagate -> affine -> batchnorm -> ELU ->
dropout, optionally adding a residual connection when the widths match. The
propagation operator decides the layer flavor: a normalized adjacency gives
a graph convolution, a factored hypergraph operator gives the hypergraph
convolution. Everything differentiable is recorded on the gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ShapeMismatchError
from .graphs import HypergraphPropagator
from .sparse import SparseMatrix

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def propagate(op, x: ag.Var) -> ag.Var:
    """Apply a propagation operator to node activations on the tape."""
    if isinstance(op, SparseMatrix):
        return ag.spmm(op, x)
    if isinstance(op, HypergraphPropagator):
        y = ag.row_scale(x, op.node_scale)
        y = ag.spmm(op.incidence.transpose(), y)
        y = ag.row_scale(y, op.edge_scale)
        y = ag.spmm(op.incidence, y)
        return ag.row_scale(y, op.node_scale)
    raise ShapeMismatchError(f"unsupported operator type: {type(op).__name__}")


def dropout(x: ag.Var, rate: float, mode: str, rng: np.random.Generator) -> ag.Var:
    """Zero entries with probability `rate` in train mode, scaling survivors
    by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if mode != "train" or rate == 0.0:
        return x
    keep = rng.random(x.value.shape) >= rate
    return ag.elementwise_mul(x, keep / (1.0 - rate))


@dataclass
class ConvLayerParams:
    """Trainable weights plus batchnorm state for one convolutional layer."""

    weight: ag.Var           # F_in x F_out
    bias: ag.Var             # (F_out,)
    bn_gain: ag.Var          # (F_out,)
    bn_bias: ag.Var          # (F_out,)
    running_mean: np.ndarray
    running_var: np.ndarray
    residual: bool = False

    @staticmethod
    def create(rng: np.random.Generator, f_in: int, f_out: int,
               residual: bool = False) -> "ConvLayerParams":
        if residual and f_in != f_out:
            raise ShapeMismatchError("residual connection needs matching widths")
        return ConvLayerParams(
            weight=ag.parameter(glorot_uniform(rng, f_in, f_out)),
            bias=ag.parameter(np.zeros(f_out)),
            bn_gain=ag.parameter(np.ones(f_out)),
            bn_bias=ag.parameter(np.zeros(f_out)),
            running_mean=np.zeros(f_out),
            running_var=np.ones(f_out),
            residual=residual,
        )

    def trainable(self) -> list[ag.Var]:
        return [self.weight, self.bias, self.bn_gain, self.bn_bias]

    def decay_mask(self) -> list[bool]:
        # decay applies to the weight matrix only
        return [True, False, False, False]


def conv_layer_forward(op, x: ag.Var, params: ConvLayerParams, mode: str,
                       rng: np.random.Generator, dropout_rate: float = 0.5,
                       bn: bool = True) -> ag.Var:
    """One graph/hypergraph convolutional layer.

    Train mode normalizes by batch statistics and updates the running ones
    in place; eval mode uses the running statistics and skips dropout.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode: {mode}")
    h = propagate(op, x)
    z = ag.add_row_vector(ag.matmul(h, params.weight), params.bias)
    if bn:
        if mode == "train":
            z, mean, var = ag.batchnorm_train(z, params.bn_gain, params.bn_bias, BN_EPS)
            params.running_mean += BN_MOMENTUM * (mean - params.running_mean)
            params.running_var += BN_MOMENTUM * (var - params.running_var)
        else:
            z = ag.batchnorm_eval(z, params.bn_gain, params.bn_bias,
                                  params.running_mean, params.running_var, BN_EPS)
    a = ag.elu(z)
    a = dropout(a, dropout_rate, mode, rng)
    if params.residual:
        if x.value.shape != a.value.shape:
            raise ShapeMismatchError("residual connection needs matching widths")
        a = ag.add(a, x)
    return a


# The operator decides the flavor; both layers share one contract.
gcl_forward = conv_layer_forward
hcl_forward = conv_layer_forward


@dataclass
class HeadParams:
    """Two affine layers (hidden -> hidden ELU, hidden -> classes)."""

    w1: ag.Var
    b1: ag.Var
    w2: ag.Var
    b2: ag.Var

    @staticmethod
    def create(rng: np.random.Generator, hidden: int, n_classes: int) -> "HeadParams":
        return HeadParams(
            w1=ag.parameter(glorot_uniform(rng, hidden, hidden)),
            b1=ag.parameter(np.zeros(hidden)),
            w2=ag.parameter(glorot_uniform(rng, hidden, n_classes)),
            b2=ag.parameter(np.zeros(n_classes)),
        )

    def trainable(self) -> list[ag.Var]:
        return [self.w1, self.b1, self.w2, self.b2]

    def decay_mask(self) -> list[bool]:
        return [True, False, True, False]


def mlp_head_forward(x: ag.Var, params: HeadParams) -> ag.Var:
    """Classify embeddings into per-node log-probabilities."""
    h = ag.elu(ag.add_row_vector(ag.matmul(x, params.w1), params.b1))
    logits = ag.add_row_vector(ag.matmul(h, params.w2), params.b2)
    return ag.log_softmax_rows(logits)


@dataclass
class StageModel:
    """A stack of convolutional layers followed by the classification head."""

    convs: list[ConvLayerParams]
    head: HeadParams
    dropout_rate: float = 0.5

    @staticmethod
    def create(rng: np.random.Generator, f_in: int, hidden: int, n_classes: int,
               n_conv_layers: int, dropout_rate: float = 0.5) -> "StageModel":
        if n_conv_layers < 1:
            raise ValueError("need at least one convolutional layer")
        convs = [ConvLayerParams.create(rng, f_in, hidden)]
        for _ in range(n_conv_layers - 1):
            convs.append(ConvLayerParams.create(rng, hidden, hidden, residual=True))
        return StageModel(convs, HeadParams.create(rng, hidden, n_classes), dropout_rate)

    def forward(self, op, x: np.ndarray, mode: str,
                rng: np.random.Generator) -> tuple[ag.Var, ag.Var]:
        """Returns (log-probabilities, final embedding tap)."""
        h = ag.constant(x)
        for layer in self.convs:
            h = conv_layer_forward(op, h, layer, mode, rng, self.dropout_rate)
        return mlp_head_forward(h, self.head), h

    def trainable(self) -> list[ag.Var]:
        out = []
        for layer in self.convs:
            out.extend(layer.trainable())
        out.extend(self.head.trainable())
        return out

    def decay_mask(self) -> list[bool]:
        out = []
        for layer in self.convs:
            out.extend(layer.decay_mask())
        out.extend(self.head.decay_mask())
        return out

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All state (trainable and running) as named arrays, stable order."""
        out = []
        for i, layer in enumerate(self.convs):
            out += [(f"conv{i}.weight", layer.weight.value),
                    (f"conv{i}.bias", layer.bias.value),
                    (f"conv{i}.bn_gain", layer.bn_gain.value),
                    (f"conv{i}.bn_bias", layer.bn_bias.value),
                    (f"conv{i}.running_mean", layer.running_mean),
                    (f"conv{i}.running_var", layer.running_var)]
        out += [("head.w1", self.head.w1.value), ("head.b1", self.head.b1.value),
                ("head.w2", self.head.w2.value), ("head.b2", self.head.b2.value)]
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.named_arrays()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for name, arr in self.named_arrays():
            src = snap[name]
            if src.shape != arr.shape:
                raise ShapeMismatchError(f"snapshot shape mismatch for {name}")
            arr[...] = src
