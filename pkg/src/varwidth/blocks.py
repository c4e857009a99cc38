"""Parameterized Lipschitz blocks, width embedding, and the two stochastic blocks.

A network here is always a stochastic block followed by a linear bottleneck
map and a fixed tail block:

    f(x, eps) = tail( act( M @ g1(x, eps) + b_M ) )

where g1 is either a deterministic trunk with a multiplicative dropout mask
or a Gaussian reparameterized encoder.  The deterministic counterpart
replaces the noise by its mean (mask -> 1, eps -> 0), which is exact for
both noise kinds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .numkit import RngStream, as_matrix, as_vector

ACTIVATIONS = ("identity", "relu", "tanh")


def apply_activation(name: str, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return a
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    raise ConfigurationError(f"unknown activation {name!r}; allowed: {ACTIVATIONS}")


def activation_derivative(name: str, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation at pre-activation a (relu subgradient at 0 is 0)."""
    if name == "identity":
        return np.ones_like(a)
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    raise ConfigurationError(f"unknown activation {name!r}; allowed: {ACTIVATIONS}")


@dataclass
class DenseLayerParams:
    """One layer sigma(W x + b); weights are out_dim x in_dim."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = as_matrix(self.weights)
        self.bias = as_vector(self.bias)
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ConfigurationError(
                f"layer bias length {self.bias.shape[0]} does not match out_dim {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}; allowed: {ACTIVATIONS}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayerParams":
        return DenseLayerParams(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class BlockSpec:
    """A chain of dense layers; with no layers it is the identity on d_in."""

    layers: list[DenseLayerParams] = field(default_factory=list)
    identity_dim: int | None = None  # required only for the empty chain

    def __post_init__(self):
        if not self.layers and self.identity_dim is None:
            raise ConfigurationError("an empty block needs identity_dim to fix its width")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigurationError(
                    f"layer dimensions do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def d_in(self) -> int:
        return self.layers[0].in_dim if self.layers else int(self.identity_dim)

    @property
    def d_out(self) -> int:
        return self.layers[-1].out_dim if self.layers else int(self.identity_dim)

    def copy(self) -> "BlockSpec":
        return BlockSpec([l.copy() for l in self.layers], self.identity_dim)


@dataclass
class NoiseSpec:
    """Distribution of the latent noise: mean-one dropout masks or standard Gaussians."""

    kind: str  # "dropout" | "standard_gaussian"
    p: float | None = None

    def __post_init__(self):
        if self.kind == "dropout":
            if self.p is None or not 0.0 < self.p < 1.0:
                raise ConfigurationError(f"dropout keep-probability must lie in (0, 1), got {self.p}")
        elif self.kind == "standard_gaussian":
            if self.p is not None:
                raise ConfigurationError("standard_gaussian noise takes no probability parameter")
        else:
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")


@dataclass
class EncoderBlockParams:
    """Gaussian reparameterized block: mean_map h(x) + eps * (scale_map h(x) + scale_bias)."""

    trunk: BlockSpec
    mean_map: np.ndarray
    scale_map: np.ndarray
    scale_bias: np.ndarray

    def __post_init__(self):
        self.mean_map = as_matrix(self.mean_map)
        self.scale_map = as_matrix(self.scale_map)
        self.scale_bias = as_vector(self.scale_bias)
        if self.mean_map.shape != self.scale_map.shape:
            raise ConfigurationError(
                f"mean/scale maps must have identical shapes, got {self.mean_map.shape} vs {self.scale_map.shape}"
            )
        if self.mean_map.shape[1] != self.trunk.d_out:
            raise ConfigurationError(
                f"encoder maps expect trunk width {self.mean_map.shape[1]}, trunk has {self.trunk.d_out}"
            )
        if self.scale_bias.shape[0] != self.mean_map.shape[0]:
            raise ConfigurationError("scale_bias length must match the encoder output width")

    @property
    def d_in(self) -> int:
        return self.trunk.d_in

    @property
    def d_out(self) -> int:
        return self.mean_map.shape[0]

    def copy(self) -> "EncoderBlockParams":
        return EncoderBlockParams(
            self.trunk.copy(), self.mean_map.copy(), self.scale_map.copy(), self.scale_bias.copy()
        )


@dataclass
class StochasticNet:
    """Stochastic block -> bottleneck affine map -> activation -> tail block."""

    noise: NoiseSpec
    block: BlockSpec | EncoderBlockParams
    bottleneck: np.ndarray
    bottleneck_bias: np.ndarray | None = None
    tail_activation: str = "identity"
    tail: BlockSpec | None = None

    def __post_init__(self):
        self.bottleneck = as_matrix(self.bottleneck)
        if self.bottleneck_bias is None:
            self.bottleneck_bias = np.zeros(self.bottleneck.shape[0])
        self.bottleneck_bias = as_vector(self.bottleneck_bias)
        if self.bottleneck_bias.shape[0] != self.bottleneck.shape[0]:
            raise ConfigurationError("bottleneck bias length must match its row count")
        if self.tail is None:
            self.tail = BlockSpec([], identity_dim=self.bottleneck.shape[0])
        if self.tail_activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.tail_activation!r}")
        if self.noise.kind == "dropout" and not isinstance(self.block, BlockSpec):
            raise ConfigurationError("dropout noise requires a plain trunk block")
        if self.noise.kind == "standard_gaussian" and not isinstance(self.block, EncoderBlockParams):
            raise ConfigurationError("standard_gaussian noise requires an encoder block")
        if self.bottleneck.shape[1] != self.block.d_out:
            raise ConfigurationError(
                f"bottleneck expects width {self.bottleneck.shape[1]}, stochastic block has {self.block.d_out}"
            )
        if self.tail.d_in != self.bottleneck.shape[0]:
            raise ConfigurationError(
                f"tail expects width {self.tail.d_in}, bottleneck produces {self.bottleneck.shape[0]}"
            )

    @property
    def widths(self) -> tuple[int, int, int, int]:
        """(d0, d1, d, d2): input, stochastic width, bottleneck output, network output."""
        return (self.block.d_in, self.block.d_out, self.bottleneck.shape[0], self.tail.d_out)

    def copy(self) -> "StochasticNet":
        return StochasticNet(
            NoiseSpec(self.noise.kind, self.noise.p),
            self.block.copy(),
            self.bottleneck.copy(),
            self.bottleneck_bias.copy(),
            self.tail_activation,
            self.tail.copy(),
        )


def dense_forward(layer: DenseLayerParams, x: np.ndarray) -> np.ndarray:
    """sigma(W x + b) for a single vector."""
    x = as_vector(x)
    if x.shape[0] != layer.in_dim:
        raise ConfigurationError(f"layer expects dim {layer.in_dim}, input has {x.shape[0]}")
    return apply_activation(layer.activation, layer.weights @ x + layer.bias)


def block_forward(block: BlockSpec, x: np.ndarray) -> np.ndarray:
    """Evaluate the layer chain on one vector."""
    x = as_vector(x)
    if x.shape[0] != block.d_in:
        raise ConfigurationError(f"block expects dim {block.d_in}, input has {x.shape[0]}")
    for layer in block.layers:
        x = dense_forward(layer, x)
    return x


def _block_forward_batch(block: BlockSpec, x: np.ndarray) -> np.ndarray:
    # internal row-batched evaluation (rows are independent inputs)
    for layer in block.layers:
        x = apply_activation(layer.activation, x @ layer.weights.T + layer.bias)
    return x


def embed_block(src: BlockSpec, new_out: int, index_map) -> BlockSpec:
    """A wider block whose output l equals coordinate index_map[l] of src, for every input.

    index_map is a sequence of 0-based source coordinates, one per new output.
    Only the final layer is rebuilt (rows and bias entries are copied), so the
    agreement is bitwise.
    """
    if new_out < 1:
        raise ConfigurationError(f"new output width must be >= 1, got {new_out}")
    if not src.layers:
        raise ConfigurationError("cannot embed an empty (identity) block")
    idx = np.asarray(index_map, dtype=np.intp)
    if idx.shape != (new_out,):
        raise ConfigurationError(f"index map must list exactly {new_out} source coordinates")
    if idx.min() < 0 or idx.max() >= src.d_out:
        raise ConfigurationError(
            f"index map values must lie in [0, {src.d_out - 1}], got range [{idx.min()}, {idx.max()}]"
        )
    last = src.layers[-1]
    widened = DenseLayerParams(last.weights[idx, :].copy(), last.bias[idx].copy(), last.activation)
    return BlockSpec([l.copy() for l in src.layers[:-1]] + [widened])


def dropout_forward(block: BlockSpec, x: np.ndarray, p: float, rng: RngStream) -> np.ndarray:
    """One sample of the dropout block: a fresh mean-one mask times the block output."""
    h = block_forward(block, x)
    mask = rng.dropout_mask(h.shape[0], p)
    return mask * h


def encoder_forward(enc: EncoderBlockParams, x: np.ndarray, rng: RngStream) -> np.ndarray:
    """One sample of the encoder block with fresh standard-Gaussian noise."""
    h = block_forward(enc.trunk, x)
    eps = rng.normal(enc.d_out)
    return enc.mean_map @ h + eps * (enc.scale_map @ h + enc.scale_bias)


def stochastic_block_mean(net: StochasticNet, x: np.ndarray) -> np.ndarray:
    """Noise-expectation of the stochastic block output (mask -> 1, eps -> 0)."""
    if net.noise.kind == "dropout":
        return block_forward(net.block, x)
    h = block_forward(net.block.trunk, x)
    return net.block.mean_map @ h


def noise_sigma_diag(net: StochasticNet, x: np.ndarray) -> np.ndarray:
    """Per-coordinate variance of the stochastic block output at x (diagonal covariance)."""
    if net.noise.kind == "dropout":
        h = block_forward(net.block, x)
        return ((1.0 - net.noise.p) / net.noise.p) * h * h
    h = block_forward(net.block.trunk, x)
    s = net.block.scale_map @ h + net.block.scale_bias
    return s * s


def _tail_apply(net: StochasticNet, z: np.ndarray) -> np.ndarray:
    u = net.bottleneck @ z + net.bottleneck_bias
    return block_forward(net.tail, apply_activation(net.tail_activation, u))


def stochastic_forward(net: StochasticNet, x: np.ndarray, rng: RngStream) -> np.ndarray:
    """One sample f(x, eps) with fresh noise."""
    if net.noise.kind == "dropout":
        z = dropout_forward(net.block, x, net.noise.p, rng)
    else:
        z = encoder_forward(net.block, x, rng)
    return _tail_apply(net, z)


def expect_block(net: StochasticNet, x: np.ndarray) -> np.ndarray:
    """The deterministic counterpart: noise replaced by its mean, no sampling."""
    return _tail_apply(net, stochastic_block_mean(net, x))


def bottleneck_input(net: StochasticNet, z: np.ndarray) -> np.ndarray:
    """Affine bottleneck output (the tail's pre-activation) for a stochastic-block sample z."""
    return net.bottleneck @ as_vector(z) + net.bottleneck_bias


# ---------------------------------------------------------------------------
# constructors


def init_dense_layer(rng: RngStream, in_dim: int, out_dim: int, activation: str = "identity") -> DenseLayerParams:
    """Weights and bias drawn uniformly from [-1/sqrt(in_dim), 1/sqrt(in_dim)]."""
    bound = 1.0 / np.sqrt(in_dim)
    w = (2.0 * rng.uniform(out_dim * in_dim) - 1.0).reshape(out_dim, in_dim) * bound
    b = (2.0 * rng.uniform(out_dim) - 1.0) * bound
    return DenseLayerParams(w, b, activation)


def mlp_dropout_net(d_in: int, width: int, d_out: int, p: float, rng: RngStream,
                    activation: str = "relu") -> StochasticNet:
    """d_in -> width -> d_out perceptron with a mean-one dropout mask on the hidden activations."""
    trunk = BlockSpec([init_dense_layer(rng, d_in, width, activation)])
    out = init_dense_layer(rng, width, d_out, "identity")
    return StochasticNet(NoiseSpec("dropout", p), trunk, out.weights, out.bias)


def mlp_two_hidden_dropout_net(d_in: int, width: int, inner: int, d_out: int, p: float,
                               rng: RngStream, activation: str = "tanh") -> StochasticNet:
    """d_in -> width -> inner -> d_out perceptron, dropout on the first hidden layer.

    The second linear map is the bottleneck and the last layer forms a
    nonempty tail, so the inner width can be grown independently.
    """
    trunk = BlockSpec([init_dense_layer(rng, d_in, width, activation)])
    mid = init_dense_layer(rng, width, inner, "identity")
    tail = BlockSpec([init_dense_layer(rng, inner, d_out, "identity")])
    return StochasticNet(NoiseSpec("dropout", p), trunk, mid.weights, mid.bias,
                         tail_activation=activation, tail=tail)


def gaussian_vae_net(d_in: int, enc_hidden: int, width: int, dec_hidden: int, d_out: int,
                     rng: RngStream, activation: str = "relu") -> StochasticNet:
    """Encoder d_in -> enc_hidden -> (mean, scale) of size width; decoder width -> dec_hidden -> d_out.

    The scale bias starts at 1 so the per-coordinate KL penalty is finite and
    near its minimum at initialization.
    """
    trunk = BlockSpec([init_dense_layer(rng, d_in, enc_hidden, activation)])
    mean_layer = init_dense_layer(rng, enc_hidden, width, "identity")
    scale_layer = init_dense_layer(rng, enc_hidden, width, "identity")
    enc = EncoderBlockParams(trunk, mean_layer.weights, scale_layer.weights, np.ones(width))
    dec_in = init_dense_layer(rng, width, dec_hidden, "identity")
    tail = BlockSpec([init_dense_layer(rng, dec_hidden, d_out, "identity")])
    return StochasticNet(NoiseSpec("standard_gaussian", None), enc, dec_in.weights, dec_in.bias,
                         tail_activation=activation, tail=tail)


# ---------------------------------------------------------------------------
# serialization (JSON handoff between the CLI stages)


def _layer_to_json(layer: DenseLayerParams) -> dict:
    return {
        "rows": layer.out_dim,
        "cols": layer.in_dim,
        "weights": layer.weights.ravel().tolist(),
        "bias": layer.bias.tolist(),
        "activation": layer.activation,
    }


def _layer_from_json(doc: dict) -> DenseLayerParams:
    w = np.asarray(doc["weights"], dtype=np.float64).reshape(doc["rows"], doc["cols"])
    return DenseLayerParams(w, np.asarray(doc["bias"], dtype=np.float64), doc["activation"])


def net_to_json(net: StochasticNet) -> str:
    doc = {
        "widths": list(net.widths),
        "noise": {"kind": net.noise.kind, "p": net.noise.p},
        "layers": [_layer_to_json(l) for l in _trunk_of(net).layers],
        "bottleneck": {
            "rows": net.bottleneck.shape[0],
            "cols": net.bottleneck.shape[1],
            "weights": net.bottleneck.ravel().tolist(),
            "bias": net.bottleneck_bias.tolist(),
        },
        "tail": {
            "activation": net.tail_activation,
            "layers": [_layer_to_json(l) for l in net.tail.layers],
        },
    }
    if net.noise.kind == "standard_gaussian":
        enc = net.block
        doc["encoder"] = {
            "rows": enc.d_out,
            "cols": enc.trunk.d_out,
            "mean_map": enc.mean_map.ravel().tolist(),
            "scale_map": enc.scale_map.ravel().tolist(),
            "scale_bias": enc.scale_bias.tolist(),
        }
    return json.dumps(doc)


def net_from_json(text: str) -> StochasticNet:
    doc = json.loads(text)
    noise = NoiseSpec(doc["noise"]["kind"], doc["noise"].get("p"))
    trunk_layers = [_layer_from_json(l) for l in doc["layers"]]
    d0 = doc["widths"][0]
    trunk = BlockSpec(trunk_layers, identity_dim=None if trunk_layers else d0)
    if noise.kind == "dropout":
        block: BlockSpec | EncoderBlockParams = trunk
    else:
        enc = doc["encoder"]
        shape = (enc["rows"], enc["cols"])
        block = EncoderBlockParams(
            trunk,
            np.asarray(enc["mean_map"], dtype=np.float64).reshape(shape),
            np.asarray(enc["scale_map"], dtype=np.float64).reshape(shape),
            np.asarray(enc["scale_bias"], dtype=np.float64),
        )
    bn = doc["bottleneck"]
    tail_layers = [_layer_from_json(l) for l in doc["tail"]["layers"]]
    tail = BlockSpec(tail_layers, identity_dim=None if tail_layers else bn["rows"])
    return StochasticNet(
        noise,
        block,
        np.asarray(bn["weights"], dtype=np.float64).reshape(bn["rows"], bn["cols"]),
        np.asarray(bn["bias"], dtype=np.float64),
        doc["tail"]["activation"],
        tail,
    )


def _trunk_of(net: StochasticNet) -> BlockSpec:
    return net.block if isinstance(net.block, BlockSpec) else net.block.trunk
