"""Training objectives, reverse-mode gradients, and optimizers.

Gradients are pathwise: the drawn noise (dropout masks, Gaussian draws) is
treated as a fixed input of the sampled objective, so backprop differentiates
exactly the same function that finite differences see when the noise is
replayed from the same stream state.

All gradient and loss computations run row-batched over the full dataset;
per-example contributions are summed in index order, so results do not depend
on any execution schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    BlockSpec,
    EncoderBlockParams,
    StochasticNet,
    apply_activation,
)
from .errors import ConfigurationError, NonFiniteError, TrainingDivergenceError
from .numkit import RngStream

DIVERGENCE_THRESHOLD = 1e12


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d0)
    targets: np.ndarray  # (N, d2)
    generator_tag: str = "custom"

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ConfigurationError("inputs and targets must pair up one-to-one")
        if self.inputs.shape[0] < 1:
            raise ConfigurationError("a dataset needs at least one example")
        self._check_no_degenerate_pairs()

    def _check_no_degenerate_pairs(self):
        # identical inputs with different targets would make zero loss unreachable
        order = np.lexsort(self.inputs.T)
        xs = self.inputs[order]
        ys = self.targets[order]
        same = np.all(xs[1:] == xs[:-1], axis=1)
        if np.any(same & np.any(ys[1:] != ys[:-1], axis=1)):
            raise ConfigurationError("dataset has identical inputs with conflicting targets")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def make_sine_dataset(n: int, seed: int, noise_var: float = 0.1,
                      low: float = -3.0, high: float = 3.0) -> Dataset:
    """1-D regression targets sin(x) plus centered Gaussian noise of the given variance."""
    rng = RngStream(seed, stream_id=1)
    x = low + (high - low) * rng.uniform(n)
    y = np.sin(x) + np.sqrt(noise_var) * rng.normal(n)
    return Dataset(x[:, None], y[:, None], "sine")


def make_cubic_dataset(n: int, seed: int, dim: int = 20) -> Dataset:
    """Coordinate-wise cubic targets y_i = x_i^3 + eta_i with standard-normal x and eta."""
    rng = RngStream(seed, stream_id=1)
    x = rng.normal(n * dim).reshape(n, dim)
    eta = rng.normal(n * dim).reshape(n, dim)
    return Dataset(x, x ** 3 + eta, "cubic")


def make_gaussian_auto_dataset(n: int, seed: int, dim: int = 20) -> Dataset:
    """Standard-Gaussian inputs with themselves as reconstruction targets."""
    rng = RngStream(seed, stream_id=1)
    x = rng.normal(n * dim).reshape(n, dim)
    return Dataset(x, x.copy(), "gaussian-auto")


# ---------------------------------------------------------------------------
# loss and optimizer specifications


@dataclass
class LossSpec:
    kind: str = "mse"  # mse | prior_regularized | beta_elbo
    mc_samples_per_step: int = 1  # 0 trains the deterministic counterpart
    alpha: float | None = None
    mean_penalty: str = "quadratic"
    var_penalty: str = "gaussian_kl"
    beta: float | None = None

    def __post_init__(self):
        if self.kind not in ("mse", "prior_regularized", "beta_elbo"):
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if self.mc_samples_per_step < 0:
            raise ConfigurationError("mc_samples_per_step must be >= 0")
        if self.kind == "prior_regularized" and (self.alpha is None or self.alpha <= 0):
            raise ConfigurationError("prior_regularized loss needs alpha > 0")
        if self.kind == "beta_elbo" and (self.beta is None or self.beta < 0):
            raise ConfigurationError("beta_elbo loss needs beta >= 0")
        if self.mean_penalty not in ("quadratic",):
            raise ConfigurationError(f"unknown mean penalty {self.mean_penalty!r}")
        if self.var_penalty not in ("gaussian_kl",):
            raise ConfigurationError(f"unknown variance penalty {self.var_penalty!r}")


@dataclass
class TrainSpec:
    optimizer: str = "adam"  # sgd | adam
    lr: float = 0.01
    steps: int = 1000
    lr_schedule: tuple = ()  # ((step, lr), ...) with strictly increasing steps
    weight_decay: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    full_batch: bool = True

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ConfigurationError("learning rate must be >= 0")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be >= 0")
        if self.steps < 0:
            raise ConfigurationError("step count must be >= 0")
        boundaries = [s for s, _ in self.lr_schedule]
        if any(b2 <= b1 for b1, b2 in zip(boundaries, boundaries[1:])):
            raise ConfigurationError("lr schedule boundaries must be strictly increasing")
        if not self.full_batch:
            raise ConfigurationError("only full-batch training is supported")

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for boundary, value in self.lr_schedule:
            if step >= boundary:
                lr = value
        return lr


def step_decay_schedule(lr: float, steps: int, drop_every: int, factor: float = 10.0) -> tuple:
    """(step, lr) pairs dividing the rate by `factor` every `drop_every` steps."""
    if drop_every <= 0:
        return ()
    return tuple((b, lr / factor ** (i + 1)) for i, b in enumerate(range(drop_every, steps, drop_every)))


# ---------------------------------------------------------------------------
# parameters as named arrays


def parameter_items(net: StochasticNet) -> list[tuple[str, np.ndarray]]:
    """Named references to every trainable array, in a fixed order."""
    items: list[tuple[str, np.ndarray]] = []
    trunk = net.block if isinstance(net.block, BlockSpec) else net.block.trunk
    for i, layer in enumerate(trunk.layers):
        items.append((f"trunk.{i}.weights", layer.weights))
        items.append((f"trunk.{i}.bias", layer.bias))
    if isinstance(net.block, EncoderBlockParams):
        items.append(("encoder.mean_map", net.block.mean_map))
        items.append(("encoder.scale_map", net.block.scale_map))
        items.append(("encoder.scale_bias", net.block.scale_bias))
    items.append(("bottleneck.weights", net.bottleneck))
    items.append(("bottleneck.bias", net.bottleneck_bias))
    for i, layer in enumerate(net.tail.layers):
        items.append((f"tail.{i}.weights", layer.weights))
        items.append((f"tail.{i}.bias", layer.bias))
    return items


def get_parameter_vector(net: StochasticNet) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in parameter_items(net)])


def set_parameter_vector(net: StochasticNet, flat: np.ndarray) -> None:
    offset = 0
    for _, a in parameter_items(net):
        a.flat[:] = flat[offset:offset + a.size]
        offset += a.size
    if offset != flat.size:
        raise ConfigurationError(f"parameter vector has {flat.size} entries, net needs {offset}")


def _is_weight(name: str) -> bool:
    return name.endswith(("weights", "mean_map", "scale_map"))


def _zero_grads(net: StochasticNet) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(a) for name, a in parameter_items(net)}


# ---------------------------------------------------------------------------
# penalties (zero exactly at mean 0 / scale 1; quadratic pair equals the
# per-coordinate Gaussian KL divergence to the standard normal)

_SCALE_FLOOR = 1e-12


def _mean_penalty(mu: np.ndarray) -> np.ndarray:
    return 0.5 * mu * mu


def _mean_penalty_grad(mu: np.ndarray) -> np.ndarray:
    return mu


def _var_penalty(s: np.ndarray) -> np.ndarray:
    return 0.5 * (s * s - 1.0 - 2.0 * np.log(np.maximum(np.abs(s), _SCALE_FLOOR)))


def _var_penalty_grad(s: np.ndarray) -> np.ndarray:
    safe = np.where(np.abs(s) < _SCALE_FLOOR, np.copysign(_SCALE_FLOOR, s), s)
    return s - 1.0 / safe


# ---------------------------------------------------------------------------
# batched forward/backward engine


def _activation_derivative_from_output(name: str, h: np.ndarray) -> np.ndarray | None:
    # all allowed activations expose their derivative through their output;
    # None means the derivative is identically 1 (identity activation)
    if name == "identity":
        return None
    if name == "relu":
        return np.sign(h)  # h >= 0 after relu; sign(0) = 0 is the chosen subgradient
    return 1.0 - h * h  # tanh


def _mul_derivative(delta: np.ndarray, deriv: np.ndarray | None) -> np.ndarray:
    return delta if deriv is None else delta * deriv


def _draw_noise(net: StochasticNet, n: int, rng: RngStream) -> np.ndarray:
    d1 = net.block.d_out
    if net.noise.kind == "dropout":
        return rng.dropout_mask(n * d1, net.noise.p).reshape(n, d1)
    return rng.normal(n * d1).reshape(n, d1)


class _ForwardCache:
    __slots__ = ("trunk_inputs", "trunk_outputs", "noise", "h", "mu", "s", "z", "v",
                 "tail_inputs", "tail_outputs", "out")


def _forward(net: StochasticNet, x: np.ndarray, noise: np.ndarray | None) -> _ForwardCache:
    """Row-batched forward pass; noise=None evaluates the deterministic counterpart."""
    c = _ForwardCache()
    trunk = net.block if isinstance(net.block, BlockSpec) else net.block.trunk
    c.trunk_inputs, c.trunk_outputs = [], []
    h = x
    for layer in trunk.layers:
        c.trunk_inputs.append(h)
        h = apply_activation(layer.activation, h @ layer.weights.T + layer.bias)
        c.trunk_outputs.append(h)
    c.h = h
    c.noise = noise
    if net.noise.kind == "dropout":
        c.mu = c.s = None
        z = h if noise is None else h * noise
    else:
        enc = net.block
        c.mu = h @ enc.mean_map.T
        c.s = h @ enc.scale_map.T + enc.scale_bias
        z = c.mu if noise is None else c.mu + noise * c.s
    c.z = z
    u = z @ net.bottleneck.T + net.bottleneck_bias
    v = apply_activation(net.tail_activation, u)
    c.v = v
    c.tail_inputs, c.tail_outputs = [], []
    out = v
    for layer in net.tail.layers:
        c.tail_inputs.append(out)
        out = apply_activation(layer.activation, out @ layer.weights.T + layer.bias)
        c.tail_outputs.append(out)
    c.out = out
    return c


def _backward(net: StochasticNet, c: _ForwardCache, d_out: np.ndarray,
              grads: dict[str, np.ndarray], prior_weight: float = 0.0) -> None:
    """Accumulate gradients of (loss with output-gradient d_out) + prior_weight * penalties."""
    if prior_weight != 0.0 and net.noise.kind == "dropout":
        raise ConfigurationError("prior penalties apply only to encoder blocks")
    trunk = net.block if isinstance(net.block, BlockSpec) else net.block.trunk
    delta = d_out
    for i in reversed(range(len(net.tail.layers))):
        layer = net.tail.layers[i]
        da = delta * _activation_derivative_from_output(layer.activation, c.tail_outputs[i])
        grads[f"tail.{i}.weights"] += da.T @ c.tail_inputs[i]
        grads[f"tail.{i}.bias"] += da.sum(axis=0)
        delta = da @ layer.weights
    du = delta * _activation_derivative_from_output(net.tail_activation, c.v)
    grads["bottleneck.weights"] += du.T @ c.z
    grads["bottleneck.bias"] += du.sum(axis=0)
    dz = du @ net.bottleneck

    if net.noise.kind == "dropout":
        dh = dz if c.noise is None else dz * c.noise
    else:
        enc = net.block
        dmu = dz
        ds = np.zeros_like(dz) if c.noise is None else dz * c.noise
        if prior_weight != 0.0:
            dmu = dmu + prior_weight * _mean_penalty_grad(c.mu)
            ds = ds + prior_weight * _var_penalty_grad(c.s)
        grads["encoder.mean_map"] += dmu.T @ c.h
        grads["encoder.scale_map"] += ds.T @ c.h
        grads["encoder.scale_bias"] += ds.sum(axis=0)
        dh = dmu @ enc.mean_map + ds @ enc.scale_map

    for i in reversed(range(len(trunk.layers))):
        layer = trunk.layers[i]
        da = dh * _activation_derivative_from_output(layer.activation, c.trunk_outputs[i])
        grads[f"trunk.{i}.weights"] += da.T @ c.trunk_inputs[i]
        grads[f"trunk.{i}.bias"] += da.sum(axis=0)
        dh = da @ layer.weights


def _prior_weight(net: StochasticNet, loss: LossSpec) -> float:
    if loss.kind == "prior_regularized":
        return float(net.block.d_out) ** (-loss.alpha)
    if loss.kind == "beta_elbo":
        return loss.beta
    return 0.0


def _penalty_value(c: _ForwardCache) -> float:
    return float(_mean_penalty(c.mu).sum() + _var_penalty(c.s).sum())


def _require_encoder(net: StochasticNet, what: str) -> None:
    if net.noise.kind != "standard_gaussian":
        raise ConfigurationError(f"{what} requires an encoder (Gaussian) stochastic block")


# ---------------------------------------------------------------------------
# public losses


def mse_stochastic_loss(net: StochasticNet, data: Dataset, n_mc: int, rng: RngStream) -> float:
    """Monte-Carlo estimate of the summed expected squared error.

    Each of the n_mc rounds draws one fresh noise realization per example;
    the estimate is unbiased for sum_i E[(f(x_i, eps) - y_i)^2].
    """
    if n_mc < 1:
        raise ConfigurationError("n_mc must be >= 1")
    total = 0.0
    for _ in range(n_mc):
        c = _forward(net, data.inputs, _draw_noise(net, data.n, rng))
        r = c.out - data.targets
        total += float((r * r).sum())
    return total / n_mc


def prior_loss(net: StochasticNet, data: Dataset, spec: LossSpec) -> float:
    """Width-normalized penalty pushing the latent mean to 0 and scale to 1.

    Deterministic (no sampling): evaluates the penalties on the encoder's
    mean and scale outputs over the training inputs, scaled by d1^(-alpha).
    """
    _require_encoder(net, "prior_loss")
    if spec.kind != "prior_regularized":
        raise ConfigurationError("prior_loss expects a prior_regularized LossSpec")
    c = _forward(net, data.inputs, None)
    return _prior_weight(net, spec) * _penalty_value(c)


def prior_penalty_terms(net: StochasticNet, data: Dataset, alpha: float) -> tuple[float, float]:
    """(mean-penalty, scale-penalty) terms of the width-normalized prior, separately."""
    _require_encoder(net, "prior_penalty_terms")
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    c = _forward(net, data.inputs, None)
    w = float(net.block.d_out) ** (-alpha)
    return w * float(_mean_penalty(c.mu).sum()), w * float(_var_penalty(c.s).sum())


def elbo_objective(net: StochasticNet, data: Dataset, beta: float, n_mc: int, rng: RngStream) -> float:
    """Negative ELBO instantiation: MC reconstruction MSE plus beta times the exact Gaussian KL."""
    _require_encoder(net, "elbo_objective")
    if beta < 0:
        raise ConfigurationError("beta must be >= 0")
    recon = mse_stochastic_loss(net, data, n_mc, rng)
    c = _forward(net, data.inputs, None)
    return recon + beta * _penalty_value(c)


def sampled_objective(net: StochasticNet, data: Dataset, loss: LossSpec, rng: RngStream) -> float:
    """The exact objective value for the noise drawn from the given stream state.

    This is the function backprop_grad differentiates; replaying the same
    (seed, stream, counter) reproduces it exactly.
    """
    rounds = loss.mc_samples_per_step
    if rounds == 0:
        c = _forward(net, data.inputs, None)
        r = c.out - data.targets
        data_term = float((r * r).sum())
    else:
        data_term = 0.0
        for _ in range(rounds):
            c = _forward(net, data.inputs, _draw_noise(net, data.n, rng))
            r = c.out - data.targets
            data_term += float((r * r).sum())
        data_term /= rounds
    w = _prior_weight(net, loss)
    if w != 0.0:
        _require_encoder(net, f"{loss.kind} loss")
        cd = _forward(net, data.inputs, None)
        return data_term + w * _penalty_value(cd)
    return data_term


def backprop_grad(net: StochasticNet, data: Dataset, loss: LossSpec, rng: RngStream) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradient of the sampled objective for the drawn noise."""
    grads = _zero_grads(net)
    rounds = loss.mc_samples_per_step
    w = _prior_weight(net, loss)
    if w != 0.0:
        _require_encoder(net, f"{loss.kind} loss")
    if rounds == 0:
        c = _forward(net, data.inputs, None)
        _backward(net, c, 2.0 * (c.out - data.targets), grads, prior_weight=w)
    else:
        scale = 1.0 / rounds
        for k in range(rounds):
            c = _forward(net, data.inputs, _draw_noise(net, data.n, rng))
            # fold the (deterministic) prior into the first round only
            _backward(net, c, (2.0 * scale) * (c.out - data.targets), grads,
                      prior_weight=w if k == 0 else 0.0)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    return grads


# ---------------------------------------------------------------------------
# optimizers and the training loop


def _apply_weight_decay(net: StochasticNet, grads: dict[str, np.ndarray], lam: float) -> float:
    """Coupled L2: adds lam*W to each weight gradient; returns the (lam/2)*||W||^2 term."""
    if lam == 0.0:
        return 0.0
    value = 0.0
    for name, a in parameter_items(net):
        if _is_weight(name):
            grads[name] += lam * a
            value += 0.5 * lam * float((a * a).sum())
    return value


def train(net: StochasticNet, data: Dataset, loss: LossSpec, spec: TrainSpec):
    """Full-batch training; returns (trained net, trace of (step, loss, lr)).

    The recorded loss is the sampled objective at the pre-update parameters,
    including penalty and weight-decay terms.  Deterministic given spec.seed.
    """
    net = net.copy()
    rng = RngStream(spec.seed, stream_id=7)
    params = parameter_items(net)
    adam_m = {name: np.zeros_like(a) for name, a in params} if spec.optimizer == "adam" else None
    adam_v = {name: np.zeros_like(a) for name, a in params} if spec.optimizer == "adam" else None
    trace: list[tuple[int, float, float]] = []
    w = _prior_weight(net, loss)
    if w != 0.0:
        _require_encoder(net, f"{loss.kind} loss")

    for step in range(spec.steps):
        lr = spec.lr_at(step)
        grads = _zero_grads(net)
        rounds = loss.mc_samples_per_step
        if rounds == 0:
            c = _forward(net, data.inputs, None)
            r = c.out - data.targets
            value = float((r * r).sum())
            _backward(net, c, 2.0 * r, grads, prior_weight=w)
            if w != 0.0:
                value += w * _penalty_value(c)
        else:
            value = 0.0
            scale = 1.0 / rounds
            for k in range(rounds):
                c = _forward(net, data.inputs, _draw_noise(net, data.n, rng))
                r = c.out - data.targets
                value += scale * float((r * r).sum())
                _backward(net, c, (2.0 * scale) * r, grads, prior_weight=w if k == 0 else 0.0)
            if w != 0.0:
                cd = _forward(net, data.inputs, None)
                value += w * _penalty_value(cd)
        value += _apply_weight_decay(net, grads, spec.weight_decay)

        if not np.isfinite(value) or value > DIVERGENCE_THRESHOLD:
            trace.append((step, value, lr))
            raise TrainingDivergenceError(
                f"training diverged at step {step} (loss {value:.3e})", trace
            )
        trace.append((step, value, lr))

        if spec.optimizer == "sgd":
            for name, a in params:
                a -= lr * grads[name]
        else:
            t = step + 1
            bc1 = 1.0 - spec.beta1 ** t
            bc2 = 1.0 - spec.beta2 ** t
            for name, a in params:
                g = grads[name]
                m = adam_m[name]
                v = adam_v[name]
                m *= spec.beta1
                m += (1.0 - spec.beta1) * g
                v *= spec.beta2
                v += (1.0 - spec.beta2) * (g * g)
                a -= lr * (m / bc1) / (np.sqrt(v / bc2) + spec.eps)
    return net, trace


def deterministic_mse(net: StochasticNet, data: Dataset) -> float:
    """Summed squared error of the deterministic counterpart (no noise, no sampling)."""
    c = _forward(net, data.inputs, None)
    r = c.out - data.targets
    return float((r * r).sum())
