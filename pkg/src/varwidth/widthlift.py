"""Width-lifting constructions and their numerical certification.

Given a trained width-d* network whose deterministic counterpart fits its
training data, these builders produce the width-k*d* stochastic network whose
noise averages away:

  * plain mode duplicates the stochastic block k times (row copies) and
    replaces the bottleneck by its composition with the averaging matrix, so
    each averaged coordinate has variance sigma_ii / k;
  * prior mode additionally zeroes the encoder scale map, sets its bias to 1
    (killing the scale penalty exactly), shrinks the duplicated mean rows by
    k**(-gamma/2), and compensates inside the bottleneck, trading mean-penalty
    decay against a k**-(1-gamma) variance law;
  * extended mode grows the bottleneck output dimension following a width
    function, padding with zeros that the (column-padded) tail ignores.

Certification measures training loss, per-point output and pre-activation
variances, and penalty terms, against the exact diagonal-covariance
propagation law.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .analysis import _Welford, _preactivation_for_noise, _output_from_preactivation, _stochastic_precompute
from .blocks import (
    BlockSpec,
    DenseLayerParams,
    EncoderBlockParams,
    NoiseSpec,
    StochasticNet,
    embed_block,
    expect_block,
    noise_sigma_diag,
)
from .errors import ConfigurationError
from .numkit import RngStream
from .training import Dataset, LossSpec, deterministic_mse, mse_stochastic_loss, prior_penalty_terms

TOL_FIT_PER_POINT = 1e-6  # base counts as overparametrized when loss <= 1e-6 * N


def default_gamma(alpha: float) -> float:
    """The rate-balancing choice 1 - alpha/2 (always inside the admissible (1-alpha, 1))."""
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    return 1.0 - alpha / 2.0


@dataclass
class LiftSpec:
    k: int
    mode: str = "plain"  # plain | prior | extended
    base_width: int | None = None
    alpha: float | None = None
    gamma: float | None = None
    inner_width: Callable[[int], int] | None = None  # extended mode: stochastic width -> inner width

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("copy count k must be >= 1")
        if self.mode not in ("plain", "prior", "extended"):
            raise ConfigurationError(f"unknown lift mode {self.mode!r}")
        if self.mode == "prior":
            if self.alpha is None or self.alpha <= 0:
                raise ConfigurationError("prior mode needs alpha > 0")
            if self.gamma is None:
                self.gamma = default_gamma(self.alpha)
            if not (1.0 - self.alpha < self.gamma < 1.0):
                raise ConfigurationError(
                    f"gamma must lie in (1 - alpha, 1) = ({1.0 - self.alpha}, 1), got {self.gamma}"
                )
        if self.mode == "extended" and self.inner_width is None:
            raise ConfigurationError("extended mode needs an inner width function")


@dataclass
class LiftCertificate:
    k: int
    mode: str
    loss: float
    prior_term: float | None
    prior_mean_term: float | None
    prior_var_term: float | None
    per_point_output_variance: np.ndarray
    per_point_preactivation_variance: np.ndarray
    predicted_preactivation_variance: np.ndarray
    expectation_residual: float

    def __post_init__(self):
        for name in ("per_point_output_variance", "per_point_preactivation_variance",
                     "predicted_preactivation_variance"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ConfigurationError(f"{name} must be nonnegative and finite")
            setattr(self, name, arr)
        if not np.isfinite(self.loss) or self.loss < 0:
            raise ConfigurationError("certificate loss must be nonnegative and finite")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "mode": self.mode,
            "loss": self.loss,
            "prior_term": self.prior_term,
            "prior_mean_term": self.prior_mean_term,
            "prior_var_term": self.prior_var_term,
            "per_point_variance": self.per_point_output_variance.tolist(),
            "per_point_preactivation_variance": self.per_point_preactivation_variance.tolist(),
            "predicted_bound": self.predicted_preactivation_variance.tolist(),
            "expectation_residual": self.expectation_residual,
            "slope_fit": None,
        }


def averaging_matrix(k: int, d_star: int) -> np.ndarray:
    """The d* x (k d*) matrix averaging k stacked copies: entry (j mod d*, j) is 1/k."""
    if k < 1 or d_star < 1:
        raise ConfigurationError("k and d_star must be >= 1")
    g = np.zeros((d_star, k * d_star))
    cols = np.arange(k * d_star)
    g[cols % d_star, cols] = 1.0 / k
    return g


def _check_base_fit(base: StochasticNet, data: Dataset | None) -> None:
    if data is None:
        return
    loss = deterministic_mse(base, data)
    budget = TOL_FIT_PER_POINT * data.n
    if loss > budget:
        raise ConfigurationError(
            f"base network is not near-interpolating: deterministic loss {loss:.3e} "
            f"exceeds {budget:.3e}; enlarge the base width d*"
        )


def _copies_map(k: int, d_star: int) -> np.ndarray:
    return np.arange(k * d_star) % d_star


def lift_width(base: StochasticNet, spec: LiftSpec, data: Dataset | None = None) -> StochasticNet:
    """Plain construction: k row-copies of the stochastic block, averaged by the bottleneck."""
    if spec.mode != "plain":
        raise ConfigurationError(f"lift_width expects mode 'plain', got {spec.mode!r}")
    _check_base_fit(base, data)
    d_star = base.block.d_out
    idx = _copies_map(spec.k, d_star)
    if base.noise.kind == "dropout":
        block: BlockSpec | EncoderBlockParams = embed_block(base.block, spec.k * d_star, idx)
    else:
        enc = base.block
        block = EncoderBlockParams(
            enc.trunk.copy(),
            enc.mean_map[idx, :].copy(),
            enc.scale_map[idx, :].copy(),
            enc.scale_bias[idx].copy(),
        )
    bottleneck = base.bottleneck @ averaging_matrix(spec.k, d_star)
    return StochasticNet(
        NoiseSpec(base.noise.kind, base.noise.p),
        block,
        bottleneck,
        base.bottleneck_bias.copy(),
        base.tail_activation,
        base.tail.copy(),
    )


def lift_width_prior(base: StochasticNet, spec: LiftSpec, data: Dataset | None = None) -> StochasticNet:
    """Prior-mode construction for encoder blocks.

    Scale map goes to zero with unit bias (scale penalty exactly zero); the
    duplicated mean rows shrink by k**(-gamma/2) and the bottleneck compensates,
    so the averaged latent variance follows k**-(1-gamma) while the mean
    penalty decays as k**(1-gamma-alpha).
    """
    if spec.mode != "prior":
        raise ConfigurationError(f"lift_width_prior expects mode 'prior', got {spec.mode!r}")
    if base.noise.kind != "standard_gaussian":
        raise ConfigurationError("prior-mode lifting needs an encoder (Gaussian) base network")
    _check_base_fit(base, data)
    enc = base.block
    d_star = enc.d_out
    idx = _copies_map(spec.k, d_star)
    shrink = float(spec.k) ** (-spec.gamma / 2.0)
    block = EncoderBlockParams(
        enc.trunk.copy(),
        shrink * enc.mean_map[idx, :],
        np.zeros((spec.k * d_star, enc.trunk.d_out)),
        np.ones(spec.k * d_star),
    )
    bottleneck = (base.bottleneck / shrink) @ averaging_matrix(spec.k, d_star)
    return StochasticNet(
        NoiseSpec("standard_gaussian", None),
        block,
        bottleneck,
        base.bottleneck_bias.copy(),
        base.tail_activation,
        base.tail.copy(),
    )


def lift_width_extended(base: StochasticNet, spec: LiftSpec, data: Dataset | None = None) -> StochasticNet:
    """Bottleneck-free construction: the inner dimension grows with the lifted width.

    The compensating map keeps the base bottleneck rows and appends zero rows;
    the tail's first layer gains matching zero columns, so the extra inner
    coordinates are ignored exactly.
    """
    if spec.mode != "extended":
        raise ConfigurationError(f"lift_width_extended expects mode 'extended', got {spec.mode!r}")
    if not base.tail.layers:
        raise ConfigurationError("extended lifting needs a nonempty tail block after the bottleneck")
    _check_base_fit(base, data)
    d_star = base.block.d_out
    d_base = base.bottleneck.shape[0]
    grow = spec.inner_width
    if grow(d_star) != d_base:
        raise ConfigurationError(
            f"inner width function maps base width {d_star} to {grow(d_star)}, "
            f"but the base inner dimension is {d_base}"
        )
    new_inner = int(grow(spec.k * d_star))
    if new_inner < d_base:
        raise ConfigurationError("inner width function must be monotone (it shrank)")
    idx = _copies_map(spec.k, d_star)
    if base.noise.kind == "dropout":
        block: BlockSpec | EncoderBlockParams = embed_block(base.block, spec.k * d_star, idx)
    else:
        enc = base.block
        block = EncoderBlockParams(
            enc.trunk.copy(),
            enc.mean_map[idx, :].copy(),
            enc.scale_map[idx, :].copy(),
            enc.scale_bias[idx].copy(),
        )
    padded = np.zeros((new_inner, d_star))
    padded[:d_base, :] = base.bottleneck
    bottleneck = padded @ averaging_matrix(spec.k, d_star)
    bias = np.zeros(new_inner)
    bias[:d_base] = base.bottleneck_bias
    first = base.tail.layers[0]
    grown_first = DenseLayerParams(
        np.hstack([first.weights, np.zeros((first.out_dim, new_inner - d_base))]),
        first.bias.copy(),
        first.activation,
    )
    tail = BlockSpec([grown_first] + [l.copy() for l in base.tail.layers[1:]])
    return StochasticNet(
        NoiseSpec(base.noise.kind, base.noise.p),
        block,
        bottleneck,
        bias,
        base.tail_activation,
        tail,
    )


def build_lift(base: StochasticNet, spec: LiftSpec, data: Dataset | None = None) -> StochasticNet:
    builder = {"plain": lift_width, "prior": lift_width_prior, "extended": lift_width_extended}
    return builder[spec.mode](base, spec, data)


def predicted_preactivation_variance(net: StochasticNet, x: np.ndarray) -> np.ndarray:
    """Exact per-point pre-activation variance from the diagonal noise covariance.

    The bottleneck is linear in the stochastic block output with independent
    coordinates, so Var[U_i] = sum_j B_ij^2 sigma_jj(x); returned as the
    coordinate mean per point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b2 = net.bottleneck ** 2
    out = np.empty(x.shape[0])
    for i, xi in enumerate(x):
        out[i] = float((b2 @ noise_sigma_diag(net, xi)).mean())
    return out


def _sample_variances(net: StochasticNet, x: np.ndarray, n_samples: int, rng: RngStream):
    """Per-point coordinate-mean variances of the pre-activation and the output."""
    pre = _stochastic_precompute(net, x)
    d1 = net.block.d_out
    acc_u = _Welford((x.shape[0], net.bottleneck.shape[0]))
    acc_out = _Welford((x.shape[0], net.tail.d_out))
    for _ in range(n_samples):
        if net.noise.kind == "dropout":
            noise = rng.dropout_mask(d1, net.noise.p)
        else:
            noise = rng.normal(d1)
        u = _preactivation_for_noise(net, pre, noise)
        acc_u.add(u)
        acc_out.add(_output_from_preactivation(net, u))
    return acc_u.variance().mean(axis=1), acc_out.variance().mean(axis=1)


def certify_lift(lifted: StochasticNet, base: StochasticNet, data: Dataset,
                 n_mc: int, rng: RngStream, spec: LiftSpec) -> LiftCertificate:
    """Measure loss, variances, and penalty terms of a lifted network on its data."""
    if n_mc < 100:
        raise ConfigurationError("certification needs n_mc >= 100")
    residual = 0.0
    for xi in data.inputs:
        diff = expect_block(lifted, xi) - expect_block(base, xi)
        residual = max(residual, float(np.linalg.norm(diff)))
    loss = mse_stochastic_loss(lifted, data, max(1, n_mc // 10), rng)
    pre_var, out_var = _sample_variances(lifted, data.inputs, n_mc, rng)
    predicted = predicted_preactivation_variance(lifted, data.inputs)
    mean_term = var_term = total = None
    if spec.mode == "prior":
        mean_term, var_term = prior_penalty_terms(lifted, data, spec.alpha)
        total = mean_term + var_term
    return LiftCertificate(
        k=spec.k,
        mode=spec.mode,
        loss=loss,
        prior_term=total,
        prior_mean_term=mean_term,
        prior_var_term=var_term,
        per_point_output_variance=out_var,
        per_point_preactivation_variance=pre_var,
        predicted_preactivation_variance=predicted,
        expectation_residual=residual,
    )
