"""Monte-Carlo predictive-variance estimation and power-law slope fitting.

Per-point variances are unbiased (n-1 denominator) sample variances over
independent forward passes, averaged over output coordinates (trace of the
diagonal covariance divided by the output dimension).  For speed, one noise
vector per pass is shared across all evaluation points; each point still sees
independent noise across passes, so its variance estimate is unaffected.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .blocks import StochasticNet, apply_activation, _block_forward_batch
from .errors import ConfigurationError, SlopeFitError
from .numkit import RngStream


@dataclass
class VarianceReport:
    width: int
    split: str
    per_point_variance: np.ndarray
    n_samples: int
    mean_variance: float


@dataclass
class SlopeFit:
    exponent: float
    intercept: float
    window: tuple[int, ...]
    r_squared: float


class _Welford:
    """Streaming mean and unbiased variance for arrays of samples."""

    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def variance(self) -> np.ndarray:
        if self.n < 2:
            raise ConfigurationError("variance needs at least 2 samples")
        return self.m2 / (self.n - 1)


def _stochastic_precompute(net: StochasticNet, x: np.ndarray):
    """Per-point pieces that let one shared noise vector be folded into the bottleneck."""
    if net.noise.kind == "dropout":
        h = _block_forward_batch(net.block, x)
        return ("dropout", h, None)
    enc = net.block
    h = _block_forward_batch(enc.trunk, x)
    mu_b = (h @ enc.mean_map.T) @ net.bottleneck.T
    scale = h @ enc.scale_map.T + enc.scale_bias
    return ("gaussian", mu_b, scale)


def _preactivation_for_noise(net: StochasticNet, pre, noise: np.ndarray) -> np.ndarray:
    kind, a, b = pre
    if kind == "dropout":
        return a @ (noise[:, None] * net.bottleneck.T) + net.bottleneck_bias
    return a + b @ (noise[:, None] * net.bottleneck.T) + net.bottleneck_bias


def _output_from_preactivation(net: StochasticNet, u: np.ndarray) -> np.ndarray:
    return _block_forward_batch(net.tail, apply_activation(net.tail_activation, u))


def sample_outputs(net: StochasticNet, x: np.ndarray, n_samples: int, rng: RngStream):
    """Yield n_samples batched network outputs, one shared noise draw per sample."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pre = _stochastic_precompute(net, x)
    d1 = net.block.d_out
    for _ in range(n_samples):
        if net.noise.kind == "dropout":
            noise = rng.dropout_mask(d1, net.noise.p)
        else:
            noise = rng.normal(d1)
        yield _output_from_preactivation(net, _preactivation_for_noise(net, pre, noise))


def estimate_variance(net: StochasticNet, points, n_samples: int, rng: RngStream,
                      split: str = "train") -> VarianceReport:
    """Per-point predictive variance over the latent noise, coordinate-averaged."""
    if n_samples < 2:
        raise ConfigurationError("variance estimation needs n_samples >= 2")
    x = points.inputs if hasattr(points, "inputs") else np.atleast_2d(points)
    acc = _Welford((x.shape[0], net.tail.d_out))
    for out in sample_outputs(net, x, n_samples, rng):
        acc.add(out)
    per_point = acc.variance().mean(axis=1)
    return VarianceReport(
        width=net.block.d_out,
        split=split,
        per_point_variance=per_point,
        n_samples=n_samples,
        mean_variance=float(per_point.mean()),
    )


def bias_variance_report(net: StochasticNet, data, n_samples: int, rng: RngStream):
    """Per-point (bias^2, variance, mse), each a coordinate mean.

    The mse estimate uses the first n_samples passes and the moment estimates
    the next n_samples, so the decomposition identity holds only up to real
    Monte-Carlo error rather than algebraically.
    """
    if n_samples < 2:
        raise ConfigurationError("bias/variance estimation needs n_samples >= 2")
    x, y = data.inputs, data.targets
    sq = _Welford((x.shape[0], net.tail.d_out))
    for out in sample_outputs(net, x, n_samples, rng):
        r = out - y
        sq.add(r * r)
    mse = sq.mean.mean(axis=1)
    acc = _Welford((x.shape[0], net.tail.d_out))
    for out in sample_outputs(net, x, n_samples, rng):
        acc.add(out)
    bias2 = ((acc.mean - y) ** 2).mean(axis=1)
    variance = acc.variance().mean(axis=1)
    return bias2, variance, mse


def fit_scaling_exponent(points, tail_fraction: float = 0.5) -> SlopeFit:
    """Ordinary least squares on (ln width, ln variance) over the largest-width tail.

    The window holds ceil(tail_fraction * len(points)) largest widths (at
    least 3); nonpositive variances inside the window are dropped with a
    warning, and the fit is refused if fewer than 3 points survive.
    """
    if not 0.0 < tail_fraction <= 1.0:
        raise ConfigurationError("tail_fraction must lie in (0, 1]")
    pts = sorted((int(w), float(v)) for w, v in points)
    widths = [w for w, _ in pts]
    if len(set(widths)) != len(widths):
        raise ConfigurationError("widths must be distinct")
    n_tail = max(3, int(np.ceil(tail_fraction * len(pts))))
    window = pts[-n_tail:]
    kept = [(w, v) for w, v in window if v > 0.0]
    if len(kept) < len(window):
        dropped = [w for w, v in window if v <= 0.0]
        warnings.warn(f"dropping nonpositive variances at widths {dropped}")
    if len(kept) < 3:
        raise SlopeFitError(f"need at least 3 positive tail points, have {len(kept)}")
    lw = np.log([w for w, _ in kept])
    lv = np.log([v for _, v in kept])
    slope, intercept = np.polyfit(lw, lv, 1)
    fitted = slope * lw + intercept
    ss_res = float(((lv - fitted) ** 2).sum())
    ss_tot = float(((lv - lv.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return SlopeFit(float(slope), float(intercept), tuple(w for w, _ in kept), float(r2))
