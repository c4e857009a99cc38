"""Experiment drivers behind the varwidth CLI.

Every run resolves a full ExperimentConfig (file values overridden by CLI
flags overridden onto per-experiment defaults), writes its delimited outputs
and rendered figures into the output directory, and finishes by atomically
writing manifest.json with the config echo, wall times, and sha256 digests of
every output file.  Rerunning with the config embedded in a manifest
reproduces all data outputs byte-for-byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import figures
from .analysis import estimate_variance, fit_scaling_exponent, sample_outputs
from .blocks import (
    StochasticNet,
    expect_block,
    gaussian_vae_net,
    mlp_dropout_net,
    mlp_two_hidden_dropout_net,
    net_to_json,
)
from .errors import ConfigurationError, SlopeFitError, TrainingDivergenceError
from .numkit import RngStream, finite_diff_grad
from .training import (
    Dataset,
    LossSpec,
    TrainSpec,
    backprop_grad,
    get_parameter_vector,
    make_cubic_dataset,
    make_gaussian_auto_dataset,
    make_sine_dataset,
    parameter_items,
    sampled_objective,
    set_parameter_vector,
    step_decay_schedule,
    train,
)
from .widthlift import LiftSpec, build_lift, certify_lift

EXPERIMENT_NAMES = ("illustrate", "dropout-scan", "vae-scan", "lift-verify", "fit-slope", "gradcheck")

# rng roles; per-width streams are width * 16 + role under the master seed
_ROLE_INIT = 0
_ROLE_VAR_TRAIN = 2
_ROLE_VAR_TEST = 3
_ROLE_PREDICT = 4


@dataclass
class ExperimentConfig:
    experiment: str
    out: str = "runs/out"
    seed: int = 0
    widths: tuple[int, ...] = ()
    # training
    optimizer: str = "adam"
    lr: float = 0.01
    steps: int = 4500
    lr_drop_every: int = 1500
    lr_drop_factor: float = 10.0
    lr_schedule: tuple = ()
    weight_decay: float = 0.0
    mc_samples_per_step: int = 1
    # network / noise
    dropout_p: float = 0.1
    activation: str = "relu"
    # data
    n_train: int = 1000
    n_test: int = 200
    data_dim: int = 20
    data_noise_var: float = 0.1
    # variance estimation and fitting
    variance_samples: int = 3000
    tail_fraction: float = 0.5
    # vae
    beta_scale: float = 0.1
    enc_hidden: int = 32
    dec_hidden: int = 32
    # illustrate
    grid_points: int = 61
    prediction_samples: int = 1000
    # lift-verify
    lift_ks: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
    lift_modes: tuple[str, ...] = ("plain", "prior", "extended")
    base_width: int = 16
    base_steps: int = 12000
    alpha: float = 1.0
    gamma: float | None = None
    lift_n_mc: int = 3000
    extended_inner_factor: int = 2
    # gradcheck
    fd_step: float = 1e-5
    # fit-slope
    input: str | None = None
    split: str = "train"

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_NAMES:
            raise ConfigurationError(
                f"unknown experiment {self.experiment!r}; choose one of {EXPERIMENT_NAMES}"
            )
        self.widths = tuple(int(w) for w in self.widths)
        if any(b >= a for a, b in zip(self.widths[1:], self.widths)):
            raise ConfigurationError("widths must be strictly increasing")
        self.lift_ks = tuple(int(k) for k in self.lift_ks)
        if any(b >= a for a, b in zip(self.lift_ks[1:], self.lift_ks)):
            raise ConfigurationError("lift k values must be strictly increasing")
        self.lift_modes = tuple(self.lift_modes)
        for m in self.lift_modes:
            if m not in ("plain", "prior", "extended"):
                raise ConfigurationError(f"unknown lift mode {m!r}")
        self.lr_schedule = tuple((int(s), float(v)) for s, v in self.lr_schedule)

    def train_spec(self, width_seed: int) -> TrainSpec:
        schedule = self.lr_schedule or step_decay_schedule(
            self.lr, self.steps, self.lr_drop_every, self.lr_drop_factor
        )
        return TrainSpec(
            optimizer=self.optimizer,
            lr=self.lr,
            steps=self.steps,
            lr_schedule=schedule,
            weight_decay=self.weight_decay,
            seed=width_seed,
        )


# dropout_p is the keep-probability of the mean-one mask; a conventional
# "10% dropout" layer is p = 0.9 here.  The p = 0.1 layer (mask variance 9)
# swamps training at these step budgets and inverts the width-variance trend.
_DEFAULTS: dict[str, dict] = {
    "illustrate": dict(
        widths=(10, 50, 500), n_train=100, data_noise_var=0.1, dropout_p=0.9,
        activation="tanh", variance_samples=1000,
    ),
    "dropout-scan": dict(
        widths=(16, 32, 64, 128, 256, 512, 1024, 2048, 4096),
        n_train=1000, n_test=200, data_dim=20, dropout_p=0.9, activation="relu",
        variance_samples=3000,
    ),
    # the autoencoder scan fits over its whole width window (tail_fraction 1);
    # lr 3e-3 keeps the reparameterized scale gradients stable
    "vae-scan": dict(
        widths=(16, 32, 64, 128, 256, 512, 1024),
        n_train=100, n_test=100, data_dim=20, activation="relu",
        variance_samples=100, lr=3e-3, tail_fraction=1.0,
    ),
    "lift-verify": dict(widths=(), lr=0.01, dropout_p=0.1, n_train=8),
    "gradcheck": dict(widths=()),
    "fit-slope": dict(widths=()),
}

_MODE_INDEX = {"plain": 0, "prior": 1, "extended": 2}


def resolve_config(experiment: str, overrides: dict) -> ExperimentConfig:
    if experiment not in EXPERIMENT_NAMES:
        raise ConfigurationError(
            f"unknown experiment {experiment!r}; choose one of {EXPERIMENT_NAMES}"
        )
    values = dict(_DEFAULTS[experiment])
    values.setdefault("out", f"runs/{experiment}")
    known = {f.name for f in fields(ExperimentConfig)}
    for key, value in overrides.items():
        name = "out" if key == "out_dir" else key
        if name == "experiment":
            if value != experiment:
                raise ConfigurationError(
                    f"config file is for experiment {value!r}, requested {experiment!r}"
                )
            continue
        if name not in known:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        values[name] = value
    return ExperimentConfig(experiment=experiment, **values)


# ---------------------------------------------------------------------------
# output plumbing


def _float_repr(v) -> str:
    return repr(float(v))


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


class RunContext:
    """Collects outputs and timings; writes the manifest last, atomically."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.stages: dict[str, float] = {}
        self.outputs: list[str] = []
        self.notes: dict = {}
        self._t0 = time.monotonic()

    def time_stage(self, name: str, start: float) -> None:
        self.stages[name] = self.stages.get(name, 0.0) + (time.monotonic() - start)

    def path(self, name: str) -> Path:
        return self.out / name

    def register(self, name: str) -> None:
        self.outputs.append(name)

    def write_csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_float_repr(v) if isinstance(v, float) else v for v in row])
        _atomic_write_bytes(self.path(name), buf.getvalue().encode())
        self.register(name)

    def write_json(self, name: str, obj) -> None:
        payload = json.dumps(obj, indent=2, sort_keys=True).encode() + b"\n"
        _atomic_write_bytes(self.path(name), payload)
        self.register(name)

    def write_text(self, name: str, text: str) -> None:
        _atomic_write_bytes(self.path(name), text.encode())
        self.register(name)

    def finish(self, **extra) -> dict:
        manifest = {
            "experiment": self.cfg.experiment,
            "config": _config_dict(self.cfg),
            "seed": self.cfg.seed,
            "wall_time_s": {k: round(v, 3) for k, v in self.stages.items()},
            "total_wall_time_s": round(time.monotonic() - self._t0, 3),
            "outputs": {name: _sha256_file(self.path(name)) for name in sorted(set(self.outputs))},
        }
        manifest.update(self.notes)
        manifest.update(extra)
        payload = json.dumps(manifest, indent=2, sort_keys=True).encode() + b"\n"
        _atomic_write_bytes(self.path("manifest.json"), payload)
        return manifest


def _config_dict(cfg: ExperimentConfig) -> dict:
    doc = asdict(cfg)
    doc["widths"] = list(cfg.widths)
    doc["lift_ks"] = list(cfg.lift_ks)
    doc["lift_modes"] = list(cfg.lift_modes)
    doc["lr_schedule"] = [list(p) for p in cfg.lr_schedule]
    return doc


def _fit_to_dict(fit, extra=None) -> dict:
    doc = {
        "exponent": fit.exponent,
        "intercept": fit.intercept,
        "r_squared": fit.r_squared,
        "window": list(fit.window),
        "variance_scalarization": "coordinate_mean",
        "noise_sharing": "one noise draw per sample shared across points",
    }
    if extra:
        doc.update(extra)
    return doc


def _write_trace(ctx: RunContext, name: str, trace) -> None:
    ctx.write_csv(name, ["step", "loss", "lr"],
                  [(step, float(loss), float(lr)) for step, loss, lr in trace])


# ---------------------------------------------------------------------------
# experiments


def run_illustrate(cfg: ExperimentConfig) -> list[int]:
    """Train 1 -> width -> 1 dropout nets on noisy sine data; emit sampled prediction curves."""
    ctx = RunContext(cfg)
    data = make_sine_dataset(cfg.n_train, cfg.seed, cfg.data_noise_var)
    grid = np.linspace(-3.0, 3.0, cfg.grid_points)
    diverged: list[int] = []
    spread_rows = []
    for width in cfg.widths:
        t0 = time.monotonic()
        net = mlp_dropout_net(1, width, 1, cfg.dropout_p,
                              RngStream(cfg.seed, width * 16 + _ROLE_INIT), cfg.activation)
        loss = LossSpec(kind="mse", mc_samples_per_step=cfg.mc_samples_per_step)
        try:
            net, trace = train(net, data, loss, cfg.train_spec(cfg.seed + width))
        except TrainingDivergenceError as err:
            diverged.append(width)
            _write_trace(ctx, f"trace_w{width}.csv", err.trace)
            ctx.time_stage(f"train_w{width}", t0)
            continue
        _write_trace(ctx, f"trace_w{width}.csv", trace)
        ctx.time_stage(f"train_w{width}", t0)

        t0 = time.monotonic()
        rng = RngStream(cfg.seed, width * 16 + _ROLE_PREDICT)
        samples = np.stack([
            out[:, 0] for out in sample_outputs(net, grid[:, None], cfg.prediction_samples, rng)
        ])
        rows = []
        for s in range(samples.shape[0]):
            for gi, x in enumerate(grid):
                rows.append((float(x), s, float(samples[s, gi])))
        ctx.write_csv(f"illustrate_w{width}.csv", ["x", "sample", "prediction"], rows)
        q75, q25 = np.percentile(samples, [75, 25], axis=0)
        for gi, x in enumerate(grid):
            spread_rows.append((width, float(x), float(q75[gi] - q25[gi])))
        figures.illustrate_figure(ctx.path(f"illustrate_w{width}.png"), grid, samples,
                                  data.inputs[:, 0], data.targets[:, 0], width)
        ctx.register(f"illustrate_w{width}.png")
        ctx.time_stage(f"sample_w{width}", t0)
    ctx.write_csv("spread.csv", ["width", "x", "iqr"], spread_rows)
    ctx.finish(diverged_widths=diverged)
    return diverged


def _scan_one_width(ctx: RunContext, cfg: ExperimentConfig, width: int, net: StochasticNet,
                    loss: LossSpec, train_data: Dataset, test_data: Dataset,
                    scan_rows: list, summary_rows: list) -> bool:
    """Train one width and append its variance rows; returns False on divergence."""
    t0 = time.monotonic()
    try:
        net, trace = train(net, train_data, loss, cfg.train_spec(cfg.seed + width))
    except TrainingDivergenceError as err:
        _write_trace(ctx, f"trace_w{width}.csv", err.trace)
        ctx.time_stage(f"train_w{width}", t0)
        return False
    _write_trace(ctx, f"trace_w{width}.csv", trace)
    ctx.time_stage(f"train_w{width}", t0)

    t0 = time.monotonic()
    for split, data, role in (("train", train_data, _ROLE_VAR_TRAIN),
                              ("test", test_data, _ROLE_VAR_TEST)):
        report = estimate_variance(net, data, cfg.variance_samples,
                                   RngStream(cfg.seed, width * 16 + role), split)
        for pid, v in enumerate(report.per_point_variance):
            scan_rows.append((width, pid, split, float(v)))
        summary_rows.append((width, split, float(report.mean_variance)))
    ctx.time_stage(f"variance_w{width}", t0)
    return True


def _finish_scan(ctx: RunContext, cfg: ExperimentConfig, scan_rows, summary_rows,
                 diverged, fit_extra=None) -> None:
    ctx.write_csv("scan.csv", ["width", "point_id", "split", "variance"], scan_rows)
    ctx.write_csv("summary.csv", ["width", "split", "mean_variance"], summary_rows)
    train_pairs = [(w, v) for w, s, v in summary_rows if s == "train"]
    fit = None
    try:
        fit = fit_scaling_exponent(train_pairs, cfg.tail_fraction)
        ctx.write_json("fit.json", _fit_to_dict(fit, fit_extra))
    except (SlopeFitError, ConfigurationError) as err:
        ctx.notes["fit_skipped"] = str(err)
    figures.scan_figure(ctx.path("scan.png"), summary_rows, fit)
    ctx.register("scan.png")
    ctx.finish(diverged_widths=diverged)


def run_dropout_scan(cfg: ExperimentConfig) -> list[int]:
    """Width scan of the cubic-target dropout perceptron; emits variance CSVs and tail fit."""
    ctx = RunContext(cfg)
    train_data = make_cubic_dataset(cfg.n_train, cfg.seed, cfg.data_dim)
    test_data = make_cubic_dataset(cfg.n_test, cfg.seed + 1, cfg.data_dim)
    loss = LossSpec(kind="mse", mc_samples_per_step=cfg.mc_samples_per_step)
    scan_rows: list = []
    summary_rows: list = []
    diverged: list[int] = []
    for width in cfg.widths:
        net = mlp_dropout_net(cfg.data_dim, width, cfg.data_dim, cfg.dropout_p,
                              RngStream(cfg.seed, width * 16 + _ROLE_INIT), cfg.activation)
        ok = _scan_one_width(ctx, cfg, width, net, loss, train_data, test_data,
                             scan_rows, summary_rows)
        if not ok:
            diverged.append(width)
    _finish_scan(ctx, cfg, scan_rows, summary_rows, diverged)
    return diverged


def run_vae_scan(cfg: ExperimentConfig) -> list[int]:
    """Width scan of the Gaussian autoencoding beta-VAE with beta = beta_scale / width."""
    ctx = RunContext(cfg)
    train_data = make_gaussian_auto_dataset(cfg.n_train, cfg.seed, cfg.data_dim)
    test_data = make_gaussian_auto_dataset(cfg.n_test, cfg.seed + 1, cfg.data_dim)
    scan_rows: list = []
    summary_rows: list = []
    diverged: list[int] = []
    beta_by_width = {}
    for width in cfg.widths:
        beta = cfg.beta_scale / width
        beta_by_width[str(width)] = beta
        net = gaussian_vae_net(cfg.data_dim, cfg.enc_hidden, width, cfg.dec_hidden,
                               cfg.data_dim, RngStream(cfg.seed, width * 16 + _ROLE_INIT),
                               cfg.activation)
        loss = LossSpec(kind="beta_elbo", beta=beta, mc_samples_per_step=cfg.mc_samples_per_step)
        ok = _scan_one_width(ctx, cfg, width, net, loss, train_data, test_data,
                             scan_rows, summary_rows)
        if not ok:
            diverged.append(width)
    ctx.notes["beta_by_width"] = beta_by_width
    _finish_scan(ctx, cfg, scan_rows, summary_rows, diverged,
                 fit_extra={"heuristic_target_exponent": -0.5})
    return diverged


def _teacher_dataset(cfg: ExperimentConfig) -> Dataset:
    # targets realizable by a small smooth net, so a wider base can interpolate
    teacher = mlp_dropout_net(2, 4, 1, 0.5, RngStream(cfg.seed, 11), "tanh")
    xs = (2.0 * RngStream(cfg.seed, 12).uniform(2 * cfg.n_train) - 1.0).reshape(cfg.n_train, 2)
    ys = np.array([expect_block(teacher, x) for x in xs])
    return Dataset(xs, ys, "teacher")


def _train_base(cfg: ExperimentConfig, net: StochasticNet, data: Dataset, seed: int):
    spec = TrainSpec(
        optimizer="adam", lr=cfg.lr, steps=cfg.base_steps,
        lr_schedule=step_decay_schedule(cfg.lr, cfg.base_steps, max(1, cfg.base_steps // 4)),
        seed=seed,
    )
    return train(net, data, LossSpec(kind="mse", mc_samples_per_step=0), spec)


def run_lift_verify(cfg: ExperimentConfig) -> list[int]:
    """Train near-interpolating bases, lift across k, certify variances and penalties."""
    ctx = RunContext(cfg)
    data = _teacher_dataset(cfg)
    series_doc: dict = {}
    for mode in cfg.lift_modes:
        t0 = time.monotonic()
        if mode == "plain":
            base = mlp_dropout_net(2, cfg.base_width, 1, cfg.dropout_p,
                                   RngStream(cfg.seed, 13), "tanh")
        elif mode == "prior":
            base = gaussian_vae_net(2, 8, cfg.base_width, 1, 1,
                                    RngStream(cfg.seed, 14), "tanh")
        else:
            inner = cfg.extended_inner_factor * cfg.base_width
            base = mlp_two_hidden_dropout_net(2, cfg.base_width, inner, 1, cfg.dropout_p,
                                              RngStream(cfg.seed, 15), "tanh")
        base, trace = _train_base(cfg, base, data, cfg.seed + 100 + _MODE_INDEX[mode])
        _write_trace(ctx, f"base_trace_{mode}.csv", trace)
        ctx.write_text(f"base_net_{mode}.json", net_to_json(base) + "\n")
        ctx.time_stage(f"base_train_{mode}", t0)

        t0 = time.monotonic()
        certs = []
        for ki, k in enumerate(cfg.lift_ks):
            spec = LiftSpec(
                k=k, mode=mode, base_width=cfg.base_width,
                alpha=cfg.alpha if mode == "prior" else None,
                gamma=cfg.gamma if mode == "prior" else None,
                inner_width=(lambda w, f=cfg.extended_inner_factor: f * w) if mode == "extended" else None,
            )
            lifted = build_lift(base, spec, data)
            cert = certify_lift(lifted, base, data, cfg.lift_n_mc,
                                RngStream(cfg.seed, (1 << 20) | (ki << 8) | _MODE_INDEX[mode]),
                                spec)
            certs.append(cert)
            ctx.write_json(f"certificate_{mode}_k{k}.json", cert.to_dict())
        ks = [c.k for c in certs]
        out_vars = [float(c.per_point_output_variance.mean()) for c in certs]
        pre_vars = [float(c.per_point_preactivation_variance.mean()) for c in certs]
        predicted = [float(c.predicted_preactivation_variance.mean()) for c in certs]
        doc = {
            "ks": ks,
            "mean_output_variance": out_vars,
            "mean_preactivation_variance": pre_vars,
            "predicted_preactivation_variance": predicted,
            "loss": [c.loss for c in certs],
            "max_expectation_residual": max(c.expectation_residual for c in certs),
        }
        if len(ks) >= 3:
            doc["output_variance_fit"] = _fit_to_dict(fit_scaling_exponent(zip(ks, out_vars), 1.0))
            doc["preactivation_variance_fit"] = _fit_to_dict(
                fit_scaling_exponent(zip(ks, pre_vars), 1.0))
        if mode == "prior":
            gamma = LiftSpec(k=1, mode="prior", alpha=cfg.alpha, gamma=cfg.gamma).gamma
            doc["alpha"] = cfg.alpha
            doc["gamma"] = gamma
            doc["prior_var_terms"] = [c.prior_var_term for c in certs]
            doc["prior_mean_terms"] = [c.prior_mean_term for c in certs]
            mean_terms = [(k, m) for k, m in zip(ks, doc["prior_mean_terms"]) if m and m > 0]
            if len(mean_terms) >= 3:
                pfit = fit_scaling_exponent(mean_terms, 1.0)
                doc["prior_term_fit"] = _fit_to_dict(pfit, {
                    "candidate_exponents": {
                        "first_order": 1.0 - gamma - cfg.alpha,
                        "second_order": 1.0 - 2.0 * gamma - cfg.alpha,
                    },
                })
            doc["latent_variance_target_exponent"] = -(1.0 - gamma)
        series_doc[mode] = doc
        figures.lift_figure(ctx.path(f"lift_{mode}.png"), mode, ks,
                            pre_vars if mode == "prior" else out_vars,
                            predicted if mode != "prior" else None,
                            ylabel="mean latent variance" if mode == "prior"
                            else "mean output variance")
        ctx.register(f"lift_{mode}.png")
        ctx.time_stage(f"certify_{mode}", t0)
    ctx.write_json("lift_series.json", series_doc)
    ctx.finish(diverged_widths=[])
    return []


_GRADCHECK_P95_BUDGET = 1e-4


def _gradcheck_cases(seed: int):
    mk = lambda sid: RngStream(seed, sid)
    return [
        ("tanh-dropout", mlp_dropout_net(3, 5, 2, 0.3, mk(41), "tanh"),
         LossSpec(kind="mse")),
        ("relu-dropout", mlp_dropout_net(3, 6, 2, 0.3, mk(42), "relu"),
         LossSpec(kind="mse")),
        ("identity-dropout", mlp_dropout_net(3, 4, 2, 0.5, mk(43), "identity"),
         LossSpec(kind="mse")),
        ("deep-tanh-dropout", mlp_two_hidden_dropout_net(3, 5, 4, 2, 0.3, mk(44), "tanh"),
         LossSpec(kind="mse")),
        ("tanh-encoder-mse", gaussian_vae_net(3, 5, 4, 5, 3, mk(45), "tanh"),
         LossSpec(kind="mse")),
        ("tanh-encoder-prior", gaussian_vae_net(3, 5, 4, 5, 3, mk(46), "tanh"),
         LossSpec(kind="prior_regularized", alpha=1.0)),
        ("relu-encoder-elbo", gaussian_vae_net(3, 5, 4, 5, 3, mk(47), "relu"),
         LossSpec(kind="beta_elbo", beta=0.05)),
    ]


def gradient_check(net: StochasticNet, data: Dataset, loss: LossSpec, seed: int,
                   h: float = 1e-5) -> np.ndarray:
    """Per-coordinate relative error of backprop against central differences.

    The noise is frozen by replaying the same stream state for every loss
    evaluation, so both sides differentiate the identical sampled objective.
    """
    state = (seed, 3, 0)
    grads = backprop_grad(net, data, loss, RngStream(*state))
    flat_bp = np.concatenate([grads[name].ravel() for name, _ in parameter_items(net)])
    theta0 = get_parameter_vector(net)

    def objective(theta):
        set_parameter_vector(net, theta)
        value = sampled_objective(net, data, loss, RngStream(*state))
        set_parameter_vector(net, theta0)
        return value

    flat_fd = finite_diff_grad(objective, theta0, h)
    scale = np.maximum(np.maximum(np.abs(flat_bp), np.abs(flat_fd)), 1e-8)
    return np.abs(flat_bp - flat_fd) / scale


def run_gradcheck(cfg: ExperimentConfig) -> list[int]:
    """Backprop-vs-finite-difference report over the fixed architecture zoo."""
    ctx = RunContext(cfg)
    rng = RngStream(cfg.seed, 40)
    report = {}
    rows = []
    for name, net, loss in _gradcheck_cases(cfg.seed):
        d0, _, _, d2 = net.widths
        x = rng.normal(4 * d0).reshape(4, d0)
        y = rng.normal(4 * d2).reshape(4, d2)
        data = Dataset(x, y)
        rel = gradient_check(net, data, loss, cfg.seed, cfg.fd_step)
        p95 = float(np.percentile(rel, 95))
        worst = np.argsort(rel)[-3:][::-1]
        entry = {
            "p95_relative_error": p95,
            "max_relative_error": float(rel.max()),
            "n_coordinates": int(rel.size),
            "passed": bool(p95 <= _GRADCHECK_P95_BUDGET),
            "worst_coordinates": [[int(i), float(rel[i])] for i in worst],
        }
        report[name] = entry
        rows.append((name, p95, float(rel.max()), int(rel.size), entry["passed"]))
        print(f"[gradcheck] {name}: p95={p95:.2e} max={rel.max():.2e} "
              f"{'pass' if entry['passed'] else 'FAIL'}")
    ctx.write_json("gradcheck.json", report)
    ctx.write_csv("gradcheck.csv", ["architecture", "p95_rel_err", "max_rel_err", "n_coords", "passed"],
                  rows)
    ctx.finish(all_passed=all(e["passed"] for e in report.values()))
    if not all(e["passed"] for e in report.values()):
        raise ConfigurationError("gradient check failed; see gradcheck.json for worst coordinates")
    return []


def run_fit_slope(cfg: ExperimentConfig) -> list[int]:
    """Fit a tail power law to an existing summary.csv (width,split,mean_variance)."""
    if not cfg.input:
        raise ConfigurationError("fit-slope needs --input pointing at a summary CSV")
    ctx = RunContext(cfg)
    pairs = []
    summary_rows = []
    with open(cfg.input, newline="") as fh:
        for row in csv.DictReader(fh):
            summary_rows.append((int(row["width"]), row["split"], float(row["mean_variance"])))
            if row["split"] == cfg.split:
                pairs.append((int(row["width"]), float(row["mean_variance"])))
    if not pairs:
        raise ConfigurationError(f"no rows with split {cfg.split!r} in {cfg.input}")
    fit = fit_scaling_exponent(pairs, cfg.tail_fraction)
    ctx.write_json("fit.json", _fit_to_dict(fit, {"split": cfg.split, "source": cfg.input}))
    figures.scan_figure(ctx.path("fit.png"), summary_rows, fit)
    ctx.register("fit.png")
    ctx.finish()
    return []


EXPERIMENTS = {
    "illustrate": run_illustrate,
    "dropout-scan": run_dropout_scan,
    "vae-scan": run_vae_scan,
    "lift-verify": run_lift_verify,
    "gradcheck": run_gradcheck,
    "fit-slope": run_fit_slope,
}
