"""Training loops for vae, iwae, rem1 and rem2.

Randomness never flows through a shared mutable generator. Every consumer
builds its generator from ``SeedSequence(seed, spawn_key=(stream, epoch,
batch))``, so a run resumed from a checkpoint replays exactly the draws an
uninterrupted run would have made, and the methods see the same data order
under a given seed.

All objectives are maximized except ``rem_eta_objective``; the only sign flip
happens in :func:`_ascend`.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import Dataset, minibatches, stochastic_binarize
from .evaluation import EvalReport, estimate_log_likelihood, evaluation_matrix
from .importance import fit_moment_proposal
from .models import Decoder, Encoder, LinearGaussianModel, ModelPair, NotPositiveDefiniteError
from .objectives import (
    draw_from_encoder,
    draw_from_moment,
    elbo,
    iwae_eta_objective,
    rem_eta_objective,
    rem_theta_objective,
    rem_v2_theta_objective,
)

log = logging.getLogger(__name__)

METHODS = ("vae", "iwae", "rem1", "rem2")
FAMILIES = ("auto", "bernoulli-mlp", "linear-gaussian")
STREAMS = {"init": 0, "shuffle": 1, "particles": 2, "binarize": 3}
METRIC_FIELDS = [
    "epoch", "method", "dataset", "K", "lr", "train_obj", "test_ll",
    "kl_to_prior", "ess_mean", "degenerate_rate", "wall_s",
]
DEGENERATE_WARN_RATE = 0.1


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch, self.batch = epoch, batch


@dataclass
class RunConfig:
    """Everything that determines a run. Defaults are the full density-estimation protocol."""

    method: str = "rem1"
    dataset: str = "mnist-fixed"
    k: int = 1000
    latent_dim: int = 20
    epochs: int = 200
    batch: int = 20
    lr: float = 1e-3
    epsilon: float = 1e-6
    seed: int = 2019
    eval_k: int = 1000
    hidden: int = 200
    subset: int | None = None
    eval_every: int = 5
    checkpoint_every: int = 10
    model: str = "auto"
    workers: int = 1
    out: str = "runs"

    def validate(self) -> RunConfig:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.model not in FAMILIES:
            raise ValueError(f"model must be one of {FAMILIES}, got {self.model!r}")
        for name in ("k", "latent_dim", "batch", "eval_k", "hidden", "eval_every", "checkpoint_every", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.method in ("rem1", "rem2") and self.k < 2:
            raise ValueError("rem1/rem2 fit a moment-matched proposal and need k >= 2")
        if not self.lr > 0 or self.epsilon < 0:
            raise ValueError("lr must be positive and epsilon non-negative")
        if self.subset is not None and self.subset < 0:
            raise ValueError("subset must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def echo(self) -> dict:
        """Config fields that influence results (the output location does not)."""
        d = self.to_dict()
        d.pop("out")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name], *keys)))


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict) -> AdamState:
        return cls({k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(state: AdamState, params: dict, grads: dict[str, np.ndarray], lr: float) -> None:
    """One bias-corrected Adam descent step on ``params`` (name -> Tensor) in place."""
    for k, g in grads.items():
        if np.any(np.isnan(g)):
            raise FloatingPointError(f"NaN gradient for {k}")
        if g.shape != params[k].data.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].data.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for k, g in grads.items():
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        params[k].data = params[k].data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at_epoch(base: float, epoch: int) -> float:
    """base * 10^(-i/7), i the number of thresholds 1, 4, 13, 40, ... reached by ``epoch``, at most 7."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    i, threshold = 0, 1
    while i < 7 and epoch >= threshold:
        i += 1
        threshold += 3**i
    return base * 10.0 ** (-i / 7.0)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: RunConfig
    pair: ModelPair
    adam_theta: AdamState
    adam_eta: AdamState
    data_dim: int
    family: str
    epoch: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = self.pair.arrays()
        for tag, st in (("theta", self.adam_theta), ("eta", self.adam_eta)):
            for k in st.m:
                out[f"adam.{tag}.m.{k}"] = st.m[k]
                out[f"adam.{tag}.v.{k}"] = st.v[k]
            out[f"adam.{tag}.step"] = np.array(float(st.step))
        return out

    def meta(self) -> dict:
        return {"config": self.config.echo(), "data_dim": self.data_dim, "epoch": self.epoch,
                "family": self.family}


def resolve_family(config: RunConfig, mode: str) -> str:
    if config.model != "auto":
        return config.model
    return "linear-gaussian" if mode == "real" else "bernoulli-mlp"


def build_pair(config: RunConfig, data_dim: int, family: str, zeros: bool = False) -> ModelPair:
    rng = None if zeros else stream(config.seed, "init")
    L, H = config.latent_dim, config.hidden
    if family == "linear-gaussian":
        A = np.zeros((data_dim, L)) if zeros else 0.1 * rng.standard_normal((data_dim, L))
        model = LinearGaussianModel(A, 1.0)
    else:
        model = Decoder(latent_dim=L, data_dim=data_dim, hidden=H, rng=rng, zeros=zeros)
    encoder = Encoder(data_dim=data_dim, latent_dim=L, hidden=H, rng=rng, zeros=zeros)
    return ModelPair(model, encoder)


def init_state(config: RunConfig, dataset: Dataset) -> TrainState:
    config.validate()
    family = resolve_family(config, dataset.mode)
    pair = build_pair(config, dataset.dim, family)
    return TrainState(config, pair, AdamState.zeros(pair.theta()), AdamState.zeros(pair.eta()), dataset.dim, family)


def save_state(state: TrainState, path) -> Path:
    return checkpoint.save(path, state.arrays(), state.meta())


def load_state(path, config: RunConfig | None = None) -> TrainState:
    """Rebuild a TrainState from a checkpoint; ``config`` (if given) overrides the echoed one."""
    arrays, meta = checkpoint.load(path)
    cfg = config or RunConfig.from_dict(meta["config"])
    pair = build_pair(cfg, meta["data_dim"], meta["family"], zeros=True)
    try:
        pair.model.load_arrays(arrays)
        pair.encoder.load_arrays(arrays)
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"checkpoint lacks parameter {exc}") from None
    states = []
    for tag, params in (("theta", pair.theta()), ("eta", pair.eta())):
        st = AdamState.zeros(params)
        if f"adam.{tag}.step" in arrays:
            st.step = int(arrays[f"adam.{tag}.step"])
            for k in params:
                st.m[k] = arrays[f"adam.{tag}.m.{k}"]
                st.v[k] = arrays[f"adam.{tag}.v.{k}"]
        states.append(st)
    return TrainState(cfg, pair, states[0], states[1], meta["data_dim"], meta["family"], meta["epoch"])


# ---------------------------------------------------------------------------
# per-method updates


@dataclass
class StepStats:
    train_obj: float
    n_valid: int
    ess_mean: float
    skipped: int


def _ascend(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: -g for k, g in grads.items()}


def _split(grads, params):
    return {k: grads[k] for k in params}


def _joint_step(state: TrainState, out, lr: float) -> StepStats:
    pair = state.pair
    adam_step(state.adam_eta, pair.eta(), _ascend(_split(out.grads, pair.eta())), lr)
    adam_step(state.adam_theta, pair.theta(), _ascend(_split(out.grads, pair.theta())), lr)
    return StepStats(out.value, len(out.per_point), float(np.mean(out.ess)), 0)


def _rem_step(state: TrainState, x: np.ndarray, rng, lr: float) -> StepStats:
    cfg, pair = state.config, state.pair
    model, enc, K = pair.model, pair.encoder, cfg.k
    v2 = cfg.method == "rem2"
    # everything below is evaluated at the iteration-start parameters
    ps = draw_from_encoder(model, enc, x, K, rng, keep_graph=not v2)
    deg = ps.weights.degenerate
    alpha = np.where(deg[:, None], 1.0 / K, ps.weights.normalized)
    proposals = fit_moment_proposal(ps.z, alpha, cfg.epsilon)
    fresh = draw_from_moment(model, proposals, x, K, rng, keep_graph=v2).mask_rows(deg)

    eta = rem_eta_objective(model, enc, proposals, x, K, None, particles=fresh)
    if v2:
        theta = rem_v2_theta_objective(model, proposals, x, K, None, particles=fresh)
    else:
        theta = rem_theta_objective(model, enc, x, K, None, particles=ps)
    adam_step(state.adam_eta, pair.eta(), eta.grads, lr)
    adam_step(state.adam_theta, pair.theta(), _ascend(theta.grads), lr)

    good = ps.weights.log_mean_weight[~deg]
    obj = math.fsum(good.tolist()) / len(good) if len(good) else float("nan")
    return StepStats(obj, len(good), float(np.mean(ps.weights.ess)), max(eta.skipped, theta.skipped))


def train_step(state: TrainState, x: np.ndarray, rng, lr: float) -> StepStats:
    cfg, pair = state.config, state.pair
    if cfg.method == "vae":
        return _joint_step(state, elbo(pair.model, pair.encoder, x, rng, K=1), lr)
    if cfg.method == "iwae":
        return _joint_step(state, iwae_eta_objective(pair.model, pair.encoder, x, cfg.k, rng), lr)
    return _rem_step(state, x, rng, lr)


def _check_finite(state: TrainState, epoch: int, batch: int) -> None:
    for k, t in state.pair.parameters().items():
        if not np.all(np.isfinite(t.data)):
            raise TrainingAborted(f"non-finite parameter {k} after update", epoch, batch)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    last_report: EvalReport | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_header(path) -> None:
    with open(path, "w", newline="") as f:
        csv.writer(f).writerow(METRIC_FIELDS)


def append_metrics(path, row: dict) -> None:
    with open(path, "a", newline="") as f:
        csv.writer(f).writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def evaluate_state(state: TrainState, x_test: np.ndarray):
    cfg = state.config
    return estimate_log_likelihood(state.pair.model, state.pair.encoder, x_test, cfg.eval_k, cfg.seed,
                                   method=cfg.method, dataset=cfg.dataset, split="test", workers=cfg.workers)


def train(config: RunConfig, dataset: Dataset, state: TrainState | None = None, run_dir=None) -> TrainResult:
    """Run (or continue) training until ``config.epochs`` epochs are complete.

    With ``run_dir`` the metrics CSV is written there (appended to when
    resuming) along with checkpoints every ``checkpoint_every`` epochs and
    ``final.ckpt``.
    """
    config.validate()
    if state is None:
        state = init_state(config, dataset)
    else:
        state.config = config
    result = TrainResult(state)
    metrics_path = ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        metrics_path = run_dir / "metrics.csv"
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        if state.epoch == 0 or not metrics_path.exists():
            write_metrics_header(metrics_path)
        if state.epoch == 0:
            result.checkpoints.append(save_state(state, ckpt_dir / "epoch0000.ckpt"))

    x_train = dataset.train
    x_test = evaluation_matrix(dataset, "test", config.seed)
    n = x_train.shape[0]
    for e in range(state.epoch, config.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(config.lr, e)
        order = stream(config.seed, "shuffle", e).permutation(n)
        obj_sum, obj_n, ess, n_batches, bad_batches = [], 0, [], 0, 0
        for b, idx in enumerate(minibatches(order, config.batch)):
            x = x_train[idx]
            if dataset.mode == "gray":
                x = stochastic_binarize(x, stream(config.seed, "binarize", e, b))
            try:
                stats = train_step(state, x, stream(config.seed, "particles", e, b), lr)
            except (FloatingPointError, NotPositiveDefiniteError) as exc:
                raise TrainingAborted(str(exc), e + 1, b) from exc
            _check_finite(state, e + 1, b)
            if stats.n_valid:
                obj_sum.append(stats.train_obj * stats.n_valid)
                obj_n += stats.n_valid
            ess.append(stats.ess_mean)
            n_batches += 1
            bad_batches += stats.skipped > 0
        state.epoch = e + 1
        deg_rate = bad_batches / n_batches if n_batches else 0.0
        if deg_rate > DEGENERATE_WARN_RATE:
            warnings.warn(f"epoch {e + 1}: {deg_rate:.0%} of minibatches had degenerate importance weights")
        row = {
            "epoch": e + 1, "method": config.method, "dataset": config.dataset, "K": config.k, "lr": lr,
            "train_obj": math.fsum(obj_sum) / obj_n if obj_n else float("nan"),
            "test_ll": None, "kl_to_prior": None,
            "ess_mean": float(np.mean(ess)) if ess else float("nan"),
            "degenerate_rate": deg_rate, "wall_s": None,
        }
        if (e + 1) % config.eval_every == 0 or e + 1 == config.epochs:
            report = result.last_report = evaluate_state(state, x_test)
            row["test_ll"], row["kl_to_prior"] = -report.nll_mean, report.kl_to_prior
        row["wall_s"] = round(time.perf_counter() - t0, 3)
        result.metrics.append(row)
        log.info("epoch %d %s train_obj=%.4f test_ll=%s", e + 1, config.method, row["train_obj"], row["test_ll"])
        if metrics_path is not None:
            append_metrics(metrics_path, row)
            if (e + 1) % config.checkpoint_every == 0:
                result.checkpoints.append(save_state(state, ckpt_dir / f"epoch{e + 1:04d}.ckpt"))
    if ckpt_dir is not None:
        result.checkpoints.append(save_state(state, ckpt_dir / "final.ckpt"))
    return result
