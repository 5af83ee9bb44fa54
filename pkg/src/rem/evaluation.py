"""Held-out log-likelihood estimates and proposal diagnostics.

The per-datapoint estimate is the K-particle importance bound
lse(log w) - log K with particles from the encoder. Each datapoint draws its
particles from its own generator, seeded by the run seed and a hash of the
datapoint's bytes, so results do not depend on data order, chunking or the
number of worker threads.
"""

from __future__ import annotations

import hashlib
import json
import os
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, stochastic_binarize
from .importance import compute_weights
from .objectives import kl_to_prior_per_point

# particles per chunk, bounds memory at roughly chunk * D floats per activation
CHUNK_PARTICLES = 5000
EVAL_BINARIZE_STREAM = 5


@dataclass
class EvalReport:
    """Per-datapoint log-likelihood estimates plus aggregates.

    ``nll_mean`` is the negated mean over non-degenerate datapoints; degenerate
    ones are recorded as -inf in ``log_likelihood`` and counted.
    """

    method: str
    dataset: str
    split: str
    K: int
    seed: int
    log_likelihood: np.ndarray
    nll_mean: float
    kl_to_prior: float
    degenerate_count: int

    def to_json(self, per_point_path: str | None = None) -> dict:
        return {
            "method": self.method,
            "dataset": self.dataset,
            "split": self.split,
            "K": self.K,
            "seed": self.seed,
            "nll_mean": self.nll_mean,
            "nll_per_point_path": per_point_path,
            "kl_to_prior": self.kl_to_prior,
            "degenerate_count": self.degenerate_count,
        }

    def write(self, json_path, per_point_path) -> Path:
        """Write per-point NLLs (one per line) and the JSON report; returns the JSON path.

        The report names the per-point file relative to its own directory so
        that identical runs give identical bytes wherever they are written.
        """
        per_point_path = Path(per_point_path)
        per_point_path.write_text("".join(f"{-v!r}\n" for v in self.log_likelihood.tolist()))
        json_path = Path(json_path)
        json_path.write_text(json.dumps(self.to_json(os.path.relpath(per_point_path, json_path.parent)), indent=2, sort_keys=True) + "\n")
        return json_path


def point_seed(seed: int, row: np.ndarray) -> np.random.SeedSequence:
    digest = hashlib.blake2b(np.ascontiguousarray(row, dtype="<f8").tobytes(), digest_size=16).digest()
    return np.random.SeedSequence([int(seed), *np.frombuffer(digest, dtype="<u4").tolist()])


def _chunk_log_weights(model, encoder, x: np.ndarray, K: int, seed: int) -> np.ndarray:
    with ad.no_grad():
        mean, logvar = (t.data for t in encoder.params_of(x))
        eps = np.stack([np.random.default_rng(point_seed(seed, row)).standard_normal((K, mean.shape[1])) for row in x])
        z = mean[:, None, :] + np.exp(0.5 * logvar)[:, None, :] * eps
        log_r = encoder.log_prob(x, z, (ad.Tensor(mean), ad.Tensor(logvar))).data
        log_p = model.log_joint(x, z).data
    return log_p - log_r


def log_likelihood_estimates(model, encoder, x, K: int, seed: int, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """K-particle estimates of log p(x) per row and a degenerate-row mask (those rows are -inf)."""
    x = np.asarray(x, dtype=np.float64)
    if K < 1:
        raise ValueError(f"K must be at least 1, got {K}")
    n = x.shape[0]
    step = max(1, CHUNK_PARTICLES // K)
    starts = list(range(0, n, step))

    def run(start):
        log_w = _chunk_log_weights(model, encoder, x[start:start + step], K, seed)
        ws = compute_weights(log_w, np.zeros_like(log_w), allow_degenerate=True)
        return ws.log_mean_weight, ws.degenerate

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if not parts:
        return np.zeros(0), np.zeros(0, dtype=bool)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def collapse_diagnostic(encoder, x) -> float:
    """Mean closed-form KL from the encoder's proposal to the prior over ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return float("nan")
    return math.fsum(kl_to_prior_per_point(encoder, x).tolist()) / x.shape[0]


def evaluation_matrix(dataset: Dataset, split: str, seed: int) -> np.ndarray:
    """The split as the model sees it; gray data is binarized once with a seed-fixed draw."""
    x = getattr(dataset, split)
    if dataset.mode == "gray":
        key = {"train": 0, "test": 1}[split]
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(EVAL_BINARIZE_STREAM, key)))
        x = stochastic_binarize(x, rng)
    return x


def estimate_log_likelihood(model, encoder, x, K: int, seed: int, method: str = "", dataset: str = "",
                            split: str = "test", workers: int = 1) -> EvalReport:
    values, degenerate = log_likelihood_estimates(model, encoder, x, K, seed, workers)
    good = values[~degenerate]
    mean_ll = math.fsum(good.tolist()) / len(good) if len(good) else float("nan")
    return EvalReport(
        method=method,
        dataset=dataset,
        split=split,
        K=K,
        seed=seed,
        log_likelihood=values,
        nll_mean=-mean_ll,
        kl_to_prior=collapse_diagnostic(encoder, x),
        degenerate_count=int(degenerate.sum()),
    )
