"""Post-detection model recovery.

The main routine replays training over the remaining clients while
estimating their per-round updates from stored history: the estimate is
the stored update plus an approximate integrated-Hessian-vector product
along the gap between the recovered and original global models. The
Hessian-vector product comes from a compact direct L-BFGS form fed by
buffers of global-model and update differences. Exact client updates are
requested only for warm-up, periodic correction, abnormality fixing, and
final tuning, which is where the client-side savings come from.

Also here: the train-from-scratch / historical-replay / fine-tuning
baselines, the client cost formula, and the convergence-gap bound used to
verify the recovery error guarantee numerically.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import models
from .aggregation import aggregate, apply_update
from .attacks import adaptive_scale
from .flengine import FlSetup, HistoryStore
from .numcore import (
    STREAM_FINETUNE,
    STREAM_INIT,
    RngStream,
    as_vector,
    check_same_dim,
    derive_seed,
    linf_norm,
)


class LbfgsSingularError(ValueError):
    """The buffered system cannot produce a Hessian-vector product."""


def lbfgs_hvp(dw_list, dg_list, v) -> np.ndarray:
    """Approximate Hessian-vector product from difference buffers.

    Buffers are ordered oldest to newest. With A = dW^T dG, D = diag(A),
    L = strictly-lower-triangular(A), and sigma set by the most recent
    pair, solves the 2s x 2s system

        [[-D, L^T], [L, sigma dW^T dW]] p = [dG^T v; sigma dW^T v]

    and returns sigma v - [dG | sigma dW] p. Raises LbfgsSingularError
    when the most recent global difference is zero or the block system is
    singular, in which case the caller falls back to an exact update.
    """
    if len(dw_list) == 0 or len(dw_list) != len(dg_list):
        raise ValueError("need equally many (>=1) global and update differences")
    v = as_vector(v, name="v")
    W = np.column_stack([as_vector(u, name="dW entry") for u in dw_list])
    G = np.column_stack([as_vector(u, name="dG entry") for u in dg_list])
    if W.shape[0] != v.size or G.shape[0] != v.size:
        raise ValueError("buffer dimension does not match v")
    s = W.shape[1]
    sw = W[:, -1]
    denom = float(sw @ sw)
    if denom == 0.0:
        raise LbfgsSingularError("most recent global-model difference is zero")
    sigma = float(G[:, -1] @ sw) / denom
    A = W.T @ G
    D = np.diag(np.diag(A))
    Lo = np.tril(A, k=-1)
    K = np.block([[-D, Lo.T], [Lo, sigma * (W.T @ W)]])
    rhs = np.concatenate([G.T @ v, sigma * (W.T @ v)])
    try:
        p = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise LbfgsSingularError(f"singular buffer system: {exc}") from exc
    if not np.all(np.isfinite(p)):
        raise LbfgsSingularError("non-finite solution for buffer system")
    out = sigma * v - (G @ p[:s] + sigma * (W @ p[s:]))
    if not np.all(np.isfinite(out)):
        raise LbfgsSingularError("non-finite Hessian-vector product")
    return out


def estimate_update(g_stored, hvp_result) -> np.ndarray:
    """Estimated update: stored original update plus the HVP correction."""
    g = as_vector(g_stored, name="stored update")
    h = as_vector(hvp_result, name="hvp result")
    check_same_dim(g, h)
    return g + h


def exact_integrated_hvp_quadratic(hessian: np.ndarray, v) -> np.ndarray:
    """H v for an explicit (quadratic-loss) Hessian.

    For a quadratic loss the integrated Hessian along any segment equals
    the constant Hessian, so this is the zero-error reference for the
    L-BFGS approximation.
    """
    h = np.asarray(hessian, dtype=np.float64)
    v = as_vector(v, name="v")
    if h.ndim != 2 or h.shape[0] != h.shape[1] or h.shape[0] != v.size:
        raise ValueError(f"hessian shape {h.shape} incompatible with v of dim {v.size}")
    return h @ v


def compute_threshold(history: HistoryStore, remaining_clients, alpha: float) -> float:
    """Abnormality threshold derived from stored updates.

    Per round, pool every coordinate of the remaining clients' stored
    updates and take the smallest pooled value v such that at most an
    alpha fraction of the pool is strictly greater than v; the threshold
    is the max over rounds. Ties resolve toward the larger value, i.e.
    fewer exact-update requests.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError("tolerance rate alpha must lie in (0, 1]")
    remaining = sorted(remaining_clients)
    if not history.records:
        raise ValueError("history is empty")
    tau = -math.inf
    for record in history.records:
        pool = np.concatenate([record.updates[c] for c in remaining])
        n = pool.size
        asc = np.sort(pool)
        limit = alpha * n
        uniq = np.unique(asc)
        greater = n - np.searchsorted(asc, uniq, side="right")
        tau_t = float(uniq[greater <= limit][0])
        tau = max(tau, tau_t)
    return tau


class LbfgsBuffers:
    """Sliding windows (oldest to newest, capacity s) of global-model
    differences and per-client update differences.

    The global window only advances after rounds in which every remaining
    client computed an exact update; a client's own window additionally
    advances after a single-client abnormality fix.
    """

    def __init__(self, capacity: int, client_ids):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.global_diffs: deque = deque(maxlen=capacity)
        self.update_diffs = {c: deque(maxlen=capacity) for c in client_ids}

    def push_global(self, dw: np.ndarray) -> None:
        self.global_diffs.append(dw)

    def push_client(self, client_id, dg: np.ndarray) -> None:
        self.update_diffs[client_id].append(dg)

    def hvp(self, client_id, v: np.ndarray) -> np.ndarray:
        return lbfgs_hvp(list(self.global_diffs), list(self.update_diffs[client_id]), v)


@dataclass(frozen=True)
class RecoveryParams:
    warmup_rounds: int
    correction_period: int
    final_tuning_rounds: int
    buffer_size: int = 2
    tolerance_rate: float = 1e-6
    tau: float | None = None  # explicit override; math.inf disables fixing
    hvp_mode: str = "lbfgs"  # lbfgs | exact_quadratic

    def __post_init__(self):
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be >= 1")
        if self.warmup_rounds <= self.buffer_size:
            raise ValueError("warmup_rounds must exceed buffer_size")
        if self.correction_period < 1:
            raise ValueError("correction_period must be >= 1")
        if self.final_tuning_rounds < 0:
            raise ValueError("final_tuning_rounds must be >= 0")
        if self.tau is None and not (0.0 < self.tolerance_rate <= 1.0):
            raise ValueError("tolerance_rate must lie in (0, 1] when tau is not given")
        if self.hvp_mode not in ("lbfgs", "exact_quadratic"):
            raise ValueError(f"unknown hvp_mode {self.hvp_mode!r}")


@dataclass
class RecoveryResult:
    recovered_model: np.ndarray
    exact_rounds_per_client: dict
    abnormality_count: int
    per_round_models: list
    tau: float
    estimate_errors: list = field(default_factory=list)  # instrumentation only

    @property
    def measured_m(self) -> float | None:
        if not self.estimate_errors:
            return None
        return max(err for _, _, err in self.estimate_errors)


def predicted_cost(total_rounds: int, warmup: int, period: int, final: int) -> int:
    """Exact client rounds when abnormality fixing never triggers."""
    if warmup < 0 or final < 0 or warmup + final > total_rounds:
        raise ValueError("need warmup + final <= total rounds")
    if period < 1:
        raise ValueError("correction period must be >= 1")
    return warmup + final + (total_rounds - warmup - final) // period


def theoretical_bound(eta: float, mu: float, m_bound: float, t: int, d0: float) -> float:
    """Upper bound on the recovered-vs-scratch model gap after t rounds.

    With r = sqrt(1 - eta * mu): r**t * d0 + (1 - r**t) / (1 - r) * eta * M.
    Requires 0 < eta * mu <= 1.
    """
    prod = eta * mu
    if not (0.0 < prod <= 1.0):
        raise ValueError(f"eta * mu must lie in (0, 1], got {prod}")
    if t < 0:
        raise ValueError("t must be >= 0")
    r = math.sqrt(1.0 - prod)
    rt = r**t
    geo = (1.0 - rt) / (1.0 - r) if r < 1.0 else float(t)
    return rt * d0 + geo * eta * m_bound


def _is_exact_round(t: int, total: int, p: RecoveryParams) -> bool:
    if t < p.warmup_rounds or t >= total - p.final_tuning_rounds:
        return True
    return (t - p.warmup_rounds + 1) % p.correction_period == 0


def fedrecover(
    history: HistoryStore,
    detected,
    setup: FlSetup,
    params: RecoveryParams,
    *,
    instrument: bool = False,
) -> RecoveryResult:
    """Recover a global model from stored history after removing the
    detected clients.

    Undetected malicious clients (attack configured on the setup but
    missing from `detected`) keep attacking whenever they are asked for an
    exact update; an adaptive backdoor attacker re-scales by m / m'. Exact
    updates are requested in warm-up, periodic correction, final tuning,
    whenever an estimate exceeds the abnormality threshold, and whenever
    the buffered system is singular. The difference buffers refresh from
    full-cohort exact rounds (global and per-client) and additionally from
    single-client fixes (per-client only).
    """
    total = history.total_rounds
    if len(history.records) != total:
        raise ValueError(
            f"history has {len(history.records)} records but covers T={total} rounds"
        )
    if params.warmup_rounds + params.final_tuning_rounds > total:
        raise ValueError("warmup + final tuning exceed the training length")
    detected = frozenset(detected)
    remaining = sorted(set(setup.client_ids) - detected)
    if not remaining:
        raise ValueError("no clients remain after detection")

    undetected = sorted(set(setup.malicious) - detected) if setup.attack else []
    lam = None
    if undetected and setup.attack.kind == "backdoor":
        lam = setup.attack.lam
        if setup.attack.adaptive:
            lam = adaptive_scale(lam, len(setup.malicious), len(undetected))
    trim_residual = bool(undetected) and setup.attack.kind == "trim"
    if params.hvp_mode == "exact_quadratic":
        if not setup.spec.is_quadratic:
            raise ValueError("exact_quadratic mode needs the quadratic (ridge) model kind")
        if setup.l != 1:
            raise ValueError("exact_quadratic mode is defined for single-batch updates (l=1)")

    tau = params.tau if params.tau is not None else compute_threshold(
        history, remaining, params.tolerance_rate
    )

    buffers = LbfgsBuffers(params.buffer_size, remaining)
    exact_rounds = {c: 0 for c in remaining}
    abnormality_count = 0
    errors = []

    w_hat = history.records[0].global_model.copy()
    trace = [w_hat]

    def full_exact_reports(w, t):
        return setup.reported_updates(w, t, remaining, undetected, lam_override=lam)

    undetected_set = set(undetected)

    def exact_single(c, w, t, memo):
        """What client c would report if asked at round t of the recovery.

        For the trim residual attack the crafted values depend on the whole
        cohort, so those are computed once per round and memoized.
        """
        if c in undetected_set:
            if trim_residual:
                if memo.get("full") is None:
                    memo["full"] = full_exact_reports(w, t)
                return memo["full"][c]
            return setup.backdoor_update(c, w, t, lam)
        return setup.honest_update(c, w, t)

    def hessian_for(cid, t):
        idx = setup.samplers[cid].round_batches(t, 1)[0]
        return models.quadratic_hessian(setup.spec, setup.local_inputs[cid][idx])

    for t in range(total):
        record = history.records[t]
        w_bar = record.global_model
        g_bar = record.updates
        if _is_exact_round(t, total, params):
            reported = full_exact_reports(w_hat, t)
            for c in remaining:
                exact_rounds[c] += 1
            buffers.push_global(w_hat - w_bar)
            for c in remaining:
                buffers.push_client(c, reported[c] - g_bar[c])
            w_hat = setup.aggregate_step(w_hat, reported)
        else:
            v = w_hat - w_bar
            chosen = {}
            fix = []
            for c in remaining:
                try:
                    if params.hvp_mode == "exact_quadratic":
                        hv = exact_integrated_hvp_quadratic(hessian_for(c, t), v)
                    else:
                        hv = buffers.hvp(c, v)
                    est = estimate_update(g_bar[c], hv)
                except LbfgsSingularError:
                    fix.append(c)
                    continue
                if linf_norm(est) > tau:
                    fix.append(c)
                else:
                    chosen[c] = est
            memo = {}
            for c in fix:
                g_exact = exact_single(c, w_hat, t, memo)
                chosen[c] = g_exact
                exact_rounds[c] += 1
                abnormality_count += 1
                buffers.push_client(c, g_exact - g_bar[c])
            if instrument:
                for c in remaining:
                    if c not in fix:
                        err = float(np.linalg.norm(chosen[c] - exact_single(c, w_hat, t, memo)))
                        errors.append((c, t, err))
            w_hat = setup.aggregate_step(w_hat, chosen)
        trace.append(w_hat)

    return RecoveryResult(
        recovered_model=w_hat,
        exact_rounds_per_client=exact_rounds,
        abnormality_count=abnormality_count,
        per_round_models=trace,
        tau=tau,
        estimate_errors=errors,
    )


def train_from_scratch(
    setup: FlSetup, remaining_clients, total_rounds: int
) -> tuple[np.ndarray, list]:
    """Retrain over the remaining clients only; every client computes an
    exact update every round. Returns the final model and the full trace."""
    remaining = sorted(remaining_clients)
    if not remaining:
        raise ValueError("no clients remain")
    w = models.init_params(setup.spec, derive_seed(setup.seed, STREAM_INIT, 0, 0))
    trace = [w]
    for t in range(total_rounds):
        reported = {c: setup.honest_update(c, w, t) for c in remaining}
        w = setup.aggregate_step(w, reported)
        trace.append(w)
    return w, trace


def historical_only(
    history: HistoryStore, detected, rule, eta: float, sizes: dict
) -> tuple[np.ndarray, list]:
    """Replay the stored updates of the remaining clients; zero client cost.

    With nothing detected this reproduces the original trajectory exactly.
    """
    detected = frozenset(detected)
    first = history.records[0]
    remaining = sorted(set(first.updates) - detected)
    if not remaining:
        raise ValueError("no clients remain")
    w = first.global_model.copy()
    trace = [w]
    for record in history.records:
        agg = aggregate(rule, [record.updates[c] for c in remaining], [sizes[c] for c in remaining])
        w = apply_update(w, agg, eta)
        trace.append(w)
    return w, trace


def _largest_remainder_counts(proportions: np.ndarray, n: int) -> np.ndarray:
    raw = proportions * n
    base = np.floor(raw).astype(np.int64)
    short = n - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def fine_tune(
    spec: models.ModelSpec,
    w,
    dataset,
    epochs: int,
    eta: float,
    beta: float,
    n_examples: int,
    batch_size: int,
    seed: int,
) -> np.ndarray:
    """Fine-tune a (poisoned) model on a clean sample of the dataset.

    Class proportions follow a symmetric Dirichlet(beta); beta = inf means
    uniform. Raises when a class cannot supply its drawn count.
    """
    w = as_vector(w, name="model")
    if n_examples < 1 or n_examples > dataset.size:
        raise ValueError("n_examples must lie in [1, dataset size]")
    rng = RngStream(derive_seed(seed, STREAM_FINETUNE, 0, 0))
    c = dataset.num_classes
    if math.isinf(beta):
        proportions = np.full(c, 1.0 / c)
    else:
        if beta <= 0:
            raise ValueError("beta must be positive or inf")
        proportions = rng.dirichlet(beta, c)
    counts = _largest_remainder_counts(proportions, n_examples)
    picked = []
    for cls in range(c):
        pool = np.flatnonzero(dataset.labels == cls)
        if counts[cls] > pool.size:
            raise ValueError(
                f"class {cls} needs {counts[cls]} examples but only {pool.size} are available"
            )
        if counts[cls] > 0:
            picked.append(pool[rng.choice(pool.size, int(counts[cls]))])
    idx = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
    x = dataset.inputs[idx]
    y = dataset.labels[idx]
    n = x.shape[0]
    bs = min(batch_size, n)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, bs):
            sel = perm[lo : lo + bs]
            g = models.gradient(spec, w, models.Batch(x[sel], y[sel]))
            w = w - eta * g
    return w
