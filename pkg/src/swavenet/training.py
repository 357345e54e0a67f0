"""Optimization loop: Adam, cosine learning-rate schedule, evaluation,
metrics CSV, and best-validation checkpointing.

Runs are bitwise reproducible given (config, dataset, seed): shuffling,
validation splits, and all latent noise derive from the model seed, and
gradient accumulation order is fixed by the tape.
"""

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint, snapshot
from .errors import ConfigError, EmptyError, NumericsError, ShapeError, TrainingAbort
from .model import init_params
from .objective import AnnealSchedule, anneal_lambda, elbo_terms
from .rng import POSTERIOR_STREAM, fold_seed, gaussian_field

_SHUFFLE_TAG = 101
_SPLIT_TAG = 103
_EVAL_TAG = 107
_STEP_TAG = 109


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    anneal_kind: str = "cosine"
    anneal_steps: int = 0      # 0 means "anneal over the whole run"
    clip_norm: float = 0.0     # 0 disables clipping
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_max <= 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.clip_norm < 0 or self.anneal_steps < 0:
            raise ConfigError("clip_norm and anneal_steps must be >= 0")


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, state, lr):
    """Standard bias-corrected Adam update, applied in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        if g.shape != m.shape:
            raise ShapeError(f"gradient shape {g.shape} != moment shape {m.shape} for {name}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(step, total_steps, lr_max, lr_min):
    """Cosine decay from lr_max at step 0 to lr_min at total_steps."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def clip_gradients(params, max_norm):
    """Global-norm clip; returns (pre-clip norm, whether clipping fired)."""
    total = 0.0
    for p in params.values():
        total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            p.grad *= factor
        return norm, True
    return norm, False


@dataclass
class StepRecord:
    step: int
    lam: float
    lr: float
    objective: float
    recon: float
    kl_total: float
    kl_per_layer: tuple
    wall_clock: float


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    val_elbos: list = field(default_factory=list)
    best_val_elbo: float = -math.inf
    best_epoch: int = -1
    best_state: dict = field(default_factory=dict)
    gen_params: dict = field(default_factory=dict)
    inf_params: dict = field(default_factory=dict)


def split_train_val(dataset, val_fraction, seed):
    """Seeded validation split; returns (train, val-or-None)."""
    n = dataset.batch_size
    n_val = int(round(n * val_fraction))
    n_val = min(max(n_val, 1 if val_fraction > 0 and n > 1 else 0), n - 1)
    if n_val <= 0:
        return dataset, None
    perm = np.random.default_rng(fold_seed(seed, _SPLIT_TAG)).permutation(n)
    return dataset.select(perm[n_val:]), dataset.select(perm[:n_val])


def _shared_eval_noise(config, seed, batch, t_len):
    """One posterior noise draw broadcast across the batch, so evaluation
    scores a sequence identically regardless of its position or company."""
    noise = {}
    for layer in config.stochastic_layer_ids:
        one = gaussian_field(seed, POSTERIOR_STREAM, layer, 1, t_len,
                             config.latent_per_layer)
        noise[layer] = np.tile(one, (batch, 1, 1))
    return noise


def evaluate(gen, inf, config, dataset, mode="per_sequence", segment_len=None,
             seed=0, batch_size=256):
    """Mean per-sequence ELBO (exact log-likelihood when S=0).

    ``per_segment`` splits sequences into fixed-length segments first and
    averages over segments.
    """
    if mode not in ("per_sequence", "per_segment"):
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    if mode == "per_segment":
        if segment_len is None:
            raise ConfigError("per_segment evaluation needs segment_len")
        dataset = dataset.segments(segment_len)
    if dataset.batch_size == 0:
        raise EmptyError("nothing to evaluate")
    totals = []
    for start in range(0, dataset.batch_size, batch_size):
        part = dataset.select(range(start, min(start + batch_size, dataset.batch_size)))
        noise = _shared_eval_noise(config, seed, part.batch_size, part.max_len)
        terms = elbo_terms(part, gen, inf, config, lam=1.0, seed=seed, noise=noise)
        totals.append(terms.recon_per_seq.values - terms.kl_per_seq.values)
    return float(np.concatenate(totals).mean())


def write_metrics_csv(path, report, config):
    """Header: step,lambda,lr,objective,recon,kl_total,kl_l1..kl_lS."""
    n_stoch = len(config.stochastic_layer_ids)
    header = ["step", "lambda", "lr", "objective", "recon", "kl_total"]
    header += [f"kl_l{i}" for i in range(1, n_stoch + 1)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in report.steps:
            row = [rec.step, repr(rec.lam), repr(rec.lr), repr(rec.objective),
                   repr(rec.recon), repr(rec.kl_total)]
            row += [repr(k) for k in rec.kl_per_layer]
            writer.writerow(row)


def train(model_config, train_config, dataset, epochs, csv_path=None,
          checkpoint_path=None):
    """Shuffled minibatch training with per-step annealing and LR decay.

    Each step: posterior pass -> ELBO -> backward -> Adam. A checkpoint is
    written at the best validation ELBO; a non-finite objective aborts
    with the offending step number.
    """
    if dataset.batch_size == 0:
        raise EmptyError("training dataset is empty")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    train_set, val_set = split_train_val(dataset, train_config.val_fraction,
                                         model_config.seed)
    gen, inf = init_params(model_config)
    params = {"gen." + k: p for k, p in gen.items()}
    params.update({"inf." + k: p for k, p in inf.items()})
    adam = AdamState(params, train_config.beta1, train_config.beta2, train_config.eps)

    n_train = train_set.batch_size
    steps_per_epoch = (n_train + train_config.batch_size - 1) // train_config.batch_size
    total_steps = max(epochs * steps_per_epoch, 1)
    anneal_total = train_config.anneal_steps or total_steps
    schedule = AnnealSchedule(train_config.anneal_kind, anneal_total)
    shuffle_rng = np.random.default_rng(fold_seed(model_config.seed, _SHUFFLE_TAG))
    eval_seed = fold_seed(model_config.seed, _EVAL_TAG)

    report = TrainReport(gen_params=gen, inf_params=inf)
    report.best_state = snapshot(gen, inf)
    started = time.perf_counter()
    step = 0
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(n_train)
        for begin in range(0, n_train, train_config.batch_size):
            batch = train_set.select(perm[begin:begin + train_config.batch_size])
            lam = anneal_lambda(schedule, step)
            lr = lr_schedule(step, total_steps, train_config.lr_max, train_config.lr_min)
            T.zero_grads(params)
            try:
                with T.Tape():
                    terms = elbo_terms(batch, gen, inf, model_config, lam,
                                       seed=fold_seed(model_config.seed, _STEP_TAG + step))
                    objective_val = terms.objective.item()
                    if not math.isfinite(objective_val):
                        raise NumericsError("objective is not finite")
                    T.backward(T.scale(terms.objective, -1.0))
            except NumericsError as err:
                raise TrainingAbort(step, str(err)) from err
            if train_config.clip_norm > 0:
                clip_gradients(params, train_config.clip_norm)
            adam_step(params, adam, lr)
            breakdown = terms.breakdown(lam)
            report.steps.append(StepRecord(
                step=step, lam=lam, lr=lr, objective=breakdown.objective,
                recon=breakdown.recon, kl_total=sum(breakdown.kl_per_layer),
                kl_per_layer=breakdown.kl_per_layer,
                wall_clock=time.perf_counter() - started))
            step += 1
        val_elbo = evaluate(gen, inf, model_config, val_set or train_set,
                            seed=eval_seed)
        report.val_elbos.append(val_elbo)
        if val_elbo > report.best_val_elbo:
            report.best_val_elbo = val_elbo
            report.best_epoch = epoch
            report.best_state = snapshot(gen, inf)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, report.best_state)
    if csv_path is not None:
        write_metrics_csv(csv_path, report, model_config)
    return report
