"""ELBO assembly, KL annealing schedules, and an importance-sampling
log-likelihood estimator used as an evaluation oracle.

The bound is estimated with a single posterior sample; KL terms are
analytic per (t, layer) between the diagonal-Gaussian posterior and
prior. Batch reduction is the mean over sequences of per-sequence sums.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SequenceBatch
from .errors import ConfigError
from .inference import posterior_pass
from .model import emission_logprob, joint_logprob

_SCHEDULE_KINDS = ("linear", "cosine", "constant")


@dataclass(frozen=True)
class AnnealSchedule:
    kind: str
    total_steps: int

    def __post_init__(self):
        if self.kind not in _SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")


def anneal_lambda(schedule, step):
    """KL weight in [0, 1]; 0 at step 0, 1 from total_steps onward."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if schedule.kind == "constant":
        return 1.0
    frac = min(step / schedule.total_steps, 1.0)
    if schedule.kind == "linear":
        return frac
    return 1.0 - math.cos(frac * math.pi / 2.0)


@dataclass
class ElboBreakdown:
    recon: float
    kl_per_layer: tuple
    lam: float
    objective: float   # recon - lam * sum(kl)
    elbo: float        # recon - sum(kl)


@dataclass
class ElboTerms:
    """Tape tensors behind one ELBO evaluation (training keeps these)."""

    recon: T.Tensor            # scalar, mean over sequences
    kl_per_layer: list         # scalar tensors, one per stochastic layer
    objective: T.Tensor        # scalar
    elbo: T.Tensor             # scalar
    recon_per_seq: T.Tensor    # [B]
    kl_per_seq: T.Tensor       # [B] total KL
    hidden: object
    bundle: object

    def breakdown(self, lam):
        return ElboBreakdown(
            recon=self.recon.item(),
            kl_per_layer=tuple(k.item() for k in self.kl_per_layer),
            lam=lam,
            objective=self.objective.item(),
            elbo=self.elbo.item(),
        )


def elbo_terms(x: SequenceBatch, gen, inf, config, lam, seed, *, noise=None,
               z_values=None, batch_offset=0):
    """One posterior pass with a single latent sample per (t, layer)."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    hidden, bundle, _ = posterior_pass(x, gen, inf, config, seed, noise=noise,
                                       z_values=z_values, batch_offset=batch_offset)
    batch = max(x.batch_size, 1)
    recon_per_seq = emission_logprob(hidden, x)
    recon = T.scale(T.sum_last(recon_per_seq), 1.0 / batch)
    mask = T.constant(x.mask())
    kl_scalars = []
    kl_per_seq = T.constant(np.zeros(x.batch_size))
    for layer in bundle.layers:
        per_t = T.kl_diag_gaussian(bundle.post_mean[layer], bundle.post_log_var[layer],
                                   bundle.prior_mean[layer], bundle.prior_log_var[layer])
        seq_kl = T.sum_last(T.mul(per_t, mask))
        kl_per_seq = T.add(kl_per_seq, seq_kl)
        kl_scalars.append(T.scale(T.sum_last(seq_kl), 1.0 / batch))
    total_kl = kl_scalars[0] if kl_scalars else T.constant(0.0)
    for k in kl_scalars[1:]:
        total_kl = T.add(total_kl, k)
    objective = T.add(recon, T.scale(total_kl, -lam))
    bound = T.add(recon, T.scale(total_kl, -1.0))
    return ElboTerms(recon, kl_scalars, objective, bound, recon_per_seq,
                     kl_per_seq, hidden, bundle)


def elbo(x, gen, inf, config, lam, seed, **kwargs):
    """Single-sample ElboBreakdown for one batch (no gradients recorded)."""
    return elbo_terms(x, gen, inf, config, lam, seed, **kwargs).breakdown(lam)


def importance_ll_estimate(x: SequenceBatch, gen, inf, config, k_samples, seed,
                           chunk=2048):
    """log(1/K sum_k w_k) with w_k = p(x, z_k) / q(z_k | x), z_k ~ q.

    Returns (estimate, standard error), both averaged over the batch: the
    estimate is the mean of per-sequence estimates, the error combines
    per-sequence delta-method errors. With K=1 the standard error is
    reported as 0. S=0 models have degenerate weights: the estimate is
    the exact log-likelihood with zero variance.
    """
    if k_samples < 1:
        raise ConfigError(f"K must be >= 1, got {k_samples}")
    estimates = []
    variances = []
    for i in range(x.batch_size):
        length = x.lengths[i]
        log_w = np.empty(k_samples)
        done = 0
        while done < k_samples:
            m = min(chunk, k_samples - done)
            rep = SequenceBatch(np.repeat(x.frames[i:i + 1], m, axis=0), [length] * m)
            hidden, bundle, _ = posterior_pass(
                x=rep, gen=gen, inf=inf, config=config, seed=seed,
                batch_offset=i * k_samples + done)
            log_p = joint_logprob(hidden, bundle, rep).values
            mask = T.constant(rep.mask())
            log_q = np.zeros(m)
            for layer in bundle.layers:
                per_t = T.gaussian_logpdf(bundle.z[layer], bundle.post_mean[layer],
                                          bundle.post_log_var[layer])
                log_q += T.sum_last(T.mul(per_t, mask)).values
            log_w[done:done + m] = log_p - log_q
            done += m
        top = log_w.max()
        w = np.exp(log_w - top)
        mean_w = w.mean()
        estimates.append(top + math.log(mean_w))
        if k_samples > 1:
            variances.append(w.var(ddof=1) / (k_samples * mean_w ** 2))
        else:
            variances.append(0.0)
    if not estimates:
        raise ConfigError("importance estimate needs at least one sequence")
    n = len(estimates)
    return float(np.mean(estimates)), float(math.sqrt(sum(variances)) / n)
