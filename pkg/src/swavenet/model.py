"""Generative pass: dilated causal conv stack with per-layer latent variables.

Layer l (1-based) computes a gated dilated convolution of the layer below
at dilation 2^(l-1), plus a residual connection; stochastic layers then
mix a latent sample into the summary state through a fully connected map.
The bottom L-S layers are deterministic. Emissions are diagonal Gaussians
produced by a two-affine head with a tanh between, applied to the top
summary state. Teacher forcing shifts the input by one frame so position
t only ever sees frames strictly before t.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SequenceBatch
from .errors import ConfigError
from .rng import EMISSION_STREAM, PRIOR_STREAM, gaussian_field


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    stochastic_layers: int
    hidden_dim: int
    latent_total: int
    frame_dim: int
    min_log_var: float = -14.0
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if not 0 <= self.stochastic_layers <= self.layers:
            raise ConfigError(
                f"stochastic_layers must lie in [0, {self.layers}], got {self.stochastic_layers}")
        if self.hidden_dim < 1 or self.frame_dim < 1 or self.latent_total < 1:
            raise ConfigError("hidden_dim, frame_dim, latent_total must be >= 1")
        if self.stochastic_layers >= 1 and self.latent_total < self.stochastic_layers:
            raise ConfigError(
                f"latent_total {self.latent_total} leaves zero dims for "
                f"{self.stochastic_layers} stochastic layers")

    @property
    def latent_per_layer(self):
        if self.stochastic_layers == 0:
            return 0
        return self.latent_total // self.stochastic_layers

    def dilation(self, layer):
        if not 1 <= layer <= self.layers:
            raise ConfigError(f"layer {layer} outside 1..{self.layers}")
        return 1 << (layer - 1)

    def is_stochastic(self, layer):
        return layer > self.layers - self.stochastic_layers

    @property
    def stochastic_layer_ids(self):
        return tuple(l for l in range(1, self.layers + 1) if self.is_stochastic(l))


@dataclass
class HiddenStates:
    """Summary states of one forward pass plus the emission parameters."""

    d: dict  # layer index 0..L -> Tensor [B,T,H]
    h: dict  # layer index 1..L -> Tensor [B,T,H]
    emission_mean: T.Tensor      # [B,T,frame_dim]
    emission_log_var: T.Tensor   # [B,T,frame_dim]


@dataclass
class LatentBundle:
    """Per stochastic layer: prior params, posterior params, and samples.

    Posterior entries are absent (empty dicts) for passes that do not run
    the inference network.
    """

    layers: tuple
    prior_mean: dict
    prior_log_var: dict
    post_mean: dict
    post_log_var: dict
    z: dict


def receptive_field(config):
    """Number of past positions that can influence one output: 2^L."""
    return 1 + sum(config.dilation(l) for l in range(1, config.layers + 1))


def ablate(config, stochastic_layers):
    """Return a config whose bottom L-S layers are deterministic."""
    if not 0 <= stochastic_layers <= config.layers:
        raise ConfigError(
            f"stochastic layer count {stochastic_layers} outside [0, {config.layers}]")
    return dataclasses.replace(config, stochastic_layers=stochastic_layers)


# ---------------------------------------------------------------------------
# parameters


def emission_hidden_dim(config):
    # Wider than the stack so the head can assemble large effective gains
    # from many near-linear tanh units; narrow heads converge very slowly
    # on data whose frames span a much larger range than their increments.
    return 4 * config.hidden_dim


def _uniform(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config):
    """Initialize generative and inference parameters (one seeded draw order)."""
    rng = np.random.default_rng(config.seed)
    h = config.hidden_dim
    d = config.frame_dim
    dz = config.latent_per_layer

    gen = {}
    gen["embed.w"] = T.parameter(_uniform(rng, (d, h), d))
    gen["embed.b"] = T.parameter(np.zeros(h))
    for l in range(1, config.layers + 1):
        gen[f"layer{l}.filter"] = T.parameter(_uniform(rng, (2, h, h), 2 * h))
        gen[f"layer{l}.gate"] = T.parameter(_uniform(rng, (2, h, h), 2 * h))
        in_dim = h + dz if config.is_stochastic(l) else h
        gen[f"layer{l}.out.w"] = T.parameter(_uniform(rng, (in_dim, h), in_dim))
        gen[f"layer{l}.out.b"] = T.parameter(np.zeros(h))
        if config.is_stochastic(l):
            gen[f"layer{l}.prior_mean.w"] = T.parameter(_uniform(rng, (h, dz), h))
            gen[f"layer{l}.prior_mean.b"] = T.parameter(np.zeros(dz))
            gen[f"layer{l}.prior_logvar.w"] = T.parameter(_uniform(rng, (h, dz), h))
            gen[f"layer{l}.prior_logvar.b"] = T.parameter(np.zeros(dz))
    he = emission_hidden_dim(config)
    gen["emit.hidden.w"] = T.parameter(_uniform(rng, (h, he), h))
    gen["emit.hidden.b"] = T.parameter(np.zeros(he))
    gen["emit.mean.w"] = T.parameter(_uniform(rng, (he, d), he))
    gen["emit.mean.b"] = T.parameter(np.zeros(d))
    gen["emit.logvar.w"] = T.parameter(_uniform(rng, (he, d), he))
    gen["emit.logvar.b"] = T.parameter(np.zeros(d))

    inf = {}
    if config.stochastic_layers >= 1:
        lowest = config.stochastic_layer_ids[0]
        inf["feat.top.w"] = T.parameter(_uniform(rng, (d, h), d))
        inf["feat.top.b"] = T.parameter(np.zeros(h))
        for l in range(config.layers - 1, lowest - 1, -1):
            inf[f"feat.layer{l}.filter"] = T.parameter(_uniform(rng, (2, h, h), 2 * h))
            inf[f"feat.layer{l}.gate"] = T.parameter(_uniform(rng, (2, h, h), 2 * h))
        for l in config.stochastic_layer_ids:
            inf[f"layer{l}.post_mean.w"] = T.parameter(_uniform(rng, (2 * h, dz), 2 * h))
            inf[f"layer{l}.post_mean.b"] = T.parameter(np.zeros(dz))
            inf[f"layer{l}.post_logvar.w"] = T.parameter(_uniform(rng, (2 * h, dz), 2 * h))
            inf[f"layer{l}.post_logvar.b"] = T.parameter(np.zeros(dz))
    return gen, inf


def param_count(params):
    return sum(p.values.size for p in params.values())


# ---------------------------------------------------------------------------
# forward pass


def embed_input(x: SequenceBatch, gen, config):
    """Layer-0 summary state: affine map of the one-step-shifted frames."""
    shifted = np.zeros_like(x.frames)
    if x.max_len > 1:
        shifted[:, 1:] = x.frames[:, :-1]
    return T.affine(T.constant(shifted), gen["embed.w"], gen["embed.b"])


def layer_hidden(d_prev, layer, gen, config):
    """Gated dilated convolution of the layer below, plus a residual."""
    dilation = config.dilation(layer)
    filt = T.conv1d_causal(d_prev, gen[f"layer{layer}.filter"], dilation)
    gate = T.conv1d_causal(d_prev, gen[f"layer{layer}.gate"], dilation)
    return T.add(T.mul(T.tanh(filt), T.sigmoid(gate)), d_prev)


def layer_summary(h, z_layer, layer, gen, config):
    """Fully connected summary of the hidden state and the latent sample."""
    summary_in = h if z_layer is None else T.concat_last([h, z_layer])
    return T.affine(summary_in, gen[f"layer{layer}.out.w"], gen[f"layer{layer}.out.b"])


def layer_forward(d_prev, z_layer, layer, gen, config):
    """One stack layer; ``z_layer`` must be given iff the layer is stochastic."""
    if config.is_stochastic(layer) != (z_layer is not None):
        raise ConfigError(
            f"layer {layer}: latent sample {'missing' if z_layer is None else 'unexpected'}")
    h = layer_hidden(d_prev, layer, gen, config)
    return h, layer_summary(h, z_layer, layer, gen, config)


def prior_params(h_layer, layer, gen, config):
    mean = T.affine(h_layer, gen[f"layer{layer}.prior_mean.w"], gen[f"layer{layer}.prior_mean.b"])
    log_var = T.clamp_min(
        T.affine(h_layer, gen[f"layer{layer}.prior_logvar.w"], gen[f"layer{layer}.prior_logvar.b"]),
        config.min_log_var)
    return mean, log_var


def emission_params(d_top, gen, config):
    hidden = T.tanh(T.affine(d_top, gen["emit.hidden.w"], gen["emit.hidden.b"]))
    mean = T.affine(hidden, gen["emit.mean.w"], gen["emit.mean.b"])
    log_var = T.clamp_min(
        T.affine(hidden, gen["emit.logvar.w"], gen["emit.logvar.b"]), config.min_log_var)
    return mean, log_var


def forward_stochastic(x: SequenceBatch, gen, config, z_source):
    """Run the full stack bottom-up, time-parallel within each layer.

    ``z_source(layer, h, prior_mean, prior_log_var)`` supplies the latent
    sample for each stochastic layer and optionally the posterior params
    that produced it.
    """
    d_states = {0: embed_input(x, gen, config)}
    h_states = {}
    bundle = LatentBundle((), {}, {}, {}, {}, {})
    layer_ids = []
    for layer in range(1, config.layers + 1):
        h = layer_hidden(d_states[layer - 1], layer, gen, config)
        z = None
        if config.is_stochastic(layer):
            p_mean, p_log_var = prior_params(h, layer, gen, config)
            z, q_mean, q_log_var = z_source(layer, h, p_mean, p_log_var)
            layer_ids.append(layer)
            bundle.prior_mean[layer] = p_mean
            bundle.prior_log_var[layer] = p_log_var
            bundle.z[layer] = z
            if q_mean is not None:
                bundle.post_mean[layer] = q_mean
                bundle.post_log_var[layer] = q_log_var
        h_states[layer] = h
        d_states[layer] = layer_summary(h, z, layer, gen, config)
    bundle = dataclasses.replace(bundle, layers=tuple(layer_ids))
    mean, log_var = emission_params(d_states[config.layers], gen, config)
    return HiddenStates(d_states, h_states, mean, log_var), bundle


def prior_z_source(config, seed, temperature=1.0):
    """Sample each latent from its prior (generation / oracle runs)."""

    def source(layer, h, p_mean, p_log_var):
        b, t = h.shape[0], h.shape[1]
        noise = gaussian_field(seed, PRIOR_STREAM, layer, b, t, config.latent_per_layer)
        std = T.exp(T.scale(p_log_var, 0.5))
        z = T.add(p_mean, T.mul(std, T.constant(noise * temperature)))
        return z, None, None

    return source


def fixed_noise_z_source(noise_by_layer):
    """z = prior_mean + prior_std * fixed noise (gradient checks)."""

    def source(layer, h, p_mean, p_log_var):
        std = T.exp(T.scale(p_log_var, 0.5))
        z = T.add(p_mean, T.mul(std, T.constant(noise_by_layer[layer])))
        return z, None, None

    return source


def fixed_value_z_source(values_by_layer):
    """z supplied verbatim (dependency and causality oracles)."""

    def source(layer, h, p_mean, p_log_var):
        v = values_by_layer[layer]
        z = v if isinstance(v, T.Tensor) else T.constant(v)
        return z, None, None

    return source


def emission_logprob(hidden: HiddenStates, x: SequenceBatch):
    """Masked per-sequence emission log-likelihood, shape [B]."""
    if x.max_len == 0:
        return T.constant(np.zeros(x.batch_size))
    per_t = T.gaussian_logpdf(T.constant(x.frames), hidden.emission_mean,
                              hidden.emission_log_var)
    return T.sum_last(T.mul(per_t, T.constant(x.mask())))


def prior_logprob(bundle: LatentBundle, x: SequenceBatch):
    """Masked per-sequence log density of the sampled latents under their
    priors, shape [B]."""
    total = T.constant(np.zeros(x.batch_size))
    mask = T.constant(x.mask())
    for layer in bundle.layers:
        per_t = T.gaussian_logpdf(bundle.z[layer], bundle.prior_mean[layer],
                                  bundle.prior_log_var[layer])
        total = T.add(total, T.sum_last(T.mul(per_t, mask)))
    return total


def joint_logprob(hidden, bundle, x):
    """log p(x, z) for the supplied pass, shape [B]."""
    return T.add(emission_logprob(hidden, x), prior_logprob(bundle, x))


# ---------------------------------------------------------------------------
# ancestral sampling


def _np_sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def generate(gen, config, t_out, n, temperature, seed):
    """Ancestral sampling: latents layer by layer, then the emission draw.

    Temperature scales the standard deviation of both the latent priors
    and the emission Gaussian; zero yields the deterministic mean path.
    """
    if t_out < 1:
        raise ConfigError(f"t_out must be >= 1, got {t_out}")
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    g = {k: p.values for k, p in gen.items()}
    h_dim = config.hidden_dim
    d_hist = [np.zeros((n, t_out, h_dim)) for _ in range(config.layers + 1)]
    frames = np.zeros((n, t_out, config.frame_dim))
    dz = config.latent_per_layer
    for t in range(t_out):
        prev = frames[:, t - 1] if t >= 1 else np.zeros((n, config.frame_dim))
        d_hist[0][:, t] = prev @ g["embed.w"] + g["embed.b"]
        for layer in range(1, config.layers + 1):
            dil = config.dilation(layer)
            cur = d_hist[layer - 1][:, t]
            past = d_hist[layer - 1][:, t - dil] if t - dil >= 0 else np.zeros_like(cur)
            filt = g[f"layer{layer}.filter"]
            gate = g[f"layer{layer}.gate"]
            pre_f = past @ filt[0] + cur @ filt[1]
            pre_g = past @ gate[0] + cur @ gate[1]
            h = np.tanh(pre_f) * _np_sigmoid(pre_g) + cur
            if config.is_stochastic(layer):
                p_mean = h @ g[f"layer{layer}.prior_mean.w"] + g[f"layer{layer}.prior_mean.b"]
                p_lv = np.maximum(
                    h @ g[f"layer{layer}.prior_logvar.w"] + g[f"layer{layer}.prior_logvar.b"],
                    config.min_log_var)
                eps = gaussian_field(seed, PRIOR_STREAM, layer, n, 1, dz, time_offset=t)[:, 0]
                z = p_mean + temperature * np.exp(0.5 * p_lv) * eps
                summary_in = np.concatenate([h, z], axis=-1)
            else:
                summary_in = h
            d_hist[layer][:, t] = (summary_in @ g[f"layer{layer}.out.w"]
                                   + g[f"layer{layer}.out.b"])
        hid = np.tanh(d_hist[config.layers][:, t] @ g["emit.hidden.w"] + g["emit.hidden.b"])
        mean = hid @ g["emit.mean.w"] + g["emit.mean.b"]
        log_var = np.maximum(hid @ g["emit.logvar.w"] + g["emit.logvar.b"], config.min_log_var)
        eps = gaussian_field(seed, EMISSION_STREAM, 0, n, 1, config.frame_dim,
                             time_offset=t)[:, 0]
        frames[:, t] = mean + temperature * np.exp(0.5 * log_var) * eps
    return SequenceBatch(frames, [t_out] * n)
