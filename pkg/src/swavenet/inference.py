"""Variational posterior: reversed feature stack and posterior heads.

The latent at (t, l) influences only the outputs in its dependency set,
so the posterior conditions on exactly those future frames. A mirrored
anti-causal convolution stack aggregates them: the top feature reads the
single frame at t, and each level below combines the level above at t
and at t + dilation(l+1), with zero padding past the sequence end. The
input cone of the feature at (t, l) therefore equals the dependency set
by construction. Posterior heads read the concatenation of the shared
generative hidden state and the backward feature.
"""

from . import tensor as T
from .data import SequenceBatch
from .errors import ConfigError
from .model import forward_stochastic
from .rng import POSTERIOR_STREAM, gaussian_field


def dependency_set(layer, t, config, t_len):
    """Output time indices (0-based, ascending) influenced by the latent
    at (t, layer), clipped to [0, t_len)."""
    if not 1 <= layer <= config.layers:
        raise ConfigError(f"layer {layer} outside 1..{config.layers}")
    if not 0 <= t < t_len:
        raise ConfigError(f"time {t} outside 0..{t_len - 1}")
    times = {t}
    for level in range(config.layers, layer, -1):
        times |= {tau + config.dilation(level) for tau in times}
    return tuple(sorted(tau for tau in times if tau < t_len))


def backward_features(x: SequenceBatch, inf, config):
    """Anti-causal feature stack, one [B,T,H] tensor per stochastic layer."""
    if config.stochastic_layers == 0:
        return {}
    feats = {}
    top = T.affine(T.constant(x.frames), inf["feat.top.w"], inf["feat.top.b"])
    feats[config.layers] = top
    lowest = config.stochastic_layer_ids[0]
    for layer in range(config.layers - 1, lowest - 1, -1):
        dilation = config.dilation(layer + 1)
        above = feats[layer + 1]
        rev = T.flip_time(above)
        filt = T.conv1d_causal(rev, inf[f"feat.layer{layer}.filter"], dilation)
        gate = T.conv1d_causal(rev, inf[f"feat.layer{layer}.gate"], dilation)
        gated = T.flip_time(T.mul(T.tanh(filt), T.sigmoid(gate)))
        feats[layer] = T.add(gated, above)
    return feats


def posterior_params(h_layer, b_layer, layer, inf, config):
    """Affine heads over [h, b]; log variance floored at min_log_var."""
    joint = T.concat_last([h_layer, b_layer])
    mean = T.affine(joint, inf[f"layer{layer}.post_mean.w"], inf[f"layer{layer}.post_mean.b"])
    log_var = T.clamp_min(
        T.affine(joint, inf[f"layer{layer}.post_logvar.w"], inf[f"layer{layer}.post_logvar.b"]),
        config.min_log_var)
    return mean, log_var


def reparam_sample(mean, log_var, noise):
    """z = mean + exp(log_var / 2) * noise; differentiable in mean/log_var."""
    noise_t = noise if isinstance(noise, T.Tensor) else T.constant(noise)
    return T.add(mean, T.mul(T.exp(T.scale(log_var, 0.5)), noise_t))


def posterior_z_source(feats, inf, config, seed, *, noise=None, z_values=None,
                       batch_offset=0):
    """z_source that samples each latent from its posterior.

    ``noise`` fixes the reparameterization draws per layer; ``z_values``
    bypasses sampling entirely while still computing posterior params
    (used by the conditioning-set oracles).
    """

    def source(layer, h, p_mean, p_log_var):
        q_mean, q_log_var = posterior_params(h, feats[layer], layer, inf, config)
        if z_values is not None:
            v = z_values[layer]
            z = v if isinstance(v, T.Tensor) else T.constant(v)
        else:
            if noise is not None:
                eps = noise[layer]
            else:
                b, t = h.shape[0], h.shape[1]
                eps = gaussian_field(seed, POSTERIOR_STREAM, layer, b, t,
                                     config.latent_per_layer, batch_offset=batch_offset)
            z = reparam_sample(q_mean, q_log_var, eps)
        return z, q_mean, q_log_var

    return source


def posterior_pass(x: SequenceBatch, gen, inf, config, seed, *, noise=None,
                   z_values=None, batch_offset=0):
    """Backward features once, then the generative recursion with posterior
    sampling interleaved layer by layer. Returns everything the objective
    needs: (HiddenStates, LatentBundle, features dict)."""
    feats = backward_features(x, inf, config)
    source = posterior_z_source(feats, inf, config, seed, noise=noise,
                                z_values=z_values, batch_offset=batch_offset)
    hidden, bundle = forward_stochastic(x, gen, config, source)
    return hidden, bundle, feats
