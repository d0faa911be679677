"""Independent reference computations used by the tests.

Nothing here calls the code paths it checks: finite differences perturb raw
parameter vectors, the preference score is rebuilt from a hand-written MLP
forward pass, and statistical bounds come from closed-form binomial variance.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F


def flat_parameters(model):
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).clone()


def set_flat_parameters(model, flat):
    i = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(flat[i:i + n].reshape(p.shape))
            i += n


def central_differences(fn, model, h=1e-4):
    """d fn(model) / d theta by central differences, one parameter at a time."""
    theta = flat_parameters(model)
    grad = torch.zeros_like(theta)
    for i in range(theta.numel()):
        plus = theta.clone()
        plus[i] += h
        set_flat_parameters(model, plus)
        f_plus = float(torch.as_tensor(fn(model)).detach())
        minus = theta.clone()
        minus[i] -= h
        set_flat_parameters(model, minus)
        f_minus = float(torch.as_tensor(fn(model)).detach())
        grad[i] = (f_plus - f_minus) / (2 * h)
    set_flat_parameters(model, theta)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def mlp_forward(model, x, t, y):
    """Straight-line re-implementation of VelocityField.forward from its weights."""
    half = model.time_dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(200.0), half))
    args = np.outer(t, freqs)
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    h = np.concatenate([x, emb, y], axis=1)
    silu = lambda a: a / (1.0 + np.exp(-a))
    for layer in model.hidden_layers:
        h = silu(h @ layer.weight.detach().double().numpy().T + layer.bias.detach().double().numpy())
    out = h @ model.out.weight.detach().double().numpy().T + model.out.bias.detach().double().numpy()
    if model.skip_gain is not None:
        gain = emb @ model.skip_gain.weight.detach().double().numpy().T + model.skip_gain.bias.detach().double().numpy()
        out = out + gain * x
    return out


def brute_force_scores(model, ref, winner, loser, cond, x0, t):
    """The four squared errors of the flow-DPO score, summed row by row."""
    z = np.zeros(len(winner))
    for i in range(len(winner)):
        terms = []
        for target in (winner[i], loser[i]):
            xt = (1 - t[i]) * x0[i] + t[i] * target
            v = target - x0[i]
            args = (xt[None], np.array([t[i]]), cond[i][None])
            e_model = float(np.sum((v - mlp_forward(model, *args)[0]) ** 2))
            e_ref = float(np.sum((v - mlp_forward(ref, *args)[0]) ** 2))
            terms.append(e_model - e_ref)
        z[i] = terms[0] - terms[1]
    return z


def binomial_bounds(n, p, sigmas=3.0):
    """Interval for the empirical fraction of n Bernoulli(p) draws."""
    sd = math.sqrt(p * (1 - p) / n)
    return p - sigmas * sd, p + sigmas * sd


def softplus_reference(x):
    return F.softplus(torch.as_tensor(x, dtype=torch.float64)).numpy()
