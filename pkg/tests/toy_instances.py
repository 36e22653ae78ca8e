"""Random small GRPO instances for gradient checks."""
import numpy as np

from groundzoom.grpo import importance_ratios
from groundzoom.toylab import (
    PolicyParams,
    ToyConfig,
    _trajectory_logps,
    grad_objective,
    rollout_group,
    sample_task,
    surrogate_objective,
)

from oracles import central_difference, max_relative_error

KINK_MARGIN = 1e-3


def random_params(cfg, rng, scale=1.0):
    p = PolicyParams.zeros(cfg)
    return p.with_flat(rng.normal(scale=scale, size=p.flat().size))


def make_instance(seed, mode="ground-r1", kl_coef=None, n_groups=2):
    """Groups rolled out under one policy, evaluated at a perturbed one.

    Instances whose ratios sit within KINK_MARGIN of a clip edge are
    redrawn, since the objective is not differentiable there.
    """
    rng = np.random.default_rng(seed)
    cfg = ToyConfig(K=3, V=3, G1=2, G2=2, batch=n_groups, mode=mode, kl_coef=kl_coef)
    eps = cfg.epsilon
    while True:
        old = random_params(cfg, rng)
        new = old.with_flat(old.flat() + rng.normal(scale=0.3, size=old.flat().size))
        ref = random_params(cfg, rng, scale=0.5)
        groups = [rollout_group(old, sample_task(rng, cfg.K, cfg.V), cfg, rng) for _ in range(n_groups)]
        ratios = np.concatenate([
            importance_ratios(_trajectory_logps(new, g, cfg), g.logp_old_matrix()).ravel() for g in groups])
        if np.min(np.abs(np.abs(ratios - 1) - eps)) > KINK_MARGIN:
            clipped = int(np.sum(np.abs(ratios - 1) > eps))
            return cfg, new, ref, groups, clipped


def gradient_error(cfg, params, ref, groups, h=1e-5):
    analytic = grad_objective(params, groups, cfg, ref).flat()
    numeric = central_difference(
        lambda x: surrogate_objective(params.with_flat(x), groups, cfg, ref), params.flat(), h=h)
    return max_relative_error(analytic, numeric)
