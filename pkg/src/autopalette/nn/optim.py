"""SGD with momentum over flat name->array parameter maps."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError, TrainingError


def adam_step(params, grads, lr, state=None, beta1=0.9, beta2=0.999, eps=1e-8, step=None):
    """One Adam update with bias correction; returns (new_params, new_state).

    `state` maps names to (m, v, t); pure like sgd_step.
    """
    if state is None:
        state = {k: (np.zeros_like(v), np.zeros_like(v), 0) for k, v in params.items()}
    new_params, new_state = {}, {}
    for key, p in params.items():
        g = np.asarray(grads.get(key, np.zeros_like(p)))
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter '{key}' {p.shape}")
        if not np.all(np.isfinite(g)):
            where = f" at step {step}" if step is not None else ""
            raise TrainingError(f"non-finite gradient for '{key}'{where}")
        m, v, t = state[key]
        t += 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        new_params[key] = p - lr * mh / (np.sqrt(vh) + eps)
        new_state[key] = (m, v, t)
    return new_params, new_state


def sgd_step(params, grads, lr, momentum=0.0, velocity=None, step=None):
    """One SGD(+momentum) update: v <- mu*v + g, p <- p - lr*v.

    Pure function of its inputs; returns (new_params, new_velocity) dicts.
    `step` only decorates the error message when a gradient is non-finite.
    """
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
    new_params, new_velocity = {}, {}
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(p)
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter '{key}' {p.shape}")
        if not np.all(np.isfinite(g)):
            where = f" at step {step}" if step is not None else ""
            raise TrainingError(f"non-finite gradient for '{key}'{where}")
        v = momentum * velocity[key] + g
        new_params[key] = p - lr * v
        new_velocity[key] = v
    return new_params, new_velocity
