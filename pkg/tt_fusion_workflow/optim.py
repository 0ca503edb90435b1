from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidArgumentError, NumericError


@dataclass
class AdamState:
    """Moment accumulators and hyperparameters of the Adam optimizer."""

    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState,
              params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]):
    """Apply one bias-corrected Adam update to `params` in place.

    Parameters
    ----------
    state : AdamState
        Optimizer state; accumulators are created on first use.
    params : dict[str, np.ndarray]
        Parameters by name, updated in place.
    grads : dict[str, np.ndarray]
        Gradients by name, same shapes as `params`.

    Raises
    ------
    NumericError
        If any gradient holds a non-finite value; nothing is updated.
    """

    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise InvalidArgumentError(f'gradient of {name!r} has shape {grad.shape}, '
                                       f'parameter has {param.shape}')
        if not np.all(np.isfinite(grad)):
            raise NumericError(f'non-finite gradient for parameter {name!r}', name=name)

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        grad = grads[name]
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad ** 2
        param -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
