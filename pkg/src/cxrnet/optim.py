"""Adam updates over nested parameter stores.

The store layout matches :func:`cxrnet.models.init_params`: a dict of node
names to dicts of named arrays.  Running batch-norm statistics are not
trainable and never receive moments; everything else is updated in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import NumericFault


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def _trainable(name: str) -> bool:
    return not name.startswith("running_")


@dataclass
class AdamState:
    hyper: AdamHyper
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict, hyper: AdamHyper | None = None) -> AdamState:
    """Zeroed first/second moments for every trainable parameter."""
    state = AdamState(hyper or AdamHyper())
    for node, entry in params.items():
        state.m[node] = {k: np.zeros_like(a) for k, a in entry.items() if _trainable(k)}
        state.v[node] = {k: np.zeros_like(a) for k, a in entry.items() if _trainable(k)}
    return state


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update; mutates ``params`` and ``state``.

    Raises :class:`NumericFault` naming the offending parameter if a gradient
    contains NaN or Inf.
    """
    h = state.hyper
    state.step += 1
    t = state.step
    bc1 = 1.0 - h.beta1**t
    bc2 = 1.0 - h.beta2**t
    for node, entry in grads.items():
        for pname, grad in entry.items():
            if grad is None:
                continue
            if not np.isfinite(grad).all():
                raise NumericFault(f"non-finite gradient for parameter '{node}.{pname}'")
            m = state.m[node][pname]
            v = state.v[node][pname]
            m *= h.beta1
            m += (1.0 - h.beta1) * grad
            v *= h.beta2
            v += (1.0 - h.beta2) * np.square(grad)
            m_hat = m / bc1
            v_hat = v / bc2
            params[node][pname] -= h.learning_rate * m_hat / (np.sqrt(v_hat) + h.epsilon)
    return params, state
