"""Selects the compiled rollout kernel when available, else the pure-Python one.

Set ``BROACH_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _rollout
from ._rollout import (  # noqa: F401  re-exported mode constants
    ACT_RELU, ACT_TANH, MODE_HAZARD, MODE_INTENT, MODE_LOGIT, MODE_LOGIT_DET, MODE_Q, N_BASE_OBS,
)

python_rollout = _rollout.rollout
compiled_rollout = None
if not os.environ.get("BROACH_PURE_PYTHON"):
    try:
        from ._core import rollout as compiled_rollout
    except ImportError:  # extension not built
        compiled_rollout = None

BACKEND = "compiled" if compiled_rollout is not None else "python"
_EMPTY_W = np.zeros(1)
_EMPTY_SIZES = np.array([1, 1], dtype=np.int32)


def pack_mlp(net):
    """Flatten an :class:`~broach.nn.MLP` into ``(weights, sizes, act_code)``."""
    if net is None:
        return _EMPTY_W, _EMPTY_SIZES, ACT_TANH
    flat = np.concatenate([p.ravel() for p in net.params]).astype(float)
    sizes = np.asarray(net.sizes, dtype=np.int32)
    return flat, sizes, ACT_TANH if net.activation == "tanh" else ACT_RELU


def run(base_obs, future, lam_exo, tau_exo, endo, c2, budget, mode, intents=None, uniforms=None,
        packed=None, epsilon=0.0, threshold=0.0, record_obs=False, backend=None):
    """Roll out one episode. Returns the tuple documented in ``_rollout.rollout``."""
    H = base_obs.shape[0]
    if intents is None:
        intents = np.zeros(H, dtype=np.int8)
    if uniforms is None:
        uniforms = np.zeros((H, 2))
    weights, sizes, act_code = packed if packed is not None else pack_mlp(None)
    fn = compiled_rollout if (backend or BACKEND) == "compiled" else python_rollout
    if fn is None:
        raise RuntimeError("compiled kernel requested but not built")
    args = (
        np.ascontiguousarray(base_obs, dtype=float),
        np.ascontiguousarray(future, dtype=float),
        np.ascontiguousarray(lam_exo, dtype=float),
        np.ascontiguousarray(tau_exo, dtype=float),
        np.ascontiguousarray(endo, dtype=float),
        float(c2), int(budget), int(mode),
        np.ascontiguousarray(intents, dtype=np.int8),
        np.ascontiguousarray(uniforms, dtype=float),
        np.ascontiguousarray(weights, dtype=float),
        np.ascontiguousarray(sizes, dtype=np.int32),
        int(act_code), float(epsilon), float(threshold), bool(record_obs),
    )
    try:
        out = fn(*args)
    except OverflowError as exc:
        raise FloatingPointError("baseline rate overflow during rollout") from exc
    if not np.all(np.isfinite(out[2])):
        raise FloatingPointError("non-finite reward during rollout")
    return out
