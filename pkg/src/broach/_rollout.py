"""Pure-Python episode rollout; the reference for the compiled kernel in ``_core``.

Both implementations share one signature and must agree to floating-point
round-off. See :mod:`broach.kernels` for the selector and argument packing.
"""
import math

import numpy as np

MODE_INTENT, MODE_HAZARD, MODE_LOGIT, MODE_LOGIT_DET, MODE_Q = 0, 1, 2, 3, 4
ACT_TANH, ACT_RELU = 0, 1
N_BASE_OBS = 8
WINDOW = 14


def _forward(x, weights, sizes, act_code):
    pos = 0
    h = x
    n_layers = len(sizes) - 1
    for li in range(n_layers):
        n_in, n_out = int(sizes[li]), int(sizes[li + 1])
        W = weights[pos:pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = weights[pos:pos + n_out]
        pos += n_out
        z = b.copy()
        for i in range(n_in):
            z += h[i] * W[i]
        if li < n_layers - 1:
            z = np.tanh(z) if act_code == ACT_TANH else np.maximum(z, 0.0)
        h = z
    return h


def rollout(base_obs, future, lam_exo, tau_exo, endo, c2, budget, mode, intents, uniforms,
            weights, sizes, act_code, epsilon, threshold, record_obs):
    H = base_obs.shape[0]
    n_future = future.shape[1]
    n_obs = N_BASE_OBS + n_future
    attempted = np.zeros(H, dtype=np.int8)
    effective = np.zeros(H, dtype=np.int8)
    forced = np.zeros(H, dtype=np.int8)
    rewards = np.zeros(H)
    probs = np.zeros(H)
    lam = np.zeros(H)
    tau = np.zeros(H)
    obs_out = np.zeros((H, n_obs)) if record_obs else None
    obs = np.zeros(n_obs)

    b2wk, by, d2wk, dy = endo[0], endo[1], endo[2], endo[3]
    count = 0
    yday = 0
    b_rem = budget
    t_scale = 1.0 / (H - 1) if H > 1 else 0.0
    for t in range(H):
        # observation
        obs[0] = base_obs[t, 0]
        obs[1] = base_obs[t, 1]
        obs[2] = base_obs[t, 2]
        obs[3] = base_obs[t, 3]
        obs[4] = count / WINDOW
        obs[5] = yday
        ratio = b_rem / (H - t)
        obs[6] = 1.0 if ratio > 1.0 else ratio
        obs[7] = t * t_scale
        for j in range(n_future):
            obs[N_BASE_OBS + j] = future[t, j]
        if record_obs:
            obs_out[t] = obs

        # policy
        p = 0.0
        a = 0
        if mode == MODE_INTENT:
            a = 1 if intents[t] else 0
            p = float(a)
        elif mode == MODE_HAZARD:
            p = b_rem / (H - t)
            a = 1 if uniforms[t, 0] < p else 0
        elif mode == MODE_LOGIT or mode == MODE_LOGIT_DET:
            z = _forward(obs, weights, sizes, act_code)[0]
            p = 1.0 / (1.0 + math.exp(-z))
            if mode == MODE_LOGIT:
                a = 1 if uniforms[t, 0] < p else 0
            else:
                a = 1 if p > 0.5 else 0
        else:
            q = _forward(obs, weights, sizes, act_code)
            greedy = 1 if q[1] > q[0] else 0
            if uniforms[t, 0] < epsilon:
                a = 1 if uniforms[t, 1] < 0.5 else 0
            else:
                a = greedy
            p = (1.0 - epsilon) * greedy + epsilon * 0.5
        probs[t] = p
        attempted[t] = a

        # mask: QHI restriction and exhausted budget
        is_forced = base_obs[t, 0] < threshold or b_rem <= 0
        forced[t] = 1 if is_forced else 0
        a_eff = 0 if is_forced else a
        effective[t] = a_eff

        lam_t = math.exp(lam_exo[t] + b2wk * (count / WINDOW) + by * yday)
        tau_t = 1.0 / (1.0 + math.exp(-(tau_exo[t] + d2wk * (count / WINDOW) + dy * yday)))
        lam[t] = lam_t
        tau[t] = tau_t
        rewards[t] = 1.0 - c2 * lam_t * (1.0 - a_eff * tau_t)

        # endogenous transition
        b_rem -= a_eff
        count += a_eff
        if t - WINDOW >= 0:
            count -= effective[t - WINDOW]
        yday = a_eff
    return attempted, effective, rewards, probs, forced, lam, tau, obs_out
