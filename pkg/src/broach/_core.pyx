# cython: language_level=3
"""Compiled episode rollout. Mirrors ``broach._rollout.rollout`` step for step."""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()

DEF WINDOW = 14
DEF N_BASE_OBS = 8


cdef void _forward(double[::1] x, double[::1] weights, int[::1] sizes, int act_code,
                   double[::1] buf_a, double[::1] buf_b, double[::1] out) noexcept nogil:
    cdef int n_layers = sizes.shape[0] - 1
    cdef int li, i, j, n_in, n_out
    cdef Py_ssize_t pos = 0, wpos
    cdef double z
    cdef double[::1] src = x
    cdef double[::1] dst
    for li in range(n_layers):
        n_in = sizes[li]
        n_out = sizes[li + 1]
        dst = out if li == n_layers - 1 else (buf_a if li % 2 == 0 else buf_b)
        wpos = pos
        pos += n_in * n_out
        for j in range(n_out):
            z = weights[pos + j]
            for i in range(n_in):
                z = z + src[i] * weights[wpos + i * n_out + j]
            if li < n_layers - 1:
                if act_code == 0:
                    z = tanh(z)
                elif z < 0.0:
                    z = 0.0
            dst[j] = z
        pos += n_out
        src = dst


def rollout(double[:, ::1] base_obs, double[:, ::1] future, double[::1] lam_exo,
            double[::1] tau_exo, double[::1] endo, double c2, int budget, int mode,
            signed char[::1] intents, double[:, ::1] uniforms, double[::1] weights,
            int[::1] sizes, int act_code, double epsilon, double threshold, bint record_obs):
    cdef int H = base_obs.shape[0]
    cdef int n_future = future.shape[1]
    cdef int n_obs = N_BASE_OBS + n_future
    attempted_a = np.zeros(H, dtype=np.int8)
    effective_a = np.zeros(H, dtype=np.int8)
    forced_a = np.zeros(H, dtype=np.int8)
    rewards_a = np.zeros(H)
    probs_a = np.zeros(H)
    lam_a = np.zeros(H)
    tau_a = np.zeros(H)
    obs_out_a = np.zeros((H, n_obs)) if record_obs else np.zeros((0, n_obs))
    cdef signed char[::1] attempted = attempted_a
    cdef signed char[::1] effective = effective_a
    cdef signed char[::1] forced = forced_a
    cdef double[::1] rewards = rewards_a
    cdef double[::1] probs = probs_a
    cdef double[::1] lam = lam_a
    cdef double[::1] tau = tau_a
    cdef double[:, ::1] obs_out = obs_out_a

    cdef int max_width = 1
    cdef int k
    for k in range(sizes.shape[0]):
        if sizes[k] > max_width:
            max_width = sizes[k]
    cdef double[::1] obs = np.zeros(n_obs)
    cdef double[::1] buf_a = np.zeros(max_width)
    cdef double[::1] buf_b = np.zeros(max_width)
    cdef double[::1] out = np.zeros(max_width)

    cdef double b2wk = endo[0], by = endo[1], d2wk = endo[2], dy = endo[3]
    cdef int count = 0, yday = 0, b_rem = budget
    cdef double t_scale = 1.0 / (H - 1) if H > 1 else 0.0
    cdef int t, j, a, a_eff, greedy
    cdef double p, ratio, z, lam_t, tau_t
    cdef bint is_forced

    with nogil:
        for t in range(H):
            obs[0] = base_obs[t, 0]
            obs[1] = base_obs[t, 1]
            obs[2] = base_obs[t, 2]
            obs[3] = base_obs[t, 3]
            obs[4] = count / <double>WINDOW
            obs[5] = yday
            ratio = b_rem / <double>(H - t)
            obs[6] = 1.0 if ratio > 1.0 else ratio
            obs[7] = t * t_scale
            for j in range(n_future):
                obs[N_BASE_OBS + j] = future[t, j]
            if record_obs:
                for j in range(n_obs):
                    obs_out[t, j] = obs[j]

            p = 0.0
            a = 0
            if mode == 0:
                a = 1 if intents[t] else 0
                p = a
            elif mode == 1:
                p = b_rem / <double>(H - t)
                a = 1 if uniforms[t, 0] < p else 0
            elif mode == 2 or mode == 3:
                _forward(obs, weights, sizes, act_code, buf_a, buf_b, out)
                p = 1.0 / (1.0 + exp(-out[0]))
                if mode == 2:
                    a = 1 if uniforms[t, 0] < p else 0
                else:
                    a = 1 if p > 0.5 else 0
            else:
                _forward(obs, weights, sizes, act_code, buf_a, buf_b, out)
                greedy = 1 if out[1] > out[0] else 0
                if uniforms[t, 0] < epsilon:
                    a = 1 if uniforms[t, 1] < 0.5 else 0
                else:
                    a = greedy
                p = (1.0 - epsilon) * greedy + epsilon * 0.5
            probs[t] = p
            attempted[t] = a

            is_forced = base_obs[t, 0] < threshold or b_rem <= 0
            forced[t] = 1 if is_forced else 0
            a_eff = 0 if is_forced else a
            effective[t] = a_eff

            lam_t = exp(lam_exo[t] + b2wk * (count / <double>WINDOW) + by * yday)
            tau_t = 1.0 / (1.0 + exp(-(tau_exo[t] + d2wk * (count / <double>WINDOW) + dy * yday)))
            lam[t] = lam_t
            tau[t] = tau_t
            rewards[t] = 1.0 - c2 * lam_t * (1.0 - a_eff * tau_t)

            b_rem = b_rem - a_eff
            count = count + a_eff
            if t - WINDOW >= 0:
                count = count - effective[t - WINDOW]
            yday = a_eff
    return (attempted_a, effective_a, rewards_a, probs_a, forced_a, lam_a, tau_a,
            obs_out_a if record_obs else None)
