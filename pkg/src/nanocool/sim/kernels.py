"""Compiled inner loops. All state lives in caller-owned arrays so a run can be
split into chunks (fresh noise per chunk) without changing the result."""
import numpy as np
from numba import njit

# indices into the integer state vector of the loop kernel
STEP, RING_POS, CTRL, REC, UNSTABLE = 0, 1, 2, 3, 4


@njit(cache=True, nogil=True)
def free_chunk(xs, Phi, Lc, xi, out_x, out_v, start):
    """Uncontrolled axes stepped with the exact transition; writes samples from ``start``."""
    n = xi.shape[0]
    for k in range(n):
        for i in range(3):
            x = xs[i, 0]
            v = xs[i, 1]
            e0 = xi[k, i, 0]
            e1 = xi[k, i, 1]
            xs[i, 0] = Phi[i, 0, 0] * x + Phi[i, 0, 1] * v + Lc[i, 0, 0] * e0
            xs[i, 1] = Phi[i, 1, 0] * x + Phi[i, 1, 1] * v + Lc[i, 1, 0] * e0 + Lc[i, 1, 1] * e1
            out_x[i, start + k] = xs[i, 0]
            out_v[i, start + k] = xs[i, 1]


@njit(cache=True, nogil=True)
def loop_chunk(
    xs, Phi, Gam, Lc, xi, zeta, sig_adc, c_vm, routing, adc_lsb, adc_max,
    bq, bq_state, dl_buf, dl_pos, delays, G, ring, vcmd, Bact, u_scale,
    decim, dec_acc, state, rec_every, rec_t, rec_x, rec_v, rec_det, rec_u, last_det,
    acc, cnt, burn_steps, block_len, e_norm, e_bound,
):
    """Physics steps with the sampled-data controller in the loop.

    Per physics step: apply the delayed held command, take an ADC sample,
    propagate the exact transition. Every ``decim`` steps the averaged
    sample runs through the biquads, the delay lines and the gain matrix.
    """
    n = xi.shape[0]
    d = ring.shape[0]
    nst = bq.shape[1]
    nb = acc.shape[0]
    app = np.zeros(3)
    acc_v = np.zeros(3)
    filt = np.zeros(3)
    dly = np.zeros(3)
    for k in range(n):
        # held command delayed by the electronics
        if d > 0:
            rp = state[RING_POS]
            for c in range(3):
                app[c] = ring[rp, c]
                ring[rp, c] = vcmd[c]
            state[RING_POS] = (rp + 1) % d
        else:
            for c in range(3):
                app[c] = vcmd[c]
        for i in range(3):
            s = 0.0
            for c in range(3):
                s += Bact[i, c] * app[c]
            acc_v[i] = u_scale * s
        # ADC
        for c in range(3):
            v = c_vm[c] * xs[routing[c], 0] + sig_adc[c] * zeta[k, c]
            if adc_lsb > 0.0:
                if v > adc_max:
                    v = adc_max
                elif v < -adc_max:
                    v = -adc_max
                v = np.round(v / adc_lsb) * adc_lsb
            dec_acc[c] += v
        # exact propagation
        energy = 0.0
        for i in range(3):
            x = xs[i, 0]
            vv = xs[i, 1]
            e0 = xi[k, i, 0]
            e1 = xi[k, i, 1]
            a = acc_v[i]
            xs[i, 0] = Phi[i, 0, 0] * x + Phi[i, 0, 1] * vv + Gam[i, 0] * a + Lc[i, 0, 0] * e0
            xs[i, 1] = Phi[i, 1, 0] * x + Phi[i, 1, 1] * vv + Gam[i, 1] * a + Lc[i, 1, 0] * e0 + Lc[i, 1, 1] * e1
            energy += xs[i, 0] * xs[i, 0] * e_norm[i, 0] + xs[i, 1] * xs[i, 1] * e_norm[i, 1]
        step = state[STEP]
        if step >= burn_steps:
            b = (step - burn_steps) // block_len
            if b >= nb:
                b = nb - 1
            for i in range(3):
                acc[b, i, 0] += xs[i, 0] * xs[i, 0]
                acc[b, i, 1] += xs[i, 1] * xs[i, 1]
            cnt[b] += 1
        state[STEP] = step + 1
        if energy > e_bound or not np.isfinite(energy):
            state[UNSTABLE] = 1
            return
        if (step + 1) % decim == 0:
            for c in range(3):
                y = dec_acc[c] / decim
                dec_acc[c] = 0.0
                last_det[c] = y
                for s_ in range(nst):
                    b0 = bq[c, s_, 0]
                    out = b0 * y + bq_state[c, s_, 0]
                    bq_state[c, s_, 0] = bq[c, s_, 1] * y - bq[c, s_, 3] * out + bq_state[c, s_, 1]
                    bq_state[c, s_, 1] = bq[c, s_, 2] * y - bq[c, s_, 4] * out
                    y = out
                filt[c] = y
                nd = delays[c]
                if nd == 0:
                    dly[c] = y
                else:
                    p = dl_pos[c]
                    dly[c] = dl_buf[c, p]
                    dl_buf[c, p] = y
                    dl_pos[c] = (p + 1) % nd
            for r in range(3):
                s = 0.0
                for c in range(3):
                    s += G[r, c] * filt[c] + G[r, 3 + c] * dly[c]
                vcmd[r] = s
            ctrl = state[CTRL] + 1
            state[CTRL] = ctrl
            if ctrl % rec_every == 0:
                j = state[REC]
                if j < rec_x.shape[1]:
                    rec_t[j] = (step + 1)
                    for i in range(3):
                        rec_x[i, j] = xs[i, 0]
                        rec_v[i, j] = xs[i, 1]
                        rec_det[i, j] = last_det[i]
                        rec_u[i, j] = vcmd[i]
                    state[REC] = j + 1


@njit(cache=True, nogil=True)
def delay_chunk(xs, Phi, Gam, Lc, xi, zeta, hist, state, coupling, noise_amp, acc, cnt, burn_steps, block_len):
    """Single axis with force ``coupling * (x(t - D dt) + noise)`` held over each step.

    ``hist`` is a ring of the last ``D`` positions; ``state`` holds
    ``[step, ring_pos]``.
    """
    n = xi.shape[0]
    D = hist.shape[0]
    nb = acc.shape[0]
    for k in range(n):
        if D > 0:
            p = state[1]
            xd = hist[p]
            hist[p] = xs[0]
            state[1] = (p + 1) % D
        else:
            xd = xs[0]
        a = coupling * (xd + noise_amp * zeta[k])
        x = xs[0]
        v = xs[1]
        xs[0] = Phi[0, 0] * x + Phi[0, 1] * v + Gam[0] * a + Lc[0, 0] * xi[k, 0]
        xs[1] = Phi[1, 0] * x + Phi[1, 1] * v + Gam[1] * a + Lc[1, 0] * xi[k, 0] + Lc[1, 1] * xi[k, 1]
        step = state[0]
        if step >= burn_steps:
            b = (step - burn_steps) // block_len
            if b >= nb:
                b = nb - 1
            acc[b, 0] += xs[0] * xs[0]
            acc[b, 1] += xs[1] * xs[1]
            cnt[b] += 1
        state[0] = step + 1


@njit(cache=True, nogil=True)
def lqg_chunk(x, xpri, Ad, Bd, Cd, L, K, Lw, r_std, xi, zeta, acc, cnt, state, burn_steps):
    """Plant plus a-posteriori Kalman filter and ``u = -K x_hat`` at the controller rate."""
    n = xi.shape[0]
    ns = Ad.shape[0]
    nu = Bd.shape[1]
    ny = Cd.shape[0]
    y = np.zeros(ny)
    innov = np.zeros(ny)
    xpost = np.zeros(ns)
    u = np.zeros(nu)
    xn = np.zeros(ns)
    for k in range(n):
        for j in range(ny):
            s = 0.0
            sp = 0.0
            for i in range(ns):
                s += Cd[j, i] * x[i]
                sp += Cd[j, i] * xpri[i]
            y[j] = s + r_std[j] * zeta[k, j]
            innov[j] = y[j] - sp
        for i in range(ns):
            s = xpri[i]
            for j in range(ny):
                s += L[i, j] * innov[j]
            xpost[i] = s
        for j in range(nu):
            s = 0.0
            for i in range(ns):
                s -= K[j, i] * xpost[i]
            u[j] = s
        for i in range(ns):
            s = 0.0
            sh = 0.0
            for m in range(ns):
                s += Ad[i, m] * x[m]
                sh += Ad[i, m] * xpost[m]
            for j in range(nu):
                s += Bd[i, j] * u[j]
                sh += Bd[i, j] * u[j]
            for m in range(ns):
                s += Lw[i, m] * xi[k, m]
            xn[i] = s
            xpri[i] = sh
        for i in range(ns):
            x[i] = xn[i]
        step = state[0]
        if step >= burn_steps:
            for i in range(ns):
                acc[i] += x[i] * x[i]
            cnt[0] += 1
        state[0] = step + 1
