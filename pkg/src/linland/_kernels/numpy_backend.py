"""Pure-numpy reference implementations of the hot kernels.

Kept in lockstep with numba_backend; the test suite compares the two.
"""

from __future__ import annotations

import numpy as np

STATUS_CONVERGED = 0
STATUS_EXHAUSTED = 1
STATUS_UNDERFLOW = 2
STATUS_DIVERGED = 3


def _forward(theta, widths, A):
    # acts[i] = W_i ... W_1 @ A for i >= 1, acts[0] = A
    H = widths.shape[0] - 1
    acts = [A]
    off = 0
    for i in range(H):
        r = widths[i + 1]
        c = widths[i]
        W = theta[off:off + r * c].reshape(r, c)
        acts.append(W @ acts[-1])
        off += r * c
    return acts


def product_flat(theta, widths):
    eye = np.eye(widths[0])
    return _forward(theta, widths, eye)[-1]


def loss_flat(theta, widths, X, Y):
    E = _forward(theta, widths, X)[-1] - Y
    return 0.5 * float(np.sum(E * E))


def grad_flat(theta, widths, X, Y):
    H = widths.shape[0] - 1
    acts = _forward(theta, widths, X)
    E = acts[H] - Y
    g = np.empty_like(theta)
    B = np.eye(widths[H])  # suffix product W_H ... W_{i+1}, shape d_H x d_i
    off = theta.shape[0]
    for i in range(H, 0, -1):
        r = widths[i]
        c = widths[i - 1]
        off -= r * c
        blk = (B.T @ E) @ acts[i - 1].T
        g[off:off + r * c] = blk.ravel()
        if i > 1:
            B = B @ theta[off:off + r * c].reshape(r, c)
    return g


def gd_chunk(theta, widths, X, Y, fixed, eta, grad_tol, max_steps,
             shrink, grow, armijo, loss_cap, rec_loss, rec_gn, record):
    """Run up to max_steps gradient descent iterations.

    Returns (theta, steps_done, loss, grad_norm, eta, status).
    """
    theta = theta.copy()
    f = loss_flat(theta, widths, X, Y)
    steps = 0
    status = STATUS_EXHAUSTED
    gn = 0.0
    for _ in range(max_steps):
        g = grad_flat(theta, widths, X, Y)
        gsq = float(np.sum(g * g))
        gn = np.sqrt(gsq)
        if record:
            rec_loss[steps] = f
            rec_gn[steps] = gn
        if gn <= grad_tol:
            status = STATUS_CONVERGED
            break
        if fixed:
            theta = theta - eta * g
            f = loss_flat(theta, widths, X, Y)
            steps += 1
            if not np.isfinite(f) or f > loss_cap:
                status = STATUS_DIVERGED
                break
        else:
            eta_try = eta
            accepted = False
            while eta_try > 1e-300:
                cand = theta - eta_try * g
                f_new = loss_flat(cand, widths, X, Y)
                need = armijo * eta_try * gsq
                if need < 8.9e-16 * (1.0 + abs(f)):
                    # the decrease quantum is below the loss's fp resolution:
                    # every representable f-change is rounding noise there, so
                    # bound the noise to a few ulps and demand strict
                    # gradient-norm progress, which stays resolvable near zero
                    ok = False
                    if f_new <= f + 3.6e-15 * (1.0 + abs(f)):
                        g_new = grad_flat(cand, widths, X, Y)
                        gsq_new = 0.0
                        for kk in range(g_new.shape[0]):
                            gsq_new += g_new[kk] * g_new[kk]
                        ok = gsq_new < gsq
                else:
                    ok = f_new <= f - need
                if ok:
                    theta = cand
                    f = f_new
                    eta = min(eta_try * grow, 1e8)
                    accepted = True
                    break
                eta_try *= shrink
            if not accepted:
                status = STATUS_UNDERFLOW
                break
            steps += 1
    return theta, steps, f, gn, eta, status


def masked_loss_flat(theta, widths, Y, mask):
    R = product_flat(theta, widths)
    E = (R - Y) * mask
    return 0.5 * float(np.sum(E * E))


def masked_grad_flat(theta, widths, Y, mask):
    H = widths.shape[0] - 1
    eye = np.eye(widths[0])
    acts = _forward(theta, widths, eye)
    E = (acts[H] - Y) * mask
    g = np.empty_like(theta)
    B = np.eye(widths[H])
    off = theta.shape[0]
    for i in range(H, 0, -1):
        r = widths[i]
        c = widths[i - 1]
        off -= r * c
        blk = (B.T @ E) @ acts[i - 1].T
        g[off:off + r * c] = blk.ravel()
        if i > 1:
            B = B @ theta[off:off + r * c].reshape(r, c)
    return g


def masked_gd_chunk(theta, widths, Y, mask, fixed, eta, grad_tol, max_steps,
                    shrink, grow, armijo, loss_cap, rec_loss, rec_gn, record):
    theta = theta.copy()
    f = masked_loss_flat(theta, widths, Y, mask)
    steps = 0
    status = STATUS_EXHAUSTED
    gn = 0.0
    for _ in range(max_steps):
        g = masked_grad_flat(theta, widths, Y, mask)
        gsq = float(np.sum(g * g))
        gn = np.sqrt(gsq)
        if record:
            rec_loss[steps] = f
            rec_gn[steps] = gn
        if gn <= grad_tol:
            status = STATUS_CONVERGED
            break
        if fixed:
            theta = theta - eta * g
            f = masked_loss_flat(theta, widths, Y, mask)
            steps += 1
            if not np.isfinite(f) or f > loss_cap:
                status = STATUS_DIVERGED
                break
        else:
            eta_try = eta
            accepted = False
            while eta_try > 1e-300:
                cand = theta - eta_try * g
                f_new = masked_loss_flat(cand, widths, Y, mask)
                need = armijo * eta_try * gsq
                if need < 8.9e-16 * (1.0 + abs(f)):
                    # the decrease quantum is below the loss's fp resolution:
                    # every representable f-change is rounding noise there, so
                    # bound the noise to a few ulps and demand strict
                    # gradient-norm progress, which stays resolvable near zero
                    ok = False
                    if f_new <= f + 3.6e-15 * (1.0 + abs(f)):
                        g_new = masked_grad_flat(cand, widths, Y, mask)
                        gsq_new = 0.0
                        for kk in range(g_new.shape[0]):
                            gsq_new += g_new[kk] * g_new[kk]
                        ok = gsq_new < gsq
                else:
                    ok = f_new <= f - need
                if ok:
                    theta = cand
                    f = f_new
                    eta = min(eta_try * grow, 1e8)
                    accepted = True
                    break
                eta_try *= shrink
            if not accepted:
                status = STATUS_UNDERFLOW
                break
            steps += 1
    return theta, steps, f, gn, eta, status
