"""Loss/gradient and scoring kernels for ComplEx and RotatE.

Entity tables are ``(n, 2d)`` float64 with real parts in the first ``d``
columns and imaginary parts in the last ``d``. ComplEx relation tables have
the same layout; RotatE relations are ``(n, d)`` phase angles.

Every kernel has an ``_nb`` loop version (compiled by numba when available)
and a ``_np`` vectorised version. The unsuffixed names dispatch on
``ctxgraph._accel.USE_NUMBA``. Gradient kernels accumulate into the ``g_ent``
/ ``g_rel`` buffers passed in and return the batch loss.

Losses, per positive ``i`` with ``K`` tail corruptions ``j``:

* ComplEx: ``softplus(-s_i) + mean_j softplus(s_ij)``, plus
  ``reg_weight * (N3 or L2 of h_i, r_i, t_i)``; averaged over the batch.
* RotatE: ``(softplus(d_i - margin) + sum_j w_ij softplus(margin - d_ij)) / 2``
  where ``d`` is the summed complex modulus distance and ``w`` the
  self-adversarial softmax of ``temperature * (margin - d_ij)``. The weights
  are treated as constants (no gradient flows through them).
"""
from __future__ import annotations

import math

import numpy as np

from .._accel import USE_NUMBA, njit

REG_N3 = 0
REG_L2 = 1

_CHUNK_ELEMS = 4_000_000  # bound on B*K*2d temporaries in the numpy path


# ----------------------------------------------------------------- helpers

@njit
def _softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = z / (1.0 + z)
    return out


def _chunks(batch: int, per_row: int):
    step = max(1, _CHUNK_ELEMS // max(per_row, 1))
    for a in range(0, batch, step):
        yield a, min(batch, a + step)


def _cmul_np(a, b, d):
    """Complex product of ``[re|im]`` arrays along the last axis."""
    are, aim = a[..., :d], a[..., d:]
    bre, bim = b[..., :d], b[..., d:]
    return np.concatenate([are * bre - aim * bim, are * bim + aim * bre], axis=-1)


def _rotation(phase):
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=-1)


# ----------------------------------------------------------------- ComplEx

@njit
def complex_loss_grad_nb(ent, rel, h, r, t, neg, reg_weight, reg_kind, g_ent, g_rel):
    B = h.shape[0]
    K = neg.shape[1]
    d = ent.shape[1] // 2
    inv_b = 1.0 / B
    inv_k = 1.0 / K if K > 0 else 0.0
    hr = np.empty(2 * d)
    ghr = np.empty(2 * d)
    loss = 0.0
    reg = 0.0
    for i in range(B):
        hi = h[i]
        ri = r[i]
        ti = t[i]
        for k in range(d):
            a = ent[hi, k]
            b = ent[hi, d + k]
            c = rel[ri, k]
            s = rel[ri, d + k]
            hr[k] = a * c - b * s
            hr[d + k] = a * s + b * c
            ghr[k] = 0.0
            ghr[d + k] = 0.0
        sc = 0.0
        for k in range(2 * d):
            sc += hr[k] * ent[ti, k]
        loss += _softplus(-sc)
        coef = -_sigmoid(-sc) * inv_b
        for k in range(2 * d):
            ghr[k] += coef * ent[ti, k]
            g_ent[ti, k] += coef * hr[k]
        for j in range(K):
            nj = neg[i, j]
            sc = 0.0
            for k in range(2 * d):
                sc += hr[k] * ent[nj, k]
            loss += _softplus(sc) * inv_k
            coef = _sigmoid(sc) * inv_k * inv_b
            for k in range(2 * d):
                ghr[k] += coef * ent[nj, k]
                g_ent[nj, k] += coef * hr[k]
        for k in range(d):
            a = ent[hi, k]
            b = ent[hi, d + k]
            c = rel[ri, k]
            s = rel[ri, d + k]
            gre = ghr[k]
            gim = ghr[d + k]
            g_ent[hi, k] += gre * c + gim * s
            g_ent[hi, d + k] += -gre * s + gim * c
            g_rel[ri, k] += gre * a + gim * b
            g_rel[ri, d + k] += -gre * b + gim * a
        if reg_weight != 0.0:
            lam = reg_weight * inv_b
            for which in range(3):
                for k in range(d):
                    if which == 0:
                        x_re = ent[hi, k]
                        x_im = ent[hi, d + k]
                    elif which == 1:
                        x_re = rel[ri, k]
                        x_im = rel[ri, d + k]
                    else:
                        x_re = ent[ti, k]
                        x_im = ent[ti, d + k]
                    if reg_kind == REG_N3:
                        m = math.sqrt(x_re * x_re + x_im * x_im)
                        reg += m * m * m
                        f = 3.0 * m * lam
                    else:
                        reg += x_re * x_re + x_im * x_im
                        f = 2.0 * lam
                    if which == 1:
                        g_rel[ri, k] += f * x_re
                        g_rel[ri, d + k] += f * x_im
                    elif which == 0:
                        g_ent[hi, k] += f * x_re
                        g_ent[hi, d + k] += f * x_im
                    else:
                        g_ent[ti, k] += f * x_re
                        g_ent[ti, d + k] += f * x_im
    return loss * inv_b + reg_weight * reg * inv_b


def complex_loss_grad_np(ent, rel, h, r, t, neg, reg_weight, reg_kind, g_ent, g_rel):
    B, K = neg.shape
    d = ent.shape[1] // 2
    total = 0.0
    for a, b in _chunks(B, (K + 1) * 2 * d):
        hh, rr, tt, nn = h[a:b], r[a:b], t[a:b], neg[a:b]
        H, R, T, N = ent[hh], rel[rr], ent[tt], ent[nn]
        hr = _cmul_np(H, R, d)
        pos = np.einsum("bd,bd->b", hr, T)
        negs = np.einsum("bkd,bd->bk", N, hr)
        total += _softplus_np(-pos).sum()
        if K:
            total += _softplus_np(negs).sum() / K
        c_pos = -_sigmoid_np(-pos) / B
        ghr = c_pos[:, None] * T
        np.add.at(g_ent, tt, c_pos[:, None] * hr)
        if K:
            c_neg = _sigmoid_np(negs) / (K * B)
            ghr += np.einsum("bk,bkd->bd", c_neg, N)
            np.add.at(g_ent, nn.ravel(), (c_neg[:, :, None] * hr[:, None, :]).reshape(-1, 2 * d))
        gre, gim = ghr[:, :d], ghr[:, d:]
        Hre, Him, Rre, Rim = H[:, :d], H[:, d:], R[:, :d], R[:, d:]
        np.add.at(g_ent, hh, np.concatenate([gre * Rre + gim * Rim, -gre * Rim + gim * Rre], axis=1))
        np.add.at(g_rel, rr, np.concatenate([gre * Hre + gim * Him, -gre * Him + gim * Hre], axis=1))
        if reg_weight:
            lam = reg_weight / B
            for X, table, idx in ((H, g_ent, hh), (R, g_rel, rr), (T, g_ent, tt)):
                m = np.sqrt(X[:, :d] ** 2 + X[:, d:] ** 2)
                if reg_kind == REG_N3:
                    total += reg_weight * (m ** 3).sum()
                    f = np.concatenate([3.0 * m, 3.0 * m], axis=1) * lam
                else:
                    total += reg_weight * (m ** 2).sum()
                    f = 2.0 * lam
                np.add.at(table, idx, f * X)
    return total / B


# ------------------------------------------------------------------ RotatE

@njit
def rotate_loss_grad_nb(ent, phase, h, r, t, neg, margin, temperature, weights, g_ent, g_phase):
    B = h.shape[0]
    K = neg.shape[1]
    d = phase.shape[1]
    given = weights.shape[0] == B and weights.shape[1] == K
    inv_b = 1.0 / B
    hr = np.empty(2 * d)
    ghr = np.empty(2 * d)
    dist = np.empty(K)
    w = np.empty(K)
    loss = 0.0
    for i in range(B):
        hi = h[i]
        ri = r[i]
        ti = t[i]
        for k in range(d):
            c = math.cos(phase[ri, k])
            s = math.sin(phase[ri, k])
            a = ent[hi, k]
            b = ent[hi, d + k]
            hr[k] = a * c - b * s
            hr[d + k] = a * s + b * c
            ghr[k] = 0.0
            ghr[d + k] = 0.0
        dp = 0.0
        for k in range(d):
            x = hr[k] - ent[ti, k]
            y = hr[d + k] - ent[ti, d + k]
            dp += math.sqrt(x * x + y * y)
        for j in range(K):
            nj = neg[i, j]
            acc = 0.0
            for k in range(d):
                x = hr[k] - ent[nj, k]
                y = hr[d + k] - ent[nj, d + k]
                acc += math.sqrt(x * x + y * y)
            dist[j] = acc
        if given:
            for j in range(K):
                w[j] = weights[i, j]
        elif K > 0:
            top = -1e300
            for j in range(K):
                v = temperature * (margin - dist[j])
                if v > top:
                    top = v
            z = 0.0
            for j in range(K):
                w[j] = math.exp(temperature * (margin - dist[j]) - top)
                z += w[j]
            for j in range(K):
                w[j] /= z
        li = _softplus(dp - margin)
        for j in range(K):
            li += w[j] * _softplus(margin - dist[j])
        loss += 0.5 * li
        # d loss / d distance, scaled by 1/2 and the batch mean
        coef = 0.5 * _sigmoid(dp - margin) * inv_b
        for k in range(d):
            x = hr[k] - ent[ti, k]
            y = hr[d + k] - ent[ti, d + k]
            m = math.sqrt(x * x + y * y)
            if m > 0.0:
                gx = coef * x / m
                gy = coef * y / m
                ghr[k] += gx
                ghr[d + k] += gy
                g_ent[ti, k] -= gx
                g_ent[ti, d + k] -= gy
        for j in range(K):
            nj = neg[i, j]
            coef = -0.5 * w[j] * _sigmoid(margin - dist[j]) * inv_b
            for k in range(d):
                x = hr[k] - ent[nj, k]
                y = hr[d + k] - ent[nj, d + k]
                m = math.sqrt(x * x + y * y)
                if m > 0.0:
                    gx = coef * x / m
                    gy = coef * y / m
                    ghr[k] += gx
                    ghr[d + k] += gy
                    g_ent[nj, k] -= gx
                    g_ent[nj, d + k] -= gy
        for k in range(d):
            c = math.cos(phase[ri, k])
            s = math.sin(phase[ri, k])
            gre = ghr[k]
            gim = ghr[d + k]
            g_ent[hi, k] += gre * c + gim * s
            g_ent[hi, d + k] += -gre * s + gim * c
            g_phase[ri, k] += -gre * hr[d + k] + gim * hr[k]
    return loss * inv_b


def rotate_weights_np(ent, phase, h, r, neg, margin, temperature):
    """Self-adversarial weights ``softmax_j(temperature * (margin - d_ij))``."""
    d = phase.shape[1]
    hr = _cmul_np(ent[h], _rotation(phase[r]), d)
    diff = hr[:, None, :] - ent[neg]
    dist = np.sqrt(diff[..., :d] ** 2 + diff[..., d:] ** 2).sum(-1)
    logits = temperature * (margin - dist)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def rotate_loss_grad_np(ent, phase, h, r, t, neg, margin, temperature, weights, g_ent, g_phase):
    B, K = neg.shape
    d = phase.shape[1]
    given = weights.shape == (B, K)
    total = 0.0
    for a, b in _chunks(B, (K + 1) * 2 * d):
        hh, rr, tt, nn = h[a:b], r[a:b], t[a:b], neg[a:b]
        H, T, N = ent[hh], ent[tt], ent[nn]
        rot = _rotation(phase[rr])
        hr = _cmul_np(H, rot, d)
        dpos_vec = hr - T
        mpos = np.sqrt(dpos_vec[:, :d] ** 2 + dpos_vec[:, d:] ** 2)
        dp = mpos.sum(1)
        dneg_vec = hr[:, None, :] - N
        mneg = np.sqrt(dneg_vec[..., :d] ** 2 + dneg_vec[..., d:] ** 2)
        dn = mneg.sum(-1)
        if given:
            w = weights[a:b]
        elif K:
            logits = temperature * (margin - dn)
            logits -= logits.max(axis=1, keepdims=True)
            w = np.exp(logits)
            w /= w.sum(axis=1, keepdims=True)
        else:
            w = np.zeros((b - a, 0))
        total += 0.5 * (_softplus_np(dp - margin).sum() + (w * _softplus_np(margin - dn)).sum())
        cp = 0.5 * _sigmoid_np(dp - margin) / B
        with np.errstate(invalid="ignore", divide="ignore"):
            upos = np.where(mpos > 0, 1.0 / mpos, 0.0)
            uneg = np.where(mneg > 0, 1.0 / mneg, 0.0)
        gpos = dpos_vec * np.concatenate([upos, upos], axis=1) * cp[:, None]
        cn = -0.5 * w * _sigmoid_np(margin - dn) / B
        gneg = dneg_vec * np.concatenate([uneg, uneg], axis=2) * cn[:, :, None]
        ghr = gpos + gneg.sum(1)
        np.add.at(g_ent, tt, -gpos)
        np.add.at(g_ent, nn.ravel(), -gneg.reshape(-1, 2 * d))
        c, s = rot[:, :d], rot[:, d:]
        gre, gim = ghr[:, :d], ghr[:, d:]
        np.add.at(g_ent, hh, np.concatenate([gre * c + gim * s, -gre * s + gim * c], axis=1))
        np.add.at(g_phase, rr, -gre * hr[:, d:] + gim * hr[:, :d])
    return total / B


# ----------------------------------------------------------------- scoring

@njit
def rotate_scores_nb(hr, ent):
    Q = hr.shape[0]
    n = ent.shape[0]
    d = ent.shape[1] // 2
    out = np.empty((Q, n))
    for q in range(Q):
        for e in range(n):
            acc = 0.0
            for k in range(d):
                x = hr[q, k] - ent[e, k]
                y = hr[q, d + k] - ent[e, d + k]
                acc += math.sqrt(x * x + y * y)
            out[q, e] = -acc
    return out


def rotate_scores_np(hr, ent):
    d = ent.shape[1] // 2
    out = np.empty((hr.shape[0], ent.shape[0]))
    for q in range(hr.shape[0]):
        diff = hr[q] - ent
        out[q] = -np.sqrt(diff[:, :d] ** 2 + diff[:, d:] ** 2).sum(1)
    return out


@njit
def filtered_ranks_nb(scores, gold, f_offsets, f_members):
    """1-based rank of ``gold[q]`` among all entities, ignoring other filter members.

    Ties are broken by entity index (lower index ranks first).
    """
    Q = scores.shape[0]
    n = scores.shape[1]
    out = np.empty(Q, dtype=np.int64)
    for q in range(Q):
        g = gold[q]
        sg = scores[q, g]
        better = 0
        for e in range(n):
            s = scores[q, e]
            if s > sg or (s == sg and e < g):
                better += 1
        for p in range(f_offsets[q], f_offsets[q + 1]):
            e = f_members[p]
            if e == g:
                continue
            s = scores[q, e]
            if s > sg or (s == sg and e < g):
                better -= 1
        out[q] = better + 1
    return out


def filtered_ranks_np(scores, gold, f_offsets, f_members):
    Q, n = scores.shape
    idx = np.arange(n)
    sg = scores[np.arange(Q), gold]
    ahead = (scores > sg[:, None]) | ((scores == sg[:, None]) & (idx[None, :] < gold[:, None]))
    better = ahead.sum(1)
    for q in range(Q):
        members = f_members[f_offsets[q]:f_offsets[q + 1]]
        members = members[members != gold[q]]
        better[q] -= ahead[q, members].sum()
    return better.astype(np.int64) + 1


if USE_NUMBA:
    complex_loss_grad = complex_loss_grad_nb
    rotate_loss_grad = rotate_loss_grad_nb
    rotate_scores = rotate_scores_nb
    filtered_ranks = filtered_ranks_nb
else:
    complex_loss_grad = complex_loss_grad_np
    rotate_loss_grad = rotate_loss_grad_np
    rotate_scores = rotate_scores_np
    filtered_ranks = filtered_ranks_np

NO_WEIGHTS = np.zeros((0, 0))
