"""Straight-line reference implementations used as test oracles.

Everything here is plain Python float arithmetic (double precision) over
nested loops, deliberately independent of the vectorized torch/numpy code.
"""
import math

import numpy as np


def erf_gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


# ---------------------------------------------------------------- norms

def norm_loop(z, kind, groups, eps):
    """Normalize z [N, C, H, W] (nested lists via numpy indexing) per kind."""
    z = np.asarray(z, dtype=np.float64)
    n, c, h, w = z.shape
    out = np.zeros_like(z)
    if kind == "group":
        per = c // groups
        for i in range(n):
            for g in range(groups):
                vals = [z[i, ch, y, x] for ch in range(g * per, (g + 1) * per) for y in range(h) for x in range(w)]
                mean = sum(vals) / len(vals)
                var = sum((v - mean) ** 2 for v in vals) / len(vals)
                for ch in range(g * per, (g + 1) * per):
                    for y in range(h):
                        for x in range(w):
                            out[i, ch, y, x] = (z[i, ch, y, x] - mean) / math.sqrt(var + eps)
    else:
        for i in range(n):
            for y in range(h):
                for x in range(w):
                    vals = [z[i, ch, y, x] for ch in range(c)]
                    mean = sum(vals) / c
                    var = sum((v - mean) ** 2 for v in vals) / c
                    for ch in range(c):
                        out[i, ch, y, x] = (z[i, ch, y, x] - mean) / math.sqrt(var + eps)
    return out


def adjustable_norm_loop(z, gamma, beta, gamma0, kind, groups, eps):
    """gamma * Norm(z) + beta + gamma0 * z, element by element."""
    z = np.asarray(z, dtype=np.float64)
    nz = norm_loop(z, kind, groups, eps)
    gamma0 = np.broadcast_to(np.asarray(gamma0, dtype=np.float64), (z.shape[1],))
    out = np.zeros_like(z)
    n, c, h, w = z.shape
    for i in range(n):
        for ch in range(c):
            for y in range(h):
                for x in range(w):
                    out[i, ch, y, x] = gamma[ch] * nz[i, ch, y, x] + beta[ch] + gamma0[ch] * z[i, ch, y, x]
    return out


# ---------------------------------------------------------------- adapter

def adapter_loop(z0, ln_gamma, ln_beta, eps, w0, w_down, b_down, w_dw, w_up, b_up, act=erf_gelu):
    """z0 + W_up act(z_down + dw5x5(z_down)), z_down = W_down (w0 LN(z0)).

    Shapes: z0 [F, C, H, W]; w_down [R, C]; w_dw [R, k, k]; w_up [C, R].
    Returns (output, pre-activation f).
    """
    z0 = np.asarray(z0, dtype=np.float64)
    f_, c, h, w = z0.shape
    r = len(b_down)
    k = w_dw.shape[-1]
    pad = k // 2
    ln = norm_loop(z0, "layer", 1, eps)
    z_norm = np.zeros_like(z0)
    for i in range(f_):
        for ch in range(c):
            for y in range(h):
                for x in range(w):
                    z_norm[i, ch, y, x] = w0 * (ln_gamma[ch] * ln[i, ch, y, x] + ln_beta[ch])
    z_down = np.zeros((f_, r, h, w))
    for i in range(f_):
        for o in range(r):
            for y in range(h):
                for x in range(w):
                    s = b_down[o]
                    for ch in range(c):
                        s += w_down[o, ch] * z_norm[i, ch, y, x]
                    z_down[i, o, y, x] = s
    pre = np.zeros_like(z_down)
    for i in range(f_):
        for o in range(r):
            for y in range(h):
                for x in range(w):
                    s = 0.0
                    for dy in range(k):
                        for dx in range(k):
                            yy, xx = y + dy - pad, x + dx - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                s += w_dw[o, dy, dx] * z_down[i, o, yy, xx]
                    pre[i, o, y, x] = z_down[i, o, y, x] + s
    out = np.zeros_like(z0)
    for i in range(f_):
        for ch in range(c):
            for y in range(h):
                for x in range(w):
                    s = b_up[ch]
                    for o in range(r):
                        s += w_up[ch, o] * act(pre[i, o, y, x])
                    out[i, ch, y, x] = z0[i, ch, y, x] + s
    return out, pre


# ---------------------------------------------------------------- loss

def huber_scalar(r, delta):
    a = abs(r)
    return 0.5 * r * r if a <= delta else delta * (a - 0.5 * delta)


def huber_grad_scalar(r, delta):
    return r if abs(r) <= delta else delta * math.copysign(1.0, r)


# ---------------------------------------------------------------- metrics

def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def clip_frame_loop(embed, frames):
    vals = [cosine(embed(frames[t]), embed(frames[t + 1])) for t in range(len(frames) - 1)]
    return sum(vals) / len(vals)


def clip_text_loop(embed_frame, text_vec, frames):
    vals = [cosine(embed_frame(fr), text_vec) for fr in frames]
    return sum(vals) / len(vals)


def interpolation_loop(frames, cap=99.0):
    frames = np.asarray(frames, dtype=np.float64)
    f, h, w, c = frames.shape
    abs_sum, count, psnrs = 0.0, 0, []
    for t in range(1, f - 1):
        sq = 0.0
        for y in range(h):
            for x in range(w):
                for ch in range(c):
                    p = 0.5 * (frames[t - 1, y, x, ch] + frames[t + 1, y, x, ch])
                    e = p - frames[t, y, x, ch]
                    abs_sum += abs(e)
                    sq += e * e
                    count += 1
        mse = sq / (h * w * c)
        psnrs.append(cap if mse == 0 else min(cap, 10.0 * math.log10(1.0 / mse)))
    return abs_sum / count, sum(psnrs) / len(psnrs)


def bilinear_loop(img, y, x):
    """Sample img [H, W, C] at real (y, x); returns (values, valid)."""
    h, w, c = img.shape
    if not (0.0 <= y <= h - 1 and 0.0 <= x <= w - 1):
        return [0.0] * c, False
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    wy, wx = y - y0, x - x0
    vals = []
    for ch in range(c):
        v = ((1 - wy) * (1 - wx) * img[y0, x0, ch] + (1 - wy) * wx * img[y0, x1, ch]
             + wy * (1 - wx) * img[y1, x0, ch] + wy * wx * img[y1, x1, ch])
        vals.append(v)
    return vals, True


def warping_loop(flows, edited):
    """flows[t] [H, W, 2] (dx, dy) maps grid of frame t+1 into frame t."""
    edited = np.asarray(edited, dtype=np.float64)
    f, h, w, c = edited.shape
    errs = []
    for t in range(f - 1):
        sq, n = 0.0, 0
        for y in range(h):
            for x in range(w):
                dx, dy = flows[t][y, x]
                vals, ok = bilinear_loop(edited[t], y + dy, x + dx)
                if not ok:
                    continue
                for ch in range(c):
                    e = vals[ch] - edited[t + 1, y, x, ch]
                    sq += e * e
                    n += 1
        if n:
            errs.append(sq / n)
    return sum(errs) / len(errs) if errs else 0.0


def psnr_loop(mse, cap=99.0):
    return cap if mse == 0 else min(cap, 10.0 * math.log10(1.0 / mse))
