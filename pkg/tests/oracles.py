"""Independent naive reference implementations used as test oracles.

Everything here is written as plain loops over scalars (or dense textbook
formulas), deliberately sharing no code with the package. Slow on purpose;
tests keep the shapes small.
"""

import math

import numpy as np


def conv2d_naive(x, k, stride=1, pad=0):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for nn in range(n):
        for ff in range(f):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for cc in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[nn, cc, y * stride + i, xx * stride + j] * k[ff, cc, i, j]
                    out[nn, ff, y, xx] = acc
    return out


def group_norm_naive(x, groups, gamma, z, eps=1e-5):
    n, c, h, w = x.shape
    gs = c // groups
    out = np.zeros_like(x, dtype=float)
    for nn in range(n):
        for g in range(groups):
            vals = [
                float(x[nn, cc, y, xx])
                for cc in range(g * gs, (g + 1) * gs)
                for y in range(h)
                for xx in range(w)
            ]
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            for cc in range(g * gs, (g + 1) * gs):
                for y in range(h):
                    for xx in range(w):
                        xhat = (float(x[nn, cc, y, xx]) - mu) / math.sqrt(var + eps)
                        out[nn, cc, y, xx] = gamma[cc] * xhat + z[cc]
    return out


def batch_norm_naive(x, gamma, beta, mean, var, eps=1e-5):
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=float)
    for nn in range(n):
        for cc in range(c):
            for y in range(h):
                for xx in range(w):
                    xhat = (float(x[nn, cc, y, xx]) - mean[cc]) / math.sqrt(var[cc] + eps)
                    out[nn, cc, y, xx] = gamma[cc] * xhat + beta[cc]
    return out


def softmax_naive(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    rows = x.reshape(-1, x.shape[-1])
    orows = out.reshape(-1, x.shape[-1])
    for r in range(rows.shape[0]):
        m = max(float(v) for v in rows[r])
        exps = [math.exp(float(v) - m) for v in rows[r]]
        s = sum(exps)
        for j in range(len(exps)):
            orows[r, j] = exps[j] / s
    return out


def cross_entropy_naive(logits, targets):
    logits = np.asarray(logits, dtype=float)
    total = 0.0
    for r in range(logits.shape[0]):
        m = max(float(v) for v in logits[r])
        lse = m + math.log(sum(math.exp(float(v) - m) for v in logits[r]))
        for j in range(logits.shape[1]):
            if targets[r, j] != 0:
                total += float(targets[r, j]) * (lse - float(logits[r, j]))
    return total / logits.shape[0]


def proxy_contrastive_naive(embeddings, labels, proxies, tau=0.1):
    n = embeddings.shape[0]
    total = 0.0
    for i in range(n):
        sims = [
            sum(float(embeddings[i, d]) * float(proxies[c, d]) for d in range(embeddings.shape[1])) / tau
            for c in range(proxies.shape[0])
        ]
        m = max(sims)
        lse = m + math.log(sum(math.exp(s - m) for s in sims))
        total += lse - sims[int(labels[i])]
    return total / n


def dft_power_naive(signal, fs, freqs_hz):
    """Dense DFT power of one complex series at arbitrary frequencies."""
    t = np.arange(len(signal)) / fs
    return np.array(
        [abs(sum(signal * np.exp(-2j * np.pi * f * t))) ** 2 for f in freqs_hz]
    )


def bilinear_resample_naive(src, out_h, out_w):
    """Align-corners bilinear resampling of a 2-D array."""
    h, w = src.shape
    out = np.zeros((out_h, out_w))
    for y in range(out_h):
        sy = y * (h - 1) / (out_h - 1) if out_h > 1 else 0.0
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for x in range(out_w):
            sx = x * (w - 1) / (out_w - 1) if out_w > 1 else 0.0
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[y, x] = (
                src[y0, x0] * (1 - fy) * (1 - fx)
                + src[y0, x1] * (1 - fy) * fx
                + src[y1, x0] * fy * (1 - fx)
                + src[y1, x1] * fy * fx
            )
    return out
