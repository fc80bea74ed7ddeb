"""Independent reference implementations used by the tests.

Everything here is plain Python/numpy loops; nothing calls into vidpred
except to read frozen weights.
"""
import itertools
import math

import numpy as np
from skimage.metrics import structural_similarity

EPS = 1e-10


def mae(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return sum(abs(float(x) - float(y)) for x, y in zip(a, b)) / a.size


def hinge_d(real, fake):
    real, fake = np.ravel(real), np.ravel(fake)
    return (sum(max(0.0, 1 - float(r)) for r in real) / real.size
            + sum(max(0.0, 1 + float(f)) for f in fake) / fake.size)


def hinge_g(fake):
    fake = np.ravel(fake)
    return -sum(float(f) for f in fake) / fake.size


def feature_distance(fa_list, fb_list):
    """Per-sample sum over blocks of the site-averaged squared distance of unit vectors."""
    n = fa_list[0].shape[0]
    out = np.zeros(n)
    for fa, fb in zip(fa_list, fb_list):
        _, c, h, w = fa.shape
        for b in range(n):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    va, vb = fa[b, :, i, j], fb[b, :, i, j]
                    na = math.sqrt(sum(float(v) * float(v) for v in va)) + EPS
                    nb = math.sqrt(sum(float(v) * float(v) for v in vb)) + EPS
                    acc += sum((float(va[k]) / na - float(vb[k]) / nb) ** 2 for k in range(c))
            out[b] += acc / (h * w)
    return out


def conv3x3(x, w, bias):
    """Zero-padded stride-1 3x3 convolution by explicit loops; ``x (C, H, W)``."""
    c_out, c_in = w.shape[:2]
    _, h, wd = x.shape
    xp = np.zeros((c_in, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    out = np.empty((c_out, h, wd))
    for o, i, j in itertools.product(range(c_out), range(h), range(wd)):
        out[o, i, j] = bias[o] + float(np.sum(w[o] * xp[:, i:i + 3, j:j + 3]))
    return out


def avg_pool2(x):
    c, h, w = x.shape
    return x[:, :h - h % 2, :w - w % 2].reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def stub_features(x, blocks):
    """``blocks`` is a list of ((w1, b1), (w2, b2)) float64 arrays; ``x (3, H, W)``."""
    feats = []
    h = np.asarray(x, np.float64) - 0.5
    for k, ((w1, b1), (w2, b2)) in enumerate(blocks):
        if k:
            h = avg_pool2(h)
        h = np.maximum(conv3x3(h, w1, b1), 0)
        h = np.maximum(conv3x3(h, w2, b2), 0)
        feats.append(h)
    return feats


def stub_weights(backbone):
    out = []
    for blk in backbone.blocks:
        c1, c2 = blk[0], blk[2]
        out.append(((c1.weight.detach().double().numpy(), c1.bias.detach().double().numpy()),
                    (c2.weight.detach().double().numpy(), c2.bias.detach().double().numpy())))
    return out


def perceptual_stub(pred, target, blocks):
    """Mean over samples of the stub-feature distance, all computed with loops."""
    fa = [stub_features(p, blocks) for p in pred]
    fb = [stub_features(t, blocks) for t in target]
    n_blocks = len(blocks)
    per = feature_distance([np.stack([f[k] for f in fa]) for k in range(n_blocks)],
                           [np.stack([f[k] for f in fb]) for k in range(n_blocks)])
    return float(per.mean()), per


def pixel_shuffle(x, r):
    """Channel->space shuffle of ``(B, C*r*r, T, H, W)`` by enumerating outputs."""
    b, cr, t, h, w = x.shape
    c = cr // (r * r)
    out = np.empty((b, c, t, h * r, w * r), x.dtype)
    for bi, ci, ti, yi, xi in itertools.product(range(b), range(c), range(t), range(h * r), range(w * r)):
        src = ci * r * r + (yi % r) * r + (xi % r)
        out[bi, ci, ti, yi, xi] = x[bi, src, ti, yi // r, xi // r]
    return out


def ssim(x, y):
    """scikit-image SSIM with the Gaussian-window / population-covariance convention."""
    return structural_similarity(np.asarray(x, np.float64), np.asarray(y, np.float64), gaussian_weights=True,
                                 sigma=1.5, use_sample_covariance=False, data_range=1.0, channel_axis=0)


def rel_close(a, b, tol):
    return abs(a - b) <= tol * max(abs(a), abs(b), 1e-300)


def fd_check(fn, x, n=8, h=1e-6, tol=1e-4, seed=0):
    """Largest relative error between autograd and central differences over ``n`` coordinates."""
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.clone()
    rng = np.random.default_rng(seed)
    flat = x.detach().view(-1)
    worst = 0.0
    for i in rng.choice(flat.numel(), size=min(n, flat.numel()), replace=False):
        xp, xm = flat.clone(), flat.clone()
        xp[i] += h
        xm[i] -= h
        fd = (fn(xp.view_as(x)).item() - fn(xm.view_as(x)).item()) / (2 * h)
        an = grad.view(-1)[i].item()
        scale = max(abs(fd), abs(an))
        err = abs(fd - an) / scale if scale > 1e-12 else abs(fd - an)
        worst = max(worst, err)
    return worst
