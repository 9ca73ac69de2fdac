"""Independent reference implementations used only by the tests.

None of these share code with the package: brute-force enumeration for CTC,
an O(N^2) DFT for the filterbank, the textbook DCT-II sum, a memoized
recursive edit distance, and central finite differences.
"""

from __future__ import annotations

import functools
import itertools
import math

import numpy as np
import torch


def collapse(path, blank=0):
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def ctc_enumeration_loss(probs: np.ndarray, target, blank: int = 0) -> float:
    """-log of the summed probability of every length-T path collapsing to ``target``."""
    t, v = probs.shape
    total = 0.0
    for path in itertools.product(range(v), repeat=t):
        if collapse(path, blank) == list(target):
            total += float(np.prod([probs[i, k] for i, k in enumerate(path)]))
    return -math.log(total)


def hz_to_mel(f):
    return 1127.0 * math.log(1.0 + f / 700.0)


def mel_to_hz(m):
    return 700.0 * (math.exp(m / 1127.0) - 1.0)


def fbank_direct_dft(x, sr=16000, win=400, hop=160, nfft=512, n_mels=80, preemph=0.97, floor=1e-10, low=20.0):
    """Log-Mel energies by the literal definitions, with an explicit DFT sum."""
    x = [float(v) for v in x]
    y = [x[0]] + [x[n] - preemph * x[n - 1] for n in range(1, len(x))]
    n_frames = 1 + (len(y) - win) // hop
    window = [0.54 - 0.46 * math.cos(2 * math.pi * n / (win - 1)) for n in range(win)]
    n_bins = nfft // 2 + 1
    # DFT matrix over the zero-padded frame; only the first ``win`` samples are nonzero.
    k = np.arange(n_bins)[:, None]
    n = np.arange(win)[None, :]
    cos_m = np.cos(2 * np.pi * k * n / nfft)
    sin_m = np.sin(2 * np.pi * k * n / nfft)
    lo, hi = hz_to_mel(low), hz_to_mel(sr / 2)
    edges = [mel_to_hz(lo + (hi - lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    weights = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        for b in range(n_bins):
            f = b * sr / nfft
            if left < f <= center:
                weights[m, b] = (f - left) / (center - left)
            elif center < f < right:
                weights[m, b] = (right - f) / (right - center)
    out = np.zeros((n_frames, n_mels))
    for t in range(n_frames):
        frame = np.array([y[t * hop + i] * window[i] for i in range(win)])
        re = cos_m @ frame
        im = -(sin_m @ frame)
        power = re ** 2 + im ** 2
        out[t] = np.log(np.maximum(weights @ power, floor))
    return out


def dct2_ortho(v):
    n = len(v)
    out = []
    for k in range(n):
        s = sum(v[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        out.append(scale * s)
    return np.array(out)


def edit_distance(a, b):
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def central_fd_grad(fn, param: torch.Tensor, indices, eps: float = 1e-6):
    """Finite-difference derivative of scalar ``fn()`` w.r.t. ``param`` at flat ``indices``."""
    flat = param.data.view(-1)
    out = []
    for i in indices:
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(fn())
        flat[i] = orig - eps
        down = float(fn())
        flat[i] = orig
        out.append((up - down) / (2 * eps))
    return np.array(out)


def assert_grad_matches(fn, params, n_per_param: int = 4, rtol: float = 1e-4, atol: float = 1e-8, seed: int = 0, floor: float = 1e-6):
    """Compare autograd with central differences on a few entries of each parameter.

    Entry-wise criterion: ``|g_auto - g_fd| <= atol + rtol * max(|g_auto|, |g_fd|)``.
    Returns the worst relative error over entries whose magnitude exceeds
    ``floor``; smaller entries (directions a normalization layer makes exactly
    flat) are held to the absolute ``atol`` alone.
    """
    rng = np.random.default_rng(seed)
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        idx = rng.choice(p.numel(), size=min(n_per_param, p.numel()), replace=False)
        with torch.no_grad():
            fd = central_fd_grad(fn, p, idx)
        auto = g.reshape(-1)[idx].detach().numpy()
        err = np.abs(auto - fd)
        bound = atol + rtol * np.maximum(np.abs(auto), np.abs(fd))
        assert np.all(err <= bound), f"grad mismatch: auto={auto} fd={fd}"
        mag = np.maximum(np.abs(auto), np.abs(fd))
        big = mag > floor
        if big.any():
            worst = max(worst, float(np.max(err[big] / mag[big])))
    return worst
