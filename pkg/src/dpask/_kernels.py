"""Sample-by-sample adaptive filter loops (numba)."""
import numpy as np
from numba import njit


@njit(cache=True)
def mimo_da_train(x, w, pos, tgt, grp, mu, epochs, sps):
    """Data-aided LMS for a 2x2 butterfly with per-block carrier phase removal.

    x    : (2, L) complex input at ``sps`` samples/symbol (circular)
    w    : (2, 2, T) complex taps, updated in place
    pos  : (2, K) symbol indices of training symbols per output
    tgt  : (2, K) real targets
    grp  : (2, K) block id per training symbol (blocks are contiguous runs)
    Returns the per-epoch mean squared error.
    """
    n_taps = w.shape[2]
    c = (n_taps - 1) // 2
    L = x.shape[1]
    K = pos.shape[1]
    mse = np.zeros(epochs)
    for ep in range(epochs):
        acc = 0.0
        for p in range(2):
            start = 0
            while start < K:
                stop = start
                while stop < K and grp[p, stop] == grp[p, start]:
                    stop += 1
                # carrier phase of this block under the current taps
                corr = 0.0 + 0.0j
                for i in range(start, stop):
                    base = pos[p, i] * sps - c
                    y = 0.0 + 0.0j
                    for q in range(2):
                        for t in range(n_taps):
                            y += w[p, q, t] * x[q, (base + t) % L]
                    corr += y * tgt[p, i]
                rot = corr / abs(corr) if abs(corr) > 0 else 1.0 + 0.0j
                for i in range(start, stop):
                    base = pos[p, i] * sps - c
                    y = 0.0 + 0.0j
                    for q in range(2):
                        for t in range(n_taps):
                            y += w[p, q, t] * x[q, (base + t) % L]
                    e = tgt[p, i] * rot - y
                    acc += e.real * e.real + e.imag * e.imag
                    for q in range(2):
                        for t in range(n_taps):
                            w[p, q, t] += mu * e * np.conj(x[q, (base + t) % L])
                start = stop
        mse[ep] = acc / (2 * K)
    return mse


@njit(cache=True)
def mimo_apply(x, w, n_sym, sps):
    n_taps = w.shape[2]
    c = (n_taps - 1) // 2
    L = x.shape[1]
    y = np.zeros((2, n_sym), dtype=np.complex128)
    for n in range(n_sym):
        base = n * sps - c
        for p in range(2):
            acc = 0.0 + 0.0j
            for q in range(2):
                for t in range(n_taps):
                    acc += w[p, q, t] * x[q, (base + t) % L]
            y[p, n] = acc
    return y


@njit(cache=True)
def _nearest(v, levels):
    best = levels[0]
    bd = abs(v - best)
    for i in range(1, levels.size):
        d = abs(v - levels[i])
        if d < bd:
            bd = d
            best = levels[i]
    return best


@njit(cache=True)
def dd_lms_4x4(x, h, levels, mu, passes, ref, known):
    """Decision-directed real 4x4 LMS at one sample per symbol (circular).

    Targets are ``[dec(I_x), 0, dec(I_y), 0]``; where ``known[p, n]`` is set
    the in-phase target is ``ref[p, n]`` instead of a decision. Returns the
    output of the final pass and the per-symbol squared error of every pass.
    """
    n_taps = h.shape[2]
    c = (n_taps - 1) // 2
    N = x.shape[1]
    out = np.zeros((4, N))
    err = np.zeros((passes, N))
    e = np.zeros(4)
    for ps in range(passes):
        for n in range(N):
            for k in range(4):
                acc = 0.0
                for j in range(4):
                    for t in range(n_taps):
                        acc += h[k, j, t] * x[j, (n + t - c) % N]
                out[k, n] = acc
            t0 = ref[0, n] if known[0, n] else _nearest(out[0, n], levels)
            t2 = ref[1, n] if known[1, n] else _nearest(out[2, n], levels)
            e[0] = t0 - out[0, n]
            e[1] = -out[1, n]
            e[2] = t2 - out[2, n]
            e[3] = -out[3, n]
            err[ps, n] = e[0] * e[0] + e[1] * e[1] + e[2] * e[2] + e[3] * e[3]
            for k in range(4):
                g = mu * e[k]
                for j in range(4):
                    for t in range(n_taps):
                        h[k, j, t] += g * x[j, (n + t - c) % N]
    return out, err


@njit(cache=True)
def mimo_dd_track(x, w, ref, known, levels, mu, passes, sps, block):
    """Slow decision-directed refinement of a trained 2x2 butterfly.

    The carrier phase of each block comes from the squared output, which
    leaves a pi ambiguity. Decisions are sign-symmetric and do not care,
    but known symbols (``known[p, n]``, target ``ref``) do: the sign is taken
    from the known symbols of the block when present, otherwise kept
    continuous with the previous block. Other symbols use the nearest level.
    Returns the per-pass mean squared error.
    """
    n_taps = w.shape[2]
    c = (n_taps - 1) // 2
    L = x.shape[1]
    N = ref.shape[1]
    mse = np.zeros(passes)
    for ps in range(passes):
        acc = 0.0
        for p in range(2):
            prev = 0.0 + 0.0j
            for b0 in range(0, N, block):
                b1 = min(b0 + block, N)
                z = 0.0 + 0.0j
                corr = 0.0
                for n in range(b0, b1):
                    base = n * sps - c
                    y = 0.0 + 0.0j
                    for q in range(2):
                        for t in range(n_taps):
                            y += w[p, q, t] * x[q, (base + t) % L]
                    z += y * y
                    if known[p, n]:
                        corr += ref[p, n] * y
                rot = z / abs(z) if abs(z) > 0 else 1.0 + 0.0j
                rot = np.sqrt(rot)
                if corr != 0:
                    if (corr * np.conj(rot)).real < 0:
                        rot = -rot
                elif (rot * np.conj(prev)).real < 0:
                    rot = -rot
                prev = rot
                for n in range(b0, b1):
                    base = n * sps - c
                    y = 0.0 + 0.0j
                    for q in range(2):
                        for t in range(n_taps):
                            y += w[p, q, t] * x[q, (base + t) % L]
                    if known[p, n]:
                        d = ref[p, n]
                    else:
                        d = _nearest((y * np.conj(rot)).real, levels)
                    e = d * rot - y
                    acc += e.real * e.real + e.imag * e.imag
                    for q in range(2):
                        for t in range(n_taps):
                            w[p, q, t] += mu * e * np.conj(x[q, (base + t) % L])
        mse[ps] = acc / (2 * N)
    return mse
