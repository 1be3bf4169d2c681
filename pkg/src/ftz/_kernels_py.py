"""Pure-Python versions of the stream kernels in ``_kernels.pyx``.

Same signatures and bit-identical output; used when the extension is not built.
"""

_MASK = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


def xoshiro_fill(state, out):
    s0, s1, s2, s3 = (int(v) for v in state)
    for i in range(len(out)):
        out[i] = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


def splitmix64_fill(seed, out):
    x = int(seed) & _MASK
    for i in range(len(out)):
        x = (x + 0x9E3779B97F4A7C15) & _MASK
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        out[i] = z ^ (z >> 31)
    return x


def gelu_forward(x, out, cdf):
    import numpy as np
    from scipy.special import erf

    xd = np.asarray(x, dtype=np.float64)
    c = 0.5 * (1.0 + erf(xd * 0.7071067811865476))
    cdf[:] = c
    out[:] = xd * c


def gelu_backward(x, cdf, g, out):
    import numpy as np

    xd = np.asarray(x, dtype=np.float64)
    out[:] = g * (cdf + xd * 0.3989422804014327 * np.exp(-0.5 * xd * xd))
