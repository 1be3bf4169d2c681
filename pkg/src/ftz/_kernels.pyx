# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled xoshiro256** stream kernels."""
from libc.stdint cimport uint64_t


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def xoshiro_fill(uint64_t[::1] state, uint64_t[::1] out):
    """Fill ``out`` with the next ``len(out)`` outputs, advancing ``state`` in place."""
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3]
    cdef uint64_t result, t
    cdef Py_ssize_t i, n = out.shape[0]
    with nogil:
        for i in range(n):
            result = _rotl(s1 * 5, 7) * 9
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
            out[i] = result
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


def splitmix64_fill(uint64_t seed, uint64_t[::1] out):
    """Write successive splitmix64 outputs starting from ``seed``; returns the final state."""
    cdef uint64_t z, x = seed
    cdef Py_ssize_t i, n = out.shape[0]
    with nogil:
        for i in range(n):
            x += 0x9E3779B97F4A7C15ULL
            z = x
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
            out[i] = z ^ (z >> 31)
    return x


from libc.math cimport erf, erff, exp

ctypedef fused real:
    float
    double

cdef double _INV_SQRT2 = 0.7071067811865476
cdef double _INV_SQRT2PI = 0.3989422804014327


def gelu_forward(real[::1] x, real[::1] out, real[::1] cdf):
    """out = x * Phi(x); cdf receives Phi(x) for the backward pass."""
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, c
    with nogil:
        for i in range(n):
            v = x[i]
            if real is float:
                c = 0.5 * (1.0 + erff(<float>(v * _INV_SQRT2)))
            else:
                c = 0.5 * (1.0 + erf(v * _INV_SQRT2))
            cdf[i] = <real>c
            out[i] = <real>(v * c)


def gelu_backward(real[::1] x, real[::1] cdf, real[::1] g, real[::1] out):
    """out = g * (Phi(x) + x * phi(x))."""
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = <real>(g[i] * (cdf[i] + v * _INV_SQRT2PI * exp(-0.5 * v * v)))
