"""Kernel backend selection.

The compiled extension is used when importable; set ``FTZ_PURE_PYTHON=1`` to
force the pure-Python fallback. Both backends produce bit-identical random streams; GELU results agree to
the last bit or two (libm vs scipy erf).
"""
import os

if os.environ.get("FTZ_PURE_PYTHON", "") not in ("", "0"):
    from ._kernels_py import gelu_backward, gelu_forward, splitmix64_fill, xoshiro_fill

    BACKEND = "python"
else:
    try:
        from ._kernels import gelu_backward, gelu_forward, splitmix64_fill, xoshiro_fill

        BACKEND = "cython"
    except ImportError:
        from ._kernels_py import gelu_backward, gelu_forward, splitmix64_fill, xoshiro_fill

        BACKEND = "python"

__all__ = ["BACKEND", "gelu_backward", "gelu_forward", "splitmix64_fill", "xoshiro_fill"]
