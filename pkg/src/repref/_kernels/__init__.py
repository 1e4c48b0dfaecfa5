"""Kernel backend selection.

The hot inner loops (probe training steps, FIR filtering, polyphase
resampling) exist twice: a Cython extension (`_core`) and a numpy fallback
(`_numpy_ref`). The compiled backend is picked at import time when present;
set REPREF_KERNELS=numpy or REPREF_KERNELS=compiled to force one
(`compiled` raises if the extension is missing).

`benchmarks/bench_kernels.py` compares both on representative workloads.
"""

from __future__ import annotations

import os

from . import _numpy_ref

_forced = os.environ.get("REPREF_KERNELS", "").strip().lower()

if _forced == "numpy":
    _impl = _numpy_ref
elif _forced == "compiled":
    from . import _core as _impl  # type: ignore[no-redef]
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _numpy_ref

BACKEND: str = _impl.name

fir_convolve = _impl.fir_convolve
polyphase_resample = _impl.polyphase_resample
forward_logits = _impl.forward_logits
loss_and_grads = _impl.loss_and_grads
adam_step = _impl.adam_step


def available_backends():
    """Names of importable backends (the numpy fallback is always there)."""
    out = {"numpy": _numpy_ref}
    try:
        from . import _core
        out["compiled"] = _core
    except ImportError:
        pass
    return out
