from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Param


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Param], st: AdamState) -> None:
    """Bias-corrected Adam over ``params`` using their accumulated ``.grad``.

    Frozen params (``requires_grad=False``) are skipped. A non-finite gradient
    anywhere aborts the whole step before any parameter moves.
    """
    live = {k: p for k, p in params.items() if p.requires_grad}
    bad = [k for k, p in live.items() if not np.all(np.isfinite(p.grad))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {', '.join(bad)}; step {st.step + 1} aborted")
    st.step += 1
    c1 = 1.0 - st.beta1 ** st.step
    c2 = 1.0 - st.beta2 ** st.step
    for k, p in live.items():
        g = p.grad
        if k not in st.m:
            st.m[k] = np.zeros_like(p.value)
            st.v[k] = np.zeros_like(p.value)
        m, v = st.m[k], st.v[k]
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        p.value -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
