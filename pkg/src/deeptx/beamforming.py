"""Zero-forcing precoders (exact and Neumann-series) and transmit power normalization.

Channels are DL-oriented complex tensors (..., N_T, N_R, 2); precoders are
(..., N_R, N_T, 2).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import SingularMatrixError, Tensor


def _gram(h: Tensor):
    hh = ad.hermitian(h)
    return hh, ad.complex_matmul(h, hh)


def zf_exact(h) -> Tensor:
    """W = H^H (H H^H)^-1, so that H W = I."""
    h = ad.as_tensor(h)
    hh, a = _gram(h)
    try:
        inv = ad.small_complex_inverse(a)
    except SingularMatrixError as err:
        raise SingularMatrixError(f"zf_exact: H H^H singular at RE {err.index}", index=err.index) from None
    return ad.complex_matmul(hh, inv)


def _neumann_parts(h: Tensor):
    """Return (H^H, 1/diag(H H^H), -D^-1 E) for the series expansion."""
    hh, a = _gram(h)
    n = h.shape[-3]
    lead = h.shape[:-3]
    d = ad.reduce_sum(ad.abs_squared(h), axis=-1)  # (..., N_T), real and equal to diag(A)
    if np.any(d.data == 0):
        idx = tuple(int(i) for i in np.argwhere(d.data == 0)[0])
        raise ZeroDivisionError(f"Neumann ZF: zero diagonal entry of H H^H at {idx}")
    d_inv = ad.reciprocal(d)
    off = np.ones((n, n, 1), dtype=h.data.dtype) - np.eye(n, dtype=h.data.dtype)[..., None]
    e = a * Tensor(off)
    step = e * ad.reshape(-d_inv, lead + (n, 1, 1))
    return hh, d_inv, step


def zf_neumann_matrix(h, k: int) -> Tensor:
    """k-term series approximation H^H sum_{n<k} (-D^-1 E)^n D^-1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    h = ad.as_tensor(h)
    n = h.shape[-3]
    lead = h.shape[:-3]
    hh, d_inv, step = _neumann_parts(h)
    eye = np.zeros((n, n, 2), dtype=h.data.dtype)
    eye[np.arange(n), np.arange(n), 0] = 1.0
    term = ad.expand(ad.reshape(d_inv, lead + (n, 1, 1)), lead + (n, n, 2)) * Tensor(eye)
    total = term
    for _ in range(k - 1):
        term = ad.complex_matmul(step, term)
        total = total + term
    return ad.complex_matmul(hh, total)


def zf_neumann_apply(h, s, k: int) -> Tensor:
    """x = W_k s evaluated by repeated vector products, without forming W_k.

    ``s`` is (..., N_T, 2); returns (..., N_R, 2).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    h = ad.as_tensor(h)
    s = ad.as_tensor(s)
    hh, d_inv, step = _neumann_parts(h)
    z = s * ad.reshape(d_inv, d_inv.shape + (1,))
    z = ad.reshape(z, z.shape[:-1] + (1, 2))
    acc = z
    for _ in range(k - 1):
        z = ad.complex_matmul(step, z)
        acc = acc + z
    x = ad.complex_matmul(hh, acc)
    return ad.reshape(x, x.shape[:-2] + (2,))


def precode(w, s) -> Tensor:
    """x = W s per RE; ``s`` is (..., N_T, 2)."""
    s = ad.as_tensor(s)
    x = ad.complex_matmul(w, ad.reshape(s, s.shape[:-1] + (1, 2)))
    return ad.reshape(x, x.shape[:-2] + (2,))


def unit_energy_amplitude(n_symbols: int, n_subcarriers: int) -> float:
    """Target grid norm giving unit transmit energy per RE."""
    return float(np.sqrt(n_symbols * n_subcarriers))


def normalize_power(x, amplitude: float) -> Tensor:
    """Scale each slot grid (last four axes S, F, N_R, 2) to L2 norm ``amplitude``."""
    if amplitude <= 0:
        raise ValueError("target amplitude must be positive")
    x = ad.as_tensor(x)
    lead = x.shape[:-4]
    energy = ad.reduce_sum(ad.reshape(x * x, lead + (-1,)), axis=-1)
    if np.any(energy.data <= 0):
        raise ValueError("cannot normalize an all-zero transmit grid")
    scale = ad.reciprocal(ad.sqrt(energy)) * amplitude
    return x * ad.reshape(scale, lead + (1, 1, 1, 1))


def precode_and_normalize(precoder: Tensor | Callable[[Tensor], Tensor], s, amplitude: float) -> Tensor:
    """Precode ``s`` (W tensor or an apply-form callable) and normalize the grid."""
    x = precoder(s) if callable(precoder) else precode(precoder, s)
    return normalize_power(x, amplitude)
