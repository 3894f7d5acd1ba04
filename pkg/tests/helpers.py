"""Shared builders for small, fast test fixtures."""

import numpy as np

from deeptx import channel as ch
from deeptx import model as mdl
from deeptx.autodiff import Tensor


def tiny_db(n=4, velocity=20.0, numerology=None, n_slots=7, model="A", delay_ns=50.0, seed=0):
    num = numerology or ch.Numerology(n_subcarriers=8)
    return [ch.generate_realization(model, delay_ns, velocity, numerology=num, n_slots=n_slots, seed=seed + i)
            for i in range(n)]


def flat_static_db(n=3, numerology=None, n_slots=7):
    """Single-tap, zero-Doppler channels: flat in frequency and constant in time."""
    prof = ch.TdlProfile("X", np.array([0.0]), np.array([0.0]))
    num = numerology or ch.Numerology(n_subcarriers=8)
    return [ch.generate_realization(prof, 50.0, 0.0, numerology=num, n_slots=n_slots, seed=i) for i in range(n)]


def pack_params(model):
    names = list(model.params)
    flat = np.concatenate([model.params[k].data.reshape(-1) for k in names])
    return names, flat


def bind_params(model, names, x):
    """Point the model's parameters at slices of the flat tensor x (recorded ops)."""
    import deeptx.autodiff as ad

    offset = 0
    for k in names:
        shape = model.params[k].shape
        n = int(np.prod(shape))
        model.params[k] = ad.reshape(x[offset:offset + n], shape)
        offset += n


def tiny_model(dtype=np.float64, seed=0, **kw):
    cfg = mdl.ModelConfig(widths=(8,), dilations=((1, 1),), **kw)
    return mdl.DeepTxModel.init(cfg, seed=seed, dtype=dtype)


__all__ = ["tiny_db", "flat_static_db", "pack_params", "bind_params", "tiny_model", "Tensor"]
