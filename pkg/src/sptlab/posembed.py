"""Learnable Fourier-feature positional embedding.

Integer grid coordinates are lifted to Fourier features with a learnable
frequency matrix, gamma(p) = concat(cos(p W), sin(p W)) / sqrt(D), then
modulated row-wise by a small two-layer MLP into the model dimension.  The
pre-MLP similarity <gamma(p), gamma(q)> depends only on p - q, which is what
makes the encoding usable for slides of arbitrary extent.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .rng import RandomSource

__all__ = ["PositionalEmbedding", "fourier_features", "fourier_features_bwd"]


def fourier_features(coords: np.ndarray, freq: np.ndarray):
    """Rows gamma(p_i) = concat(cos(p_i W), sin(p_i W)) / sqrt(D).

    ``coords`` is (k, 2) integer, ``freq`` is (2, D/2); output is (k, D).
    """
    coords = np.asarray(coords, dtype=np.float64)
    angles = coords @ freq
    d_total = 2 * freq.shape[1]
    scale = 1.0 / np.sqrt(d_total)
    feats = np.concatenate([np.cos(angles), np.sin(angles)], axis=-1) * scale
    return feats, (coords, angles, scale)


def fourier_features_bwd(cache, dfeats) -> np.ndarray:
    """Gradient of the features with respect to the frequency matrix."""
    coords, angles, scale = cache
    half = angles.shape[-1]
    dcos = dfeats[..., :half] * scale
    dsin = dfeats[..., half:] * scale
    dangles = -np.sin(angles) * dcos + np.cos(angles) * dsin
    c2 = coords.reshape(-1, 2)
    da2 = dangles.reshape(-1, half)
    return c2.T @ da2


class PositionalEmbedding:
    """Fourier features modulated by a two-layer MLP into d_model.

    Parameters live in a flat dict: ``freq`` (2, D/2), then ``w1/b1/w2/b2``
    for the MLP.  The map is row-wise: output row i depends only on
    coordinate row i.
    """

    def __init__(self, d_model: int, fourier_dim: int = 64, hidden: int | None = None,
                 freq_std: float = 2.0**-0.5):
        if fourier_dim % 2 != 0:
            raise ValueError("fourier_dim must be even")
        self.d_model = d_model
        self.fourier_dim = fourier_dim
        self.hidden = 2 * d_model if hidden is None else hidden
        self.freq_std = freq_std

    def init_params(self, rng: RandomSource) -> dict[str, np.ndarray]:
        r = rng.child("posembed")
        return {
            "freq": r.child("freq").normal((2, self.fourier_dim // 2), std=self.freq_std),
            "w1": r.child("w1").normal((self.fourier_dim, self.hidden), std=self.fourier_dim**-0.5),
            "b1": np.zeros(self.hidden),
            "w2": r.child("w2").normal((self.hidden, self.d_model), std=self.hidden**-0.5),
            "b2": np.zeros(self.d_model),
        }

    def forward(self, params: dict[str, np.ndarray], coords: np.ndarray):
        """coords (..., 2) integer -> positional vectors (..., d_model)."""
        feats, f_cache = fourier_features(coords, params["freq"])
        a1, c1 = ops.dense(feats, params["w1"], params["b1"])
        g1, cg = ops.gelu(a1)
        out, c2 = ops.dense(g1, params["w2"], params["b2"])
        return out, (f_cache, c1, cg, c2)

    def backward(self, params: dict[str, np.ndarray], cache, dout):
        f_cache, c1, cg, c2 = cache
        dg1, dw2, db2 = ops.dense_bwd(c2, dout)
        da1 = ops.gelu_bwd(cg, dg1)
        dfeats, dw1, db1 = ops.dense_bwd(c1, da1)
        dfreq = fourier_features_bwd(f_cache, dfeats)
        return {"freq": dfreq, "w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
