"""Transformer whole-slide encoder and objective heads.

Token embeddings are mapped into the model width, positional vectors are
added, a learnable CLS token is prepended, and a stack of pre-norm
transformer blocks runs unmasked self-attention over the set.  The final CLS
state (after a last layer norm) is the slide representation.  Variable-length
mini-batches are padded, with padded keys excluded from attention so padding
can never leak into real outputs or gradients.

Forward passes return explicit caches; ``backward`` consumes them and
produces analytic gradients for every parameter plus the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .posembed import PositionalEmbedding
from .rng import RandomSource
from .transforms import TokenView

__all__ = ["SlideEncoder", "Heads", "AttentionRecord", "EncoderError", "encode", "OBJECTIVES"]

OBJECTIVES = ("simclr", "byol", "vicreg", "supcon")


class EncoderError(ValueError):
    pass


@dataclass
class AttentionRecord:
    """CLS-query attention rows, (layers, batch, heads, seq); optionally the
    full per-layer attention tensors (batch, heads, seq, seq)."""

    cls_rows: np.ndarray
    full: list[np.ndarray] | None = None

    def cls_row(self, layer: int = -1, head: int | str = "mean", item: int = 0) -> np.ndarray:
        """CLS attention over all keys (index 0 is the CLS self-weight)."""
        rows = self.cls_rows[layer, item]
        if head == "mean":
            return rows.mean(axis=0)
        return rows[int(head)]


class SlideEncoder:
    """Pre-norm transformer over token sets with a CLS readout."""

    def __init__(self, d_in: int, d_model: int = 128, n_layers: int = 6,
                 n_heads: int = 4, ffn_mult: int = 4):
        if d_model % n_heads != 0:
            raise EncoderError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_in = d_in
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.d_ffn = ffn_mult * d_model

    # -- parameters -------------------------------------------------------

    def init_params(self, rng: RandomSource, std: float | None = None) -> dict[str, np.ndarray]:
        """Gaussian weights with per-tensor std 1/sqrt(fan_in), zero biases.

        A flat small std starves the slide-dependent signal relative to the
        common mode at these widths; fan-in scaling keeps activations
        near unit scale through every layer.  Pass ``std`` to override.
        """
        def w(r, fan_in, fan_out):
            return r.normal((fan_in, fan_out), std=std if std is not None else fan_in**-0.5)

        r = rng.child("encoder")
        dm = self.d_model
        params = {
            "adapter.w": w(r.child("adapter"), self.d_in, dm),
            "adapter.b": np.zeros(dm),
            "cls": r.child("cls").normal((dm,), std=std if std is not None else dm**-0.5),
        }
        for i in range(self.n_layers):
            p = f"block{i}."
            ri = r.child("block", i)
            params[p + "ln1.g"] = np.ones(dm)
            params[p + "ln1.b"] = np.zeros(dm)
            for name in ("wq", "wk", "wv", "wo"):
                params[p + "attn." + name] = w(ri.child(name), dm, dm)
                if name != "wk":
                    # a key bias shifts every row's scores uniformly, which the
                    # softmax cancels; the parameter would be unidentifiable
                    params[p + "attn." + name.replace("w", "b")] = np.zeros(dm)
            params[p + "ln2.g"] = np.ones(dm)
            params[p + "ln2.b"] = np.zeros(dm)
            params[p + "ffn.w1"] = w(ri.child("ffn1"), dm, self.d_ffn)
            params[p + "ffn.b1"] = np.zeros(self.d_ffn)
            params[p + "ffn.w2"] = w(ri.child("ffn2"), self.d_ffn, dm)
            params[p + "ffn.b2"] = np.zeros(dm)
        params["final_ln.g"] = np.ones(dm)
        params["final_ln.b"] = np.zeros(dm)
        return params

    # -- forward ----------------------------------------------------------

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        b, s, _ = x.shape
        return x.reshape(b, s, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: np.ndarray) -> np.ndarray:
        b, _, s, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, s, self.d_model)

    def forward(self, params: dict[str, np.ndarray], x: np.ndarray, pos: np.ndarray,
                key_mask: np.ndarray | None = None, record_full: bool = False):
        """x (B, T, d_in), pos (B, T, d_model), key_mask (B, T) bool.

        Returns (h, AttentionRecord, cache) with h of shape (B, d_model).
        Padded keys (mask False) receive zero attention everywhere.
        """
        if x.shape[-1] != self.d_in:
            raise EncoderError(f"bag width {x.shape[-1]} does not match adapter width {self.d_in}")
        batch, n_tok, _ = x.shape
        if key_mask is None:
            key_mask = np.ones((batch, n_tok), dtype=bool)

        tok, adapter_cache = ops.dense(x, params["adapter.w"], params["adapter.b"])
        tok = tok + pos
        cls = np.broadcast_to(params["cls"], (batch, 1, self.d_model))
        seq = np.concatenate([cls, tok], axis=1)
        mask_seq = np.concatenate([np.ones((batch, 1), dtype=bool), key_mask], axis=1)
        # additive key mask: 0 for real keys, -inf for padding
        add_mask = None
        if not key_mask.all():
            add_mask = np.where(mask_seq, 0.0, -np.inf)[:, None, None, :]

        layer_caches = []
        cls_rows = []
        full = [] if record_full else None
        scale = 1.0 / np.sqrt(self.d_head)
        for i in range(self.n_layers):
            p = f"block{i}."
            u, ln1_cache = ops.layer_norm(seq, params[p + "ln1.g"], params[p + "ln1.b"])
            q, cq = ops.dense(u, params[p + "attn.wq"], params[p + "attn.bq"])
            k = u @ params[p + "attn.wk"]
            ck = (u, params[p + "attn.wk"])
            v, cv = ops.dense(u, params[p + "attn.wv"], params[p + "attn.bv"])
            qh, kh, vh = self._split_heads(q), self._split_heads(k), self._split_heads(v)
            scores = qh @ kh.transpose(0, 1, 3, 2)
            scores *= scale
            if add_mask is not None:
                scores += add_mask
            attn = ops.softmax_last(scores, overwrite=True)
            ctx = self._merge_heads(attn @ vh)
            attn_out, co = ops.dense(ctx, params[p + "attn.wo"], params[p + "attn.bo"])
            seq = seq + attn_out

            w_ln, ln2_cache = ops.layer_norm(seq, params[p + "ln2.g"], params[p + "ln2.b"])
            f1, cf1 = ops.dense(w_ln, params[p + "ffn.w1"], params[p + "ffn.b1"])
            g1, cg = ops.gelu(f1)
            f2, cf2 = ops.dense(g1, params[p + "ffn.w2"], params[p + "ffn.b2"])
            seq = seq + f2

            cls_rows.append(attn[:, :, 0, :].copy())
            if record_full:
                full.append(attn)
            layer_caches.append((ln1_cache, cq, ck, cv, qh, kh, vh, attn, co,
                                 ln2_cache, cf1, cg, cf2))

        h, final_cache = ops.layer_norm(seq[:, 0], params["final_ln.g"], params["final_ln.b"])
        record = AttentionRecord(cls_rows=np.stack(cls_rows), full=full)
        cache = (adapter_cache, layer_caches, final_cache, batch, n_tok)
        return h, record, cache

    # -- backward ---------------------------------------------------------

    def backward(self, params: dict[str, np.ndarray], cache, dh: np.ndarray):
        """Gradients of a scalar loss given dL/dh.

        Returns (param grads, dL/dx, dL/dpos).
        """
        adapter_cache, layer_caches, final_cache, batch, n_tok = cache
        grads = {}
        scale = 1.0 / np.sqrt(self.d_head)

        dh_pre, grads["final_ln.g"], grads["final_ln.b"] = ops.layer_norm_bwd(final_cache, dh)
        dseq = np.zeros((batch, n_tok + 1, self.d_model))
        dseq[:, 0] = dh_pre

        for i in reversed(range(self.n_layers)):
            p = f"block{i}."
            (ln1_cache, cq, ck, cv, qh, kh, vh, attn, co,
             ln2_cache, cf1, cg, cf2) = layer_caches[i]

            dg1, grads[p + "ffn.w2"], grads[p + "ffn.b2"] = ops.dense_bwd(cf2, dseq)
            df1 = ops.gelu_bwd(cg, dg1)
            dw_ln, grads[p + "ffn.w1"], grads[p + "ffn.b1"] = ops.dense_bwd(cf1, df1)
            dres, grads[p + "ln2.g"], grads[p + "ln2.b"] = ops.layer_norm_bwd(ln2_cache, dw_ln)
            dseq = dseq + dres

            dctx, grads[p + "attn.wo"], grads[p + "attn.bo"] = ops.dense_bwd(co, dseq)
            dctx_h = self._split_heads(dctx)
            dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
            dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dscores = dscores * scale
            dqh = dscores @ kh
            dkh = dscores.transpose(0, 1, 3, 2) @ qh
            du_q, grads[p + "attn.wq"], grads[p + "attn.bq"] = ops.dense_bwd(cq, self._merge_heads(dqh))
            du_k, grads[p + "attn.wk"], _ = ops.dense_bwd(ck, self._merge_heads(dkh))
            du_v, grads[p + "attn.wv"], grads[p + "attn.bv"] = ops.dense_bwd(cv, self._merge_heads(dvh))
            dres, grads[p + "ln1.g"], grads[p + "ln1.b"] = ops.layer_norm_bwd(
                ln1_cache, du_q + du_k + du_v)
            dseq = dseq + dres

        grads["cls"] = dseq[:, 0].sum(axis=0)
        dtok = dseq[:, 1:]
        dx, grads["adapter.w"], grads["adapter.b"] = ops.dense_bwd(adapter_cache, dtok)
        return grads, dx, dtok


class Heads:
    """Projection (and, for self-distillation, prediction) heads.

    Two-layer projection for simclr/vicreg/supcon; one-layer projection plus
    a one-layer prediction head for byol.
    """

    def __init__(self, d_model: int, d_proj: int, objective: str):
        if objective not in OBJECTIVES:
            raise EncoderError(f"unknown objective {objective!r}")
        self.d_model = d_model
        self.d_proj = d_proj
        self.objective = objective
        self.two_layer = objective != "byol"
        self.has_prediction = objective == "byol"

    def init_params(self, rng: RandomSource, std: float | None = None) -> dict[str, np.ndarray]:
        def w(r, fan_in, fan_out):
            return r.normal((fan_in, fan_out), std=std if std is not None else fan_in**-0.5)

        r = rng.child("heads")
        if self.two_layer:
            params = {
                "proj.w1": w(r.child("p1"), self.d_model, self.d_model),
                "proj.b1": np.zeros(self.d_model),
                "proj.w2": w(r.child("p2"), self.d_model, self.d_proj),
                "proj.b2": np.zeros(self.d_proj),
            }
        else:
            params = {
                "proj.w1": w(r.child("p1"), self.d_model, self.d_proj),
                "proj.b1": np.zeros(self.d_proj),
            }
        if self.has_prediction:
            params["pred.w"] = w(r.child("q"), self.d_proj, self.d_proj)
            params["pred.b"] = np.zeros(self.d_proj)
        return params

    def forward(self, params: dict[str, np.ndarray], h: np.ndarray):
        """Returns (z, p, cache); p is None unless a prediction head exists."""
        if self.two_layer:
            a1, c1 = ops.dense(h, params["proj.w1"], params["proj.b1"])
            g1, cg = ops.gelu(a1)
            z, c2 = ops.dense(g1, params["proj.w2"], params["proj.b2"])
            proj_cache = (c1, cg, c2)
        else:
            z, c1 = ops.dense(h, params["proj.w1"], params["proj.b1"])
            proj_cache = (c1,)
        p, pred_cache = None, None
        if self.has_prediction:
            p, pred_cache = ops.dense(z, params["pred.w"], params["pred.b"])
        return z, p, (proj_cache, pred_cache)

    def project(self, params: dict[str, np.ndarray], h: np.ndarray) -> np.ndarray:
        """Projection only, no cache; used for the stop-gradient target branch."""
        if self.two_layer:
            a1, _ = ops.dense(h, params["proj.w1"], params["proj.b1"])
            g1, _ = ops.gelu(a1)
            z, _ = ops.dense(g1, params["proj.w2"], params["proj.b2"])
            return z
        return h @ params["proj.w1"] + params["proj.b1"]

    def backward(self, params: dict[str, np.ndarray], cache, dz: np.ndarray | None,
                 dp: np.ndarray | None = None):
        """Returns (grads, dh).  ``dz`` may be None when only p is driven."""
        proj_cache, pred_cache = cache
        grads = {}
        total_dz = None if dz is None else dz.copy()
        if self.has_prediction:
            if dp is None:
                raise EncoderError("prediction head present but no dp supplied")
            dz_from_p, grads["pred.w"], grads["pred.b"] = ops.dense_bwd(pred_cache, dp)
            total_dz = dz_from_p if total_dz is None else total_dz + dz_from_p
        if total_dz is None:
            raise EncoderError("no upstream gradient supplied to heads")
        if self.two_layer:
            c1, cg, c2 = proj_cache
            dg1, grads["proj.w2"], grads["proj.b2"] = ops.dense_bwd(c2, total_dz)
            da1 = ops.gelu_bwd(cg, dg1)
            dh, grads["proj.w1"], grads["proj.b1"] = ops.dense_bwd(c1, da1)
        else:
            (c1,) = proj_cache
            dh, grads["proj.w1"], grads["proj.b1"] = ops.dense_bwd(c1, total_dz)
        return grads, dh


def encode(view: TokenView, encoder: SlideEncoder, enc_params: dict[str, np.ndarray],
           pos_embed: PositionalEmbedding, pos_params: dict[str, np.ndarray],
           record_full: bool = False):
    """Encode one view of a bag: h = f(tokens, coords).

    Returns (h, AttentionRecord) for the single slide.
    """
    if len(view) == 0:
        raise EncoderError("cannot encode an empty view")
    x = view.embeddings[None, :, :]
    pos, _ = pos_embed.forward(pos_params, view.coords[None, :, :])
    h, record, _ = encoder.forward(enc_params, x, pos, record_full=record_full)
    return h[0], record
