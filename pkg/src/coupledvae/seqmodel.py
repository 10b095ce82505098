"""GRU encoder and decoder with decoding-signal injection.

The GRU cell is

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    c = tanh(x W_h + (r * h) U_h + b_h)
    h' = (1 - z) * h + z * c

``gru_step`` composes it from autodiff primitives; ``gru_sequence`` is a fused
primitive that runs a whole sequence with a hand-written BPTT rule.  The two
are cross-checked in the tests; training uses the fused version.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GraphError, Tensor, concat, log_softmax
from .corpus import EOS, Batch
from .nn import Embedding, Linear, Module, Parameter, dropout, uniform

GATES = ("z", "r", "h")


class GRU(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        for g in GATES:
            setattr(self, f"w_{g}", Parameter(uniform(rng, (input_dim, hidden_dim))))
            setattr(self, f"u_{g}", Parameter(uniform(rng, (hidden_dim, hidden_dim))))
            setattr(self, f"b_{g}", Parameter(uniform(rng, (hidden_dim,))))

    def weights(self) -> list[Parameter]:
        return [getattr(self, f"{k}_{g}") for g in GATES for k in ("w", "u", "b")]


def _sig(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_step(x: Tensor, h: Tensor, gru: GRU) -> Tensor:
    """One GRU step built from primitives (reference path)."""
    if x.shape[-1] != gru.input_dim or h.shape[-1] != gru.hidden_dim:
        raise GraphError(
            f"gru_step shape mismatch: x {x.shape}, h {h.shape} for GRU({gru.input_dim}, {gru.hidden_dim})"
        )
    z = (x @ gru.w_z + h @ gru.u_z + gru.b_z).sigmoid()
    r = (x @ gru.w_r + h @ gru.u_r + gru.b_r).sigmoid()
    c = (x @ gru.w_h + (r * h) @ gru.u_h + gru.b_h).tanh()
    return (1.0 - z) * h + z * c


def gru_cell_np(x: np.ndarray, h: np.ndarray, gru: GRU) -> np.ndarray:
    z = _sig(x @ gru.w_z.data + h @ gru.u_z.data + gru.b_z.data)
    r = _sig(x @ gru.w_r.data + h @ gru.u_r.data + gru.b_r.data)
    c = np.tanh(x @ gru.w_h.data + (r * h) @ gru.u_h.data + gru.b_h.data)
    return (1.0 - z) * h + z * c


def gru_sequence(xs: Tensor, h0: Tensor, gru: GRU) -> Tensor:
    """Run the GRU over a T x B x D input; returns all hidden states, T x B x H."""
    T, B, D = xs.shape
    H = gru.hidden_dim
    if D != gru.input_dim or h0.shape != (B, H):
        raise GraphError(f"gru_sequence shape mismatch: xs {xs.shape}, h0 {h0.shape} for GRU({gru.input_dim}, {H})")
    W = np.concatenate([gru.w_z.data, gru.w_r.data, gru.w_h.data], axis=1)
    U_zr = np.concatenate([gru.u_z.data, gru.u_r.data], axis=1)
    U_h = gru.u_h.data
    b = np.concatenate([gru.b_z.data, gru.b_r.data, gru.b_h.data])
    xproj = xs.data.reshape(T * B, D) @ W
    xproj = xproj.reshape(T, B, 3 * H) + b

    hs = np.empty((T, B, H))
    zs = np.empty((T, B, H))
    rs = np.empty((T, B, H))
    cs = np.empty((T, B, H))
    h = h0.data
    for t in range(T):
        zr = _sig(xproj[t, :, : 2 * H] + h @ U_zr)
        z, r = zr[:, :H], zr[:, H:]
        c = np.tanh(xproj[t, :, 2 * H :] + (r * h) @ U_h)
        h = (1.0 - z) * h + z * c
        hs[t], zs[t], rs[t], cs[t] = h, z, r, c

    def bw(g):
        dxproj = np.empty((T, B, 3 * H))
        dU_zr = np.zeros_like(U_zr)
        dU_h = np.zeros_like(U_h)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + g[t]
            h_prev = hs[t - 1] if t > 0 else h0.data
            z, r, c = zs[t], rs[t], cs[t]
            dc = dh * z
            dz = dh * (c - h_prev)
            dh_prev = dh * (1.0 - z)
            da_h = dc * (1.0 - c * c)
            d_rh = da_h @ U_h.T
            dU_h += (r * h_prev).T @ da_h
            dr = d_rh * h_prev
            dh_prev += d_rh * r
            da_zr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
            dU_zr += h_prev.T @ da_zr
            dh_prev += da_zr @ U_zr.T
            dxproj[t, :, : 2 * H] = da_zr
            dxproj[t, :, 2 * H :] = da_h
            dh = dh_prev
        flat = dxproj.reshape(T * B, 3 * H)
        dW = xs.data.reshape(T * B, D).T @ flat
        db = flat.sum(axis=0)
        dxs = (flat @ W.T).reshape(T, B, D)
        grads = {
            "w_z": dW[:, :H], "w_r": dW[:, H : 2 * H], "w_h": dW[:, 2 * H :],
            "u_z": dU_zr[:, :H], "u_r": dU_zr[:, H:], "u_h": dU_h,
            "b_z": db[:H], "b_r": db[H : 2 * H], "b_h": db[2 * H :],
        }
        return (dxs, dh) + tuple(grads[f"{k}_{gname}"] for gname in GATES for k in ("w", "u", "b"))

    return Tensor.from_op(hs, (xs, h0, *gru.weights()), bw, "gru_sequence")


@dataclass
class DecodeResult:
    rec_loss: Tensor  # masked token NLL summed over time, averaged over the batch
    token_nll: Tensor  # T x B, masked
    logits: np.ndarray  # B x T x V

    @property
    def nll_rows(self) -> np.ndarray:
        """Per-sentence negative log-likelihood, -log P(x | signal)."""
        return self.token_nll.data.sum(axis=0)


class Encoder(Module):
    def __init__(self, vocab_size: int, emb_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.embed = Embedding(vocab_size, emb_dim, rng)
        self.gru = GRU(emb_dim, hidden_dim, rng)
        self.hidden_dim = hidden_dim

    def __call__(self, batch: Batch, drop_rng: np.random.Generator | None = None, rate: float = 0.0) -> Tensor:
        """Final hidden state at each row's last real token (EOS), B x H."""
        if len(batch) == 0:
            raise GraphError("cannot encode an empty batch")
        x = dropout(self.embed(batch.ids.T), rate, drop_rng)  # T x B x D
        h0 = Tensor(np.zeros((len(batch), self.hidden_dim)))
        hs = gru_sequence(x, h0, self.gru)
        return hs[batch.lengths - 1, np.arange(len(batch))]


class Decoder(Module):
    """GRU decoder; the signal is the first input embedding and is appended to every input."""

    def __init__(self, vocab_size: int, emb_dim: int, hidden_dim: int, signal_dim: int, rng: np.random.Generator):
        self.embed = Embedding(vocab_size, emb_dim, rng)
        self.first = Linear(signal_dim, emb_dim, rng)
        self.gru = GRU(emb_dim + signal_dim, hidden_dim, rng)
        self.out = Linear(hidden_dim, vocab_size, rng)
        self.signal_dim = signal_dim
        self.hidden_dim = hidden_dim

    def _inputs(self, ids_tm: np.ndarray, signal: Tensor, drop_rng, rate) -> Tensor:
        T = ids_tm.shape[0]
        B = signal.shape[0]
        first = self.first(signal).reshape(1, B, -1)
        if T > 1:
            words = self.embed(ids_tm[:-1])
            words = concat([first, words], axis=0)
        else:
            words = first
        words = dropout(words, rate, drop_rng)
        sig = signal.reshape(1, B, self.signal_dim).broadcast_to((T, B, self.signal_dim))
        return concat([words, sig], axis=-1)

    def teacher_forced(
        self, batch: Batch, signal: Tensor, drop_rng: np.random.Generator | None = None, rate: float = 0.0
    ) -> DecodeResult:
        if signal.shape != (len(batch), self.signal_dim):
            raise GraphError(f"signal shape {signal.shape} does not fit batch of {len(batch)} / width {self.signal_dim}")
        ids_tm = batch.ids.T  # T x B
        T, B = ids_tm.shape
        x = self._inputs(ids_tm, signal, drop_rng, rate)
        hs = gru_sequence(x, Tensor(np.zeros((B, self.hidden_dim))), self.gru)
        logits = self.out(hs)  # T x B x V
        logp = log_softmax(logits, axis=-1)
        t_idx, b_idx = np.meshgrid(np.arange(T), np.arange(B), indexing="ij")
        gold = logp[t_idx, b_idx, ids_tm]
        token_nll = -(gold * batch.mask.T)
        rec_loss = token_nll.sum() * (1.0 / B)
        return DecodeResult(rec_loss, token_nll, logits.data.transpose(1, 0, 2))

    def greedy(self, signal: np.ndarray, max_len: int) -> np.ndarray:
        """Argmax decoding (lowest id wins ties); rows are EOS-terminated or cut at max_len."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        signal = np.asarray(signal, dtype=np.float64)
        B = signal.shape[0]
        h = np.zeros((B, self.hidden_dim))
        word = signal @ self.first.weight.data + self.first.bias.data
        out = np.zeros((B, max_len), dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for t in range(max_len):
            h = gru_cell_np(np.concatenate([word, signal], axis=1), h, self.gru)
            logits = h @ self.out.weight.data + self.out.bias.data
            tok = np.argmax(logits, axis=1)
            tok[done] = EOS
            out[:, t] = tok
            done |= tok == EOS
            if done.all():
                break
            word = self.embed.weight.data[tok]
        return out
