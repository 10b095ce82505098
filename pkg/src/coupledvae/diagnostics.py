"""Training-dynamics probes on the encoded text ``e``.

* ``d_rec_de``  - |dL_rec/de|, how much the reconstruction drives the encoder,
* ``d_reg_de``  - |dL_reg/de| on the unweighted regularizer (zero under total collapse),
* ``d_rec_total_de`` - |d(L_rec + L_rec^c)/de| for coupled models,
* ``dh_de_norm`` - |dh/de|_F / |h|, how strongly the decoding signal follows e.

Norms are per sentence (the batch-mean losses are rescaled by B) and averaged
over rows.  Probes run without dropout and with a fixed sampling seed, and
never write to ``.grad`` or the optimizer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, grad_wrt, jacobian, vjp
from .coupling import coupled_forward

CSV_HEADER = ("step", "d_rec_de", "d_reg_de", "d_rec_total_de", "dh_de_norm")


class ProbeError(RuntimeError):
    pass


@dataclass
class GradDiagnostics:
    step: int
    d_rec_de: float
    d_reg_de: float
    d_rec_total_de: float | None
    dh_de_norm: float

    def row(self) -> list[str]:
        total = "" if self.d_rec_total_de is None else repr(self.d_rec_total_de)
        return [str(self.step), repr(self.d_rec_de), repr(self.d_reg_de), total, repr(self.dh_de_norm)]


def _row_norm_mean(g: np.ndarray, batch_size: int) -> float:
    return float(np.mean(np.linalg.norm(g * batch_size, axis=-1)))


def grad_norm_wrt_e(loss: Tensor, e: Tensor) -> float:
    if e is None:
        raise ProbeError("encoded text was not retained by the forward pass")
    g, _ = grad_wrt(loss, e)
    return _row_norm_mean(g, e.shape[0])


def signal_sensitivity(h: Tensor, e: Tensor) -> float:
    """mean_b |dh_b/de_b|_F / |h_b|, one vector-Jacobian pass per signal coordinate.

    Rows of the batch do not interact between e and h, so seeding column k in
    every row at once yields row k of every per-row Jacobian.
    """
    B, H = h.shape
    sq = np.zeros(B)
    for k in range(H):
        seed = np.zeros((B, H))
        seed[:, k] = 1.0
        g, _ = vjp(h, seed, e)
        sq += np.sum(g * g, axis=-1)
    return float(np.mean(np.sqrt(sq) / np.linalg.norm(h.data, axis=-1)))


def signal_sensitivity_jacobian(h: Tensor, e: Tensor) -> float:
    """Same quantity via one dense Jacobian per row (reference implementation)."""
    B, H = h.shape
    vals = []
    for b in range(B):
        jac = jacobian(h[b], e).reshape(H, *e.shape)[:, b, :]
        vals.append(np.linalg.norm(jac) / np.linalg.norm(h.data[b]))
    return float(np.mean(vals))


def probe(model, batch, step: int, seed: int = 0, forward=coupled_forward) -> GradDiagnostics:
    """All probes at one step on a fixed batch, dropout off, fixed sampling noise."""
    out = forward(batch, model, np.random.default_rng(seed), step, train=False)
    e = out.e
    d_rec = grad_norm_wrt_e(out.rec, e)
    d_reg = grad_norm_wrt_e(out.reg_raw, e) if out.reg_raw.requires_grad else 0.0
    d_total = grad_norm_wrt_e(out.rec + out.rec_c, e) if out.rec_c is not None else None
    dh = signal_sensitivity(out.h, e)
    return GradDiagnostics(step, d_rec, d_reg, d_total, dh)


class Tracker:
    """Appends probe rows to a CSV file every ``every`` steps."""

    def __init__(self, path, batch, every: int, seed: int = 0, forward=coupled_forward):
        self.path = Path(path)
        self.batch = batch
        self.every = every
        self.seed = seed
        self.forward = forward
        self.rows: list[GradDiagnostics] = []
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", encoding="utf-8", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(CSV_HEADER)
        except OSError as exc:
            raise ProbeError(f"cannot write diagnostics sink {self.path}: {exc}") from exc

    def due(self, step: int) -> bool:
        return self.every > 0 and step % self.every == 0

    def __call__(self, model, step: int) -> GradDiagnostics:
        diag = probe(model, self.batch, step, self.seed, self.forward)
        self.rows.append(diag)
        with open(self.path, "a", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(diag.row())
        return diag


def read_curve(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
