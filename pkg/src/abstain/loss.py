"""EC-SCTL and the softmax cross-entropy baseline.

Scalar helpers (``sim_term``, ``energy_term``, ...) are the readable
definitions. :func:`ecsctl_batch` is the vectorised version used in training;
it returns gradients with respect to latents and energies, which
:func:`batch_loss` pushes back through the heads and projector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import model as M
from .diffmath import logsumexp_t, logsumexp_t_grad, softplus_t, softplus_t_grad
from .errors import EmptyOODPool, NonPositiveTemperature


class Head(str, Enum):
    EBM = "ebm"
    SOFTMAX = "softmax"


class Ablation(str, Enum):
    NONE = "none"
    NO_ENERGY = "no_energy"
    NO_EXT_OOD = "no_ext_ood"


@dataclass(frozen=True)
class LossConfig:
    m_sim: float = 0.2
    m_E: float = 1.0
    lam: float = 1.0
    T: float = 1.0
    w_ood: float = 1.0
    w_hn: float = 1.0
    head: Head = Head.EBM
    ablation: Ablation = Ablation.NONE
    hardest_by: str = "cosine"

    def __post_init__(self):
        if not self.T > 0:
            raise NonPositiveTemperature(f"T must be positive, got {self.T}")
        if min(self.lam, self.w_ood, self.w_hn) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.hardest_by not in ("cosine", "energy"):
            raise ValueError(f"hardest_by must be 'cosine' or 'energy', got {self.hardest_by!r}")
        object.__setattr__(self, "head", Head(self.head))
        object.__setattr__(self, "ablation", Ablation(self.ablation))

    @property
    def energy_on(self) -> bool:
        return self.ablation is not Ablation.NO_ENERGY


# ------------------------------------------------------------ scalar forms


def sim_term(zA, zP, zN, m_sim: float, T: float) -> float:
    return float(softplus_t(m_sim + np.dot(zA, zN) - np.dot(zA, zP), T))


def energy_term(E_P: float, E_N: float, m_E: float, lam: float, T: float) -> float:
    return float(lam * softplus_t(E_P - E_N + m_E, T))


def pair_term(zA, zP, zN, E_P, E_N, cfg: LossConfig) -> float:
    """Similarity plus (unless ablated) energy margin against one negative."""
    out = sim_term(zA, zP, zN, cfg.m_sim, cfg.T)
    if cfg.energy_on:
        out += energy_term(E_P, E_N, cfg.m_E, cfg.lam, cfg.T)
    return out


def core_loss(per_negative_terms, mask, T: float) -> float:
    return float(logsumexp_t(per_negative_terms, mask, T))


def ood_hinge(zA, zP, E_P, ood_z, ood_E, cfg: LossConfig) -> float:
    """Pair term against the hardest external negative (highest cosine to the
    anchor, or lowest energy with ``hardest_by='energy'``)."""
    if cfg.ablation is Ablation.NO_EXT_OOD:
        return 0.0
    ood_z = np.atleast_2d(ood_z)
    if ood_z.shape[0] == 0:
        raise EmptyOODPool("OOD hinge needs at least one external negative")
    j = _hardest(zA, ood_z, np.asarray(ood_E), cfg)
    return pair_term(zA, zP, ood_z[j], E_P, float(np.asarray(ood_E)[j]), cfg)


def hn_hinge(zA, zP, z_HN, E_P, E_HN, cfg: LossConfig, valid: bool = True) -> float:
    if not valid:
        return 0.0
    return pair_term(zA, zP, z_HN, E_P, E_HN, cfg)


def softmax_ce(logits, y: int) -> float:
    """``-log softmax(logits)[y]`` via log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    top = np.max(logits)
    return float(top + np.log(np.sum(np.exp(logits - top))) - logits[y])


def _hardest(zA, ood_z, ood_E, cfg: LossConfig) -> int:
    if cfg.hardest_by == "energy":
        return int(np.argmin(ood_E))
    return int(np.argmax(ood_z @ zA))


# ------------------------------------------------------------ batched forms


@dataclass
class BatchLossReport:
    total: float
    core: float
    ood_hinge: float
    hn_hinge: float
    per_anchor: np.ndarray = field(repr=False)
    per_anchor_core: np.ndarray = field(repr=False)
    per_anchor_ood: np.ndarray = field(repr=False)
    per_anchor_hn: np.ndarray = field(repr=False)


@dataclass
class Latents:
    """Latents and energies for one batch, laid out per tuple slot."""

    zA: np.ndarray  # (B, L)
    zP: np.ndarray  # (B, L)
    zN: np.ndarray  # (B, K, L)
    n_mask: np.ndarray  # (B, K)
    zH: np.ndarray  # (B, L)
    h_mask: np.ndarray  # (B,)
    zO: np.ndarray  # (O, L)
    EP: np.ndarray  # (B,)
    EN: np.ndarray  # (B, K)
    EH: np.ndarray  # (B,)
    EO: np.ndarray  # (O,)


def _pair_terms(zA, zP, zX, EP, EX, cfg: LossConfig):
    """Vectorised pair term; returns values and the partials needed for backprop.

    ``zX``/``EX`` carry an extra negative axis compared to the anchor inputs.
    """
    cos_ap = np.sum(zA * zP, axis=-1)[..., None]
    cos_ax = np.einsum("bl,bkl->bk", zA, zX)
    xs = cfg.m_sim + cos_ax - cos_ap
    val = softplus_t(xs, cfg.T)
    gs = softplus_t_grad(xs, cfg.T)
    if cfg.energy_on:
        xe = EP[:, None] - EX + cfg.m_E
        val = val + cfg.lam * softplus_t(xe, cfg.T)
        ge = cfg.lam * softplus_t_grad(xe, cfg.T)
    else:
        ge = np.zeros_like(xs)
    return val, gs, ge


def ecsctl_batch(lat: Latents, cfg: LossConfig, need_grad: bool = True):
    """Loss report and gradients (a dict keyed like :class:`Latents`)."""
    B = lat.zA.shape[0]
    K = lat.zN.shape[1]

    # core: LogSumExp over valid mined negatives; anchors with none get 0
    has_neg = lat.n_mask.any(axis=1)
    core = np.zeros(B)
    core_w = np.zeros((B, K))
    if K:
        n_val, n_gs, n_ge = _pair_terms(lat.zA, lat.zP, lat.zN, lat.EP, lat.EN, cfg)
        if has_neg.any():
            core[has_neg] = logsumexp_t(n_val[has_neg], lat.n_mask[has_neg], cfg.T)
            core_w[has_neg] = logsumexp_t_grad(n_val[has_neg], lat.n_mask[has_neg], cfg.T)

    # paired hard negative
    h_val, h_gs, h_ge = _pair_terms(lat.zA, lat.zP, lat.zH[:, None], lat.EP, lat.EH[:, None], cfg)
    hn = np.where(lat.h_mask, h_val[:, 0], 0.0)

    # hardest external negative
    ood = np.zeros(B)
    use_ood = cfg.ablation is not Ablation.NO_EXT_OOD and lat.zO.shape[0] > 0
    if use_ood:
        if cfg.hardest_by == "energy":
            pick = np.full(B, int(np.argmin(lat.EO)))
        else:
            pick = np.argmax(lat.zA @ lat.zO.T, axis=1)
        zX, EX = lat.zO[pick][:, None], lat.EO[pick][:, None]
        o_val, o_gs, o_ge = _pair_terms(lat.zA, lat.zP, zX, lat.EP, EX, cfg)
        ood = o_val[:, 0]

    per_anchor = core + cfg.w_ood * ood + cfg.w_hn * hn
    report = BatchLossReport(
        total=float(np.mean(per_anchor)),
        core=float(np.mean(core)),
        ood_hinge=float(np.mean(ood)),
        hn_hinge=float(np.mean(hn)),
        per_anchor=per_anchor,
        per_anchor_core=core,
        per_anchor_ood=ood,
        per_anchor_hn=hn,
    )
    if not need_grad:
        return report, None

    scale = 1.0 / B
    g = {
        "zA": np.zeros_like(lat.zA),
        "zP": np.zeros_like(lat.zP),
        "zN": np.zeros_like(lat.zN),
        "zH": np.zeros_like(lat.zH),
        "zO": np.zeros_like(lat.zO),
        "EP": np.zeros(B),
        "EN": np.zeros((B, K)),
        "EH": np.zeros(B),
        "EO": np.zeros(lat.zO.shape[0]),
    }

    def accumulate(weight, gs, ge, zX):
        # weight, gs, ge: (B, k); zX: (B, k, L). Returns d/dzX and d/dEX.
        ws = weight * gs
        we = weight * ge
        g["zA"] += np.einsum("bk,bkl->bl", ws, zX) - ws.sum(axis=1)[:, None] * lat.zP
        g["zP"] -= ws.sum(axis=1)[:, None] * lat.zA
        g["EP"] += we.sum(axis=1)
        return ws[..., None] * lat.zA[:, None, :], -we

    if K and has_neg.any():
        dzN, dEN = accumulate(scale * core_w, n_gs, n_ge, lat.zN)
        g["zN"] += dzN
        g["EN"] += dEN
    hw = (scale * cfg.w_hn * lat.h_mask)[:, None]
    dzH, dEH = accumulate(hw, h_gs, h_ge, lat.zH[:, None])
    g["zH"] += dzH[:, 0]
    g["EH"] += dEH[:, 0]
    if use_ood:
        ow = np.full((B, 1), scale * cfg.w_ood)
        dzO, dEO = accumulate(ow, o_gs, o_ge, lat.zO[pick][:, None])
        np.add.at(g["zO"], pick, dzO[:, 0])
        np.add.at(g["EO"], pick, dEO[:, 0])
    return report, g


def softmax_batch(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows and its gradient in the logits."""
    top = np.max(logits, axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.sum(np.exp(logits - top), axis=1))
    n = logits.shape[0]
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    p = np.exp(logits - lse[:, None])
    p[np.arange(n), labels] -= 1.0
    return loss, p / n


# ---------------------------------------------------------- parameter level


@dataclass
class Batch:
    """Store-row indices for a batch of tuples."""

    anchors: np.ndarray
    positives: np.ndarray
    hard: np.ndarray
    hard_valid: np.ndarray
    mined: np.ndarray
    mined_mask: np.ndarray
    ood: np.ndarray

    def example_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Rows and labels (0 in-domain, 1 OOD) of the softmax example multiset."""
        rows = [self.anchors, self.positives, self.hard[self.hard_valid], self.mined[self.mined_mask], self.ood]
        labels = [0, 0, 1, 1, 1]
        return (
            np.concatenate(rows).astype(np.int64),
            np.concatenate([np.full(len(r), y, dtype=np.int64) for r, y in zip(rows, labels)]),
        )


def batch_loss(params: M.Params, X: np.ndarray, batch: Batch, cfg: LossConfig, need_grad: bool = True):
    """Loss for the head ``cfg.head`` on ``batch``; gradients over all params.

    Each distinct store row is projected once; per-slot gradients are summed
    back onto it. Returns ``(report_or_loss, grads_or_None)``; for the EBM the
    first item is a :class:`BatchLossReport`, for softmax a float.
    """
    rows, labels = batch.example_rows()
    # masked slots borrow the anchor's row so their contents never reach the numerics
    mined = np.where(batch.mined_mask, batch.mined, batch.anchors[:, None])
    hard = np.where(batch.hard_valid, batch.hard, batch.anchors)
    if cfg.head is Head.EBM:
        rows = np.concatenate([rows, hard, mined.reshape(-1)])
    uniq, inv = np.unique(rows, return_inverse=True)
    z, pcache = M.project_forward(params, X[uniq])
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    if cfg.head is Head.SOFTMAX:
        logits, hcache = M.head_forward(params, "softmax", z)
        loss, dlog = softmax_batch(logits[inv], labels)
        if not need_grad:
            return loss, None
        dlog_u = np.zeros_like(logits)
        np.add.at(dlog_u, inv, dlog)
        hgrads, dz = M.head_backward(params, "softmax", hcache, dlog_u)
        grads.update(hgrads)
        grads.update(M.project_backward(params, pcache, dz))
        return loss, grads

    e_out, hcache = M.head_forward(params, "energy", z)
    E = e_out[:, 0]
    iA, iP, iH, iN, iO = (
        np.searchsorted(uniq, r) for r in (batch.anchors, batch.positives, hard, mined, batch.ood)
    )
    lat = Latents(
        zA=z[iA], zP=z[iP], zN=z[iN], n_mask=batch.mined_mask, zH=z[iH], h_mask=batch.hard_valid,
        zO=z[iO], EP=E[iP], EN=E[iN], EH=E[iH], EO=E[iO],
    )
    report, g = ecsctl_batch(lat, cfg, need_grad)
    if not need_grad:
        return report, None

    dz = np.zeros_like(z)
    dE = np.zeros(len(uniq))
    for key, idx in (("A", iA), ("P", iP), ("N", iN), ("H", iH), ("O", iO)):
        np.add.at(dz, idx, g["z" + key])
        if "E" + key in g:
            np.add.at(dE, idx, g["E" + key])
    hgrads, dz_head = M.head_backward(params, "energy", hcache, dE[:, None])
    grads.update(hgrads)
    grads.update(M.project_backward(params, pcache, dz + dz_head))
    return report, grads
