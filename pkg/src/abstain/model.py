"""Projector, energy head and softmax head: parameters, forward/backward, checkpoints."""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffmath import gelu, gelu_grad, l2_normalize, l2_normalize_backward, linear_backward, softmax
from .errors import ConfigHashMismatch, ConfigHashWarning, FormatError
from .rng import stream

LATENT = 256
HIDDEN = 512

CKPT_MAGIC = b"CKPT"


def param_shapes(dim: int, hidden: int = HIDDEN, latent: int = LATENT) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes in declaration (and file) order."""
    return {
        "proj.W1": (hidden, dim),
        "proj.b1": (hidden,),
        "proj.W2": (latent, hidden),
        "proj.b2": (latent,),
        "energy.W1": (latent, latent),
        "energy.b1": (latent,),
        "energy.W2": (1, latent),
        "energy.b2": (1,),
        "softmax.W1": (latent, latent),
        "softmax.b1": (latent,),
        "softmax.W2": (2, latent),
        "softmax.b2": (2,),
    }


Params = dict[str, np.ndarray]


def init_params(dim: int, seed: int, hidden: int = HIDDEN, latent: int = LATENT) -> Params:
    """Kaiming-uniform (fan-in) weights, zero biases.

    ``hidden``/``latent`` exist for small test models; real runs keep the
    512/256 defaults.
    """
    params = {}
    for name, shape in param_shapes(dim, hidden, latent).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[1])
            params[name] = stream(seed, "init", name).uniform(-bound, bound, size=shape)
    return params


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def input_dim(params: Params) -> int:
    return params["proj.W1"].shape[1]


# ------------------------------------------------------------------ forward


@dataclass
class ProjectCache:
    x: np.ndarray
    h1: np.ndarray
    g: np.ndarray
    h2: np.ndarray


@dataclass
class HeadCache:
    z: np.ndarray
    h1: np.ndarray
    g: np.ndarray


def project_forward(params: Params, x: np.ndarray) -> tuple[np.ndarray, ProjectCache]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h1 = x @ params["proj.W1"].T + params["proj.b1"]
    g = gelu(h1)
    h2 = g @ params["proj.W2"].T + params["proj.b2"]
    return l2_normalize(h2), ProjectCache(x, h1, g, h2)


def project(params: Params, x: np.ndarray) -> np.ndarray:
    """Unit-norm latent for ``x`` (a vector or a row batch)."""
    z, _ = project_forward(params, x)
    return z[0] if np.ndim(x) == 1 else z


def project_backward(params: Params, cache: ProjectCache, dz: np.ndarray) -> dict[str, np.ndarray]:
    dh2 = l2_normalize_backward(cache.h2, dz)
    dW2, db2, dg = linear_backward(params["proj.W2"], cache.g, dh2)
    dh1 = dg * gelu_grad(cache.h1)
    dW1, db1 = dh1.T @ cache.x, dh1.sum(axis=0)
    return {"proj.W1": dW1, "proj.b1": db1, "proj.W2": dW2, "proj.b2": db2}


def head_forward(params: Params, head: str, z: np.ndarray) -> tuple[np.ndarray, HeadCache]:
    z = np.atleast_2d(z)
    h1 = z @ params[f"{head}.W1"].T + params[f"{head}.b1"]
    g = gelu(h1)
    out = g @ params[f"{head}.W2"].T + params[f"{head}.b2"]
    return out, HeadCache(z, h1, g)


def head_backward(params: Params, head: str, cache: HeadCache, dout: np.ndarray):
    """Return ``(grads, dz)`` for a head given d loss / d output."""
    dout = np.atleast_2d(dout)
    dW2, db2, dg = linear_backward(params[f"{head}.W2"], cache.g, dout)
    dh1 = dg * gelu_grad(cache.h1)
    dW1, db1, dz = linear_backward(params[f"{head}.W1"], cache.z, dh1)
    grads = {f"{head}.W1": dW1, f"{head}.b1": db1, f"{head}.W2": dW2, f"{head}.b2": db2}
    return grads, dz


def energy(params: Params, z: np.ndarray) -> np.ndarray | float:
    """Scalar energy per latent; higher means more out-of-domain."""
    out, _ = head_forward(params, "energy", z)
    e = out[:, 0]
    return float(e[0]) if np.ndim(z) == 1 else e


def softmax_logits(params: Params, z: np.ndarray) -> np.ndarray:
    """Two logits per latent, class 0 in-domain and class 1 OOD."""
    out, _ = head_forward(params, "softmax", z)
    return out[0] if np.ndim(z) == 1 else out


def ood_probability(params: Params, z: np.ndarray) -> np.ndarray:
    return softmax(softmax_logits(params, z))[..., 1]


# --------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: Params
    moments_m: Params = field(default_factory=dict)
    moments_v: Params = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    val_loss: float = float("nan")
    config_hash: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)


def _tensor_list(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = list(ckpt.params.items())
    out += [(f"m:{k}", v) for k, v in ckpt.moments_m.items()]
    out += [(f"v:{k}", v) for k, v in ckpt.moments_v.items()]
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """CKPT magic, u64 value count, f64 tensors in declaration order, then a
    u64-length-prefixed JSON trailer (tensor table and run metadata)."""
    tensors = _tensor_list(ckpt)
    meta = {
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "val_loss": float(ckpt.val_loss).hex(),
        "config_hash": ckpt.config_hash,
        "seed": ckpt.seed,
        "meta": ckpt.meta,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", sum(arr.size for _, arr in tensors)))
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def load_checkpoint(path: str | Path, expect_hash: str | None = None, strict: bool = False) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    With ``expect_hash`` set, a differing stored config hash warns, or raises
    ConfigHashMismatch when ``strict``.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    (count,) = struct.unpack_from("<Q", data, 4)
    body_end = 12 + 8 * count
    if len(data) < body_end + 8:
        raise FormatError(f"{path}: truncated tensor block")
    (tlen,) = struct.unpack_from("<Q", data, body_end)
    if body_end + 8 + tlen != len(data):
        raise FormatError(f"{path}: trailer length mismatch")
    try:
        meta = json.loads(data[body_end + 8 :].decode("utf-8"))
        shapes = [(name, tuple(int(d) for d in shape)) for name, shape in meta["tensors"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad metadata trailer") from exc
    if sum(int(np.prod(s)) for _, s in shapes) != count:
        raise FormatError(f"{path}: tensor table does not match value count")

    off = 12
    params, m, v = {}, {}, {}
    for name, shape in shapes:
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
        if name.startswith("m:"):
            m[name[2:]] = arr
        elif name.startswith("v:"):
            v[name[2:]] = arr
        else:
            params[name] = arr
    ckpt = Checkpoint(
        params=params,
        moments_m=m,
        moments_v=v,
        step=int(meta["step"]),
        epoch=int(meta["epoch"]),
        val_loss=float.fromhex(meta["val_loss"]),
        config_hash=meta["config_hash"],
        seed=int(meta["seed"]),
        meta=meta.get("meta", {}),
    )
    if expect_hash is not None and ckpt.config_hash != expect_hash:
        msg = f"checkpoint config hash {ckpt.config_hash} != run config hash {expect_hash}"
        if strict:
            raise ConfigHashMismatch(msg)
        warnings.warn(msg, ConfigHashWarning, stacklevel=2)
    return ckpt
