"""Residual MLP vector field with hand-written gradients, Adam, EMA and checkpoints.

The field maps ``(t, x[, c])`` to a velocity of the same length as ``x``::

    h0  = [x, emb(t), c] @ W_in + b_in
    h   = h + gelu(h @ W1 + b1 + emb(t) @ Wt) @ W2 + b2      (per block)
    out = gelu(h) @ W_out + b_out

All weights are stored as ``(fan_in, fan_out)`` so activations are rows.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

ACTIVATION = "gelu_tanh"
CHECKPOINT_MAGIC = b"TSFLOWCK"
CHECKPOINT_VERSION = 1
_GELU_C = math.sqrt(2.0 / math.pi)


class CheckpointError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


def time_embed(t, dim: int = 64) -> np.ndarray:
    """Sinusoidal embedding; entry ``2k`` is ``sin(100 t w_k)``, ``2k+1`` its cosine."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 100.0 * 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def gelu(a):
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a**3)))


def gelu_grad(a):
    th = np.tanh(_GELU_C * (a + 0.044715 * a**3))
    return 0.5 * (1.0 + th) + 0.5 * a * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * a**2)


@dataclass(frozen=True)
class ModelConfig:
    length: int
    cond_dim: int = 0
    hidden_dim: int = 64
    num_blocks: int = 3
    time_embed_dim: int = 64
    ema_momentum: float = 0.9999
    activation: str = ACTIVATION

    @property
    def conditional(self) -> bool:
        return self.cond_dim > 0

    @property
    def input_dim(self) -> int:
        return self.length + self.time_embed_dim + self.cond_dim


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, e = cfg.hidden_dim, cfg.time_embed_dim
    shapes = {"W_in": (cfg.input_dim, h), "b_in": (h,)}
    for k in range(cfg.num_blocks):
        shapes[f"blk{k}.W1"] = (h, h)
        shapes[f"blk{k}.b1"] = (h,)
        shapes[f"blk{k}.Wt"] = (e, h)
        shapes[f"blk{k}.W2"] = (h, h)
        shapes[f"blk{k}.b2"] = (h,)
    shapes["W_out"] = (h, cfg.length)
    shapes["b_out"] = (cfg.length,)
    return shapes


@dataclass
class VectorFieldModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    ema_params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: ModelConfig, seed=0) -> "VectorFieldModel":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, zero output layer."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _param_shapes(config).items():
            if name in ("W_out", "b_out") or len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
        ema = {k: v.copy() for k, v in params.items()}
        return cls(config, params, ema)

    @property
    def conditional(self) -> bool:
        return self.config.conditional

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def inference_view(self) -> "VectorFieldModel":
        """The EMA weights wrapped as a model (shares arrays, no copy)."""
        return VectorFieldModel(self.config, self.ema_params, self.ema_params)

    # -- forward / backward --------------------------------------------------

    def _inputs(self, t, x, c):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        if x.shape[1] != self.config.length:
            raise ValueError(f"x has length {x.shape[1]}, model expects {self.config.length}")
        if self.conditional and c is None:
            raise ValueError("conditional model requires a condition input")
        if not self.conditional and c is not None:
            raise ValueError("unconditional model got a condition input")
        parts = [x, time_embed(t, self.config.time_embed_dim)]
        if c is not None:
            c = np.atleast_2d(np.asarray(c, dtype=np.float64))
            if c.shape[1] != self.config.cond_dim:
                raise ValueError(f"condition has width {c.shape[1]}, expected {self.config.cond_dim}")
            parts.append(np.broadcast_to(c, (x.shape[0], c.shape[1])))
        return single, parts[1], np.concatenate(parts, axis=1)

    def forward(self, t, x, c=None, *, cache: bool = False):
        p = self.params
        single, temb, z = self._inputs(t, x, c)
        h = z @ p["W_in"] + p["b_in"]
        blocks = []
        for k in range(self.config.num_blocks):
            a = h @ p[f"blk{k}.W1"] + p[f"blk{k}.b1"] + temb @ p[f"blk{k}.Wt"]
            g = gelu(a)
            blocks.append((h, a, g))
            h = h + g @ p[f"blk{k}.W2"] + p[f"blk{k}.b2"]
        gh = gelu(h)
        out = gh @ p["W_out"] + p["b_out"]
        if cache:
            return out, (z, temb, blocks, h, gh)
        return out[0] if single else out

    def backward_from(self, store, dout, *, want_params: bool = True):
        """Backpropagate ``dout`` (rows) through a cached forward pass.

        Returns ``(grads, dx)``; ``grads`` is None when ``want_params`` is False.
        """
        p = self.params
        z, temb, blocks, h, gh = store
        grads = {} if want_params else None
        if want_params:
            grads["W_out"] = gh.T @ dout
            grads["b_out"] = dout.sum(axis=0)
        dh = (dout @ p["W_out"].T) * gelu_grad(h)
        for k in reversed(range(self.config.num_blocks)):
            h_in, a, g = blocks[k]
            dg = dh @ p[f"blk{k}.W2"].T
            da = dg * gelu_grad(a)
            if want_params:
                grads[f"blk{k}.W2"] = g.T @ dh
                grads[f"blk{k}.b2"] = dh.sum(axis=0)
                grads[f"blk{k}.W1"] = h_in.T @ da
                grads[f"blk{k}.b1"] = da.sum(axis=0)
                grads[f"blk{k}.Wt"] = temb.T @ da
            dh = dh + da @ p[f"blk{k}.W1"].T
        if want_params:
            grads["W_in"] = z.T @ dh
            grads["b_in"] = dh.sum(axis=0)
        dx = dh @ p["W_in"][: self.config.length].T
        return grads, dx

    def vjp_x(self, t, x, v, c=None) -> np.ndarray:
        """``(d field / d x)^T v`` for a batch of rows."""
        _, store = self.forward(t, np.atleast_2d(x), c, cache=True)
        _, dx = self.backward_from(store, np.atleast_2d(v), want_params=False)
        return dx


def forward(model: VectorFieldModel, t, x, c=None) -> np.ndarray:
    return model.forward(t, x, c)


def backward(model: VectorFieldModel, t, x, target, c=None):
    """Loss ``mean_b ||u(t_b, x_b, c_b) - target_b||^2`` and its exact gradients."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    out, store = model.forward(t, x, c, cache=True)
    resid = out - target
    loss = float((resid**2).sum() / x.shape[0])
    if not math.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss {loss}; max |out| = {np.nanmax(np.abs(out)):.3g}, "
            f"max |x| = {np.abs(x).max():.3g}"
        )
    grads, _ = model.backward_from(store, 2.0 * resid / x.shape[0])
    return loss, grads


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    clip: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: VectorFieldModel, **hparams) -> "OptimState":
        zeros = {k: np.zeros_like(p) for k, p in model.params.items()}
        return cls(zeros, {k: z.copy() for k, z in zeros.items()}, **hparams)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_by_global_norm(grads, threshold: float):
    norm = global_norm(grads)
    if norm <= threshold:
        return grads, norm
    scale = threshold / norm
    return {k: g * scale for k, g in grads.items()}, norm


def opt_step(model: VectorFieldModel, opt: OptimState, grads) -> None:
    """Clip, take one Adam step and update the EMA shadow, in place."""
    grads, _ = clip_by_global_norm(grads, opt.clip)
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    mom = model.config.ema_momentum
    for name, param in model.params.items():
        g = grads[name]
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        param -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        ema = model.ema_params[name]
        ema *= mom
        ema += (1 - mom) * param


# -- checkpoints -------------------------------------------------------------


def _blob(arrays: dict[str, np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())


def save_checkpoint(model: VectorFieldModel, opt: OptimState | None, path, extra: dict | None = None):
    """Write a JSON header followed by little-endian float64 parameter blobs."""
    groups = {"params": model.params, "ema": model.ema_params}
    if opt is not None:
        groups["adam_m"] = opt.m
        groups["adam_v"] = opt.v
    # the header is written with sorted keys and read back in that order
    groups = dict(sorted(groups.items()))
    payload = b"".join(_blob(g) for g in groups.values())
    header = {
        "version": CHECKPOINT_VERSION,
        "model": asdict(model.config),
        "groups": {k: [[n, list(a.shape)] for n, a in g.items()] for k, g in groups.items()},
        "optim": None
        if opt is None
        else {k: getattr(opt, k) for k in ("step", "lr", "clip", "beta1", "beta2", "eps")},
        "extra": extra or {},
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path, expect_conditional: bool | None = None):
    """Read a checkpoint; returns ``(model, opt_or_None, extra)``."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 4:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated)")
    (hlen,) = struct.unpack("<I", raw[off : off + 4])
    try:
        header = json.loads(raw[off + 4 : off + 4 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: checksum mismatch (corrupt header)") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}"
        )
    payload = raw[off + 4 + hlen :]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    cfg = ModelConfig(**header["model"])
    if expect_conditional is not None and cfg.conditional != expect_conditional:
        kind = "conditional" if cfg.conditional else "unconditional"
        raise CheckpointError(f"{path}: config mismatch, checkpoint holds an {kind} model")
    groups = {}
    pos = 0
    for gname, entries in header["groups"].items():
        arrays = {}
        for name, shape in entries:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
        groups[gname] = arrays
    model = VectorFieldModel(cfg, groups["params"], groups["ema"])
    opt = None
    if header["optim"] is not None:
        opt = OptimState(groups["adam_m"], groups["adam_v"], **header["optim"])
    return model, opt, header["extra"]
