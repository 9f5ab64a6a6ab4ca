"""Hand-written reverse mode for the encoder MLP, the dB reconstruction loss, and AdamW.

The encoder is a fixed 6-layer fully connected network::

    h0 = (y_dbm - in_shift) / in_scale
    h1 = relu(h0 W0 + b0)
    h2 = relu(h1 W1 + b1) + h1          # skip into layer 2
    h3 = relu(h2 W2 + b2)
    h4 = relu(h3 W3 + b3) + h3          # skip into layer 4
    h5 = relu(h4 W4 + b4)
    x  = out_scale * relu(h5 W5 + b5)   # CAPS embedding, >= 0

``in_shift``, ``in_scale`` and ``out_scale`` are frozen data-derived constants,
not trained.  Everything is float64.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (IntegrityError, NumericInputError, OptimizerError, ShapeError, TruncatedFileError,
                     UnrecognizedFormatError, VersionMismatchError)
from .lscm import DEFAULT_FLOOR_MW

LN10 = np.log(10.0)
DB_PER_LN = 10.0 / LN10


@dataclass
class EncoderParams:
    weights: list
    biases: list
    in_shift: np.ndarray
    in_scale: np.ndarray
    out_scale: float = 1.0
    skip_layers: tuple = (1, 3)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named(self) -> dict:
        """Trainable arrays by name (views, not copies)."""
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                             self.in_shift.copy(), self.in_scale.copy(), self.out_scale, self.skip_layers)

    def validate(self):
        for i in range(1, self.depth):
            if self.weights[i].shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i} input {self.weights[i].shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")
        for i in self.skip_layers:
            if self.weights[i].shape[0] != self.weights[i].shape[1]:
                raise ShapeError(f"skip layer {i} must be square, got {self.weights[i].shape}")
        return self


def init_encoder(M, N, rng, width=256, depth=6, in_shift=None, in_scale=None, out_scale=1.0,
                 skip_layers=(1, 3)) -> EncoderParams:
    """He-normal weights, zero biases."""
    dims = [M] + [width] * (depth - 1) + [N]
    weights = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    shift = np.zeros(M) if in_shift is None else np.asarray(in_shift, dtype=np.float64)
    scale = np.ones(M) if in_scale is None else np.asarray(in_scale, dtype=np.float64)
    return EncoderParams(weights, biases, shift, scale, float(out_scale), tuple(skip_layers)).validate()


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)     # h_l fed into layer l
    preacts: list = field(default_factory=list)    # h_l W_l + b_l
    embeddings: np.ndarray | None = None


def encoder_forward(params: EncoderParams, y_dbm):
    """Return ``(embeddings, cache)`` for a B x M batch."""
    y = np.atleast_2d(np.asarray(y_dbm, dtype=np.float64))
    if y.shape[0] == 0:
        raise ShapeError("empty batch")
    if y.shape[1] != params.input_dim:
        raise ShapeError(f"input has {y.shape[1]} beams, encoder expects {params.input_dim}")
    if not np.all(np.isfinite(y)):
        raise NumericInputError("encoder input contains non-finite values")
    cache = ForwardCache()
    h = (y - params.in_shift) / params.in_scale
    last = params.depth - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ W + b
        cache.inputs.append(h)
        cache.preacts.append(a)
        if i == last:
            h = params.out_scale * np.maximum(a, 0.0)
        elif i in params.skip_layers:
            h = np.maximum(a, 0.0) + h
        else:
            h = np.maximum(a, 0.0)
    cache.embeddings = h
    return h, cache


def encoder_backward(params: EncoderParams, cache: ForwardCache, grad_embeddings) -> dict:
    """Pull dL/d(embeddings) back to every trainable array; relu'(0) = 0."""
    grads = {}
    g = np.asarray(grad_embeddings, dtype=np.float64)
    last = params.depth - 1
    for i in range(last, -1, -1):
        a = cache.preacts[i]
        if i == last:
            g_a = g * params.out_scale * (a > 0)
        else:
            g_a = g * (a > 0)
        grads[f"W{i}"] = cache.inputs[i].T @ g_a
        grads[f"b{i}"] = g_a.sum(axis=0)
        if i > 0:
            g_in = g_a @ params.weights[i].T
            if i in params.skip_layers:
                g_in = g_in + g
            g = g_in
    return grads


def reconstruction_loss(embeddings, A, y_dbm, floor_mw=DEFAULT_FLOOR_MW):
    """dB-scale MAE and its gradient w.r.t. the embeddings.

    Returns ``(L1, dL1/dx)``.  sign(0) = 0, and beams whose predicted power is at
    or below the floor pass no gradient.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y_dbm, dtype=np.float64)
    if x.shape[1] != A.shape[1] or y.shape != (x.shape[0], A.shape[0]):
        raise ShapeError(f"embeddings {x.shape}, beam matrix {A.shape}, targets {y.shape} do not agree")
    y_mw = x @ A.T
    above = y_mw > floor_mw
    y_hat = 10.0 * np.log10(np.where(above, y_mw, floor_mw))
    resid = y_hat - y
    loss = float(np.mean(np.abs(resid)))
    g_hat = np.sign(resid) / resid.size
    g_mw = np.where(above, g_hat * DB_PER_LN / np.where(above, y_mw, 1.0), 0.0)
    return loss, g_mw @ A


def reconstruction_loss_and_grads(params, cache, A, y_dbm, floor_mw=DEFAULT_FLOOR_MW):
    loss, g_x = reconstruction_loss(cache.embeddings, A, y_dbm, floor_mw)
    return loss, encoder_backward(params, cache, g_x)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-2
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.lr, self.weight_decay, self.beta1, self.beta2, self.eps, self.t,
                              {k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()})


def adamw_step(state: OptimizerState, params: dict, grads: dict, prefix=""):
    """One bias-corrected Adam step with decoupled weight decay, in place.

    Returns ``(params, state)`` for convenience.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for {prefix}{name}", path=prefix + name)
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {prefix}{name} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict
    skipped: dict
    checked: dict

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def block_relative_error(analytic, numeric):
    """max |a - n| / max(max|a|, max|n|) over one parameter block; 0 when both vanish."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _l1_signature(params, y, A, floor_mw):
    x, cache = encoder_forward(params, y)
    y_mw = x @ A.T
    y_hat = 10.0 * np.log10(np.maximum(y_mw, floor_mw))
    parts = [np.sign(y_hat - y).ravel(), (y_mw > floor_mw).ravel()]
    parts += [np.sign(a).ravel() for a in cache.preacts]
    return np.concatenate(parts)


def _l1_value(params, y, A, floor_mw):
    x, _ = encoder_forward(params, y)
    return reconstruction_loss(x, A, y, floor_mw)[0]


def gradient_check(params: EncoderParams, y_dbm, A, floor_mw=DEFAULT_FLOOR_MW, rel_step=1e-6) -> GradCheckReport:
    """Compare reverse-mode dL1/dtheta against central differences.

    Coordinates whose +/- perturbation changes any sign pattern (residual signs,
    rectifier masks, floor mask) sit on a kink; they are skipped and counted.
    """
    A = np.asarray(getattr(A, "A", A), dtype=np.float64)
    y = np.atleast_2d(np.asarray(y_dbm, dtype=np.float64))
    _, cache = encoder_forward(params, y)
    _, grads = reconstruction_loss_and_grads(params, cache, A, y, floor_mw)
    work = params.copy()
    named = work.named()
    report = GradCheckReport({}, {}, {})
    for name, arr in named.items():
        analytic, numeric, skipped = [], [], 0
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            h = rel_step * max(1.0, abs(orig))
            arr[idx] = orig + h
            f_plus, sig_plus = _l1_value(work, y, A, floor_mw), _l1_signature(work, y, A, floor_mw)
            arr[idx] = orig - h
            f_minus, sig_minus = _l1_value(work, y, A, floor_mw), _l1_signature(work, y, A, floor_mw)
            arr[idx] = orig
            if not np.array_equal(sig_plus, sig_minus):
                skipped += 1
                continue
            analytic.append(grads[name][idx])
            numeric.append((f_plus - f_minus) / (2 * h))
        report.max_rel_error[name] = block_relative_error(analytic, numeric)
        report.skipped[name] = skipped
        report.checked[name] = len(analytic)
    return report


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSGW1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, blocks: dict, layer_count: int):
    """Write named float64 blocks followed by a SHA-256 digest of everything before it."""
    head = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, layer_count, len(blocks))]
    body = []
    for name, arr in blocks.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        key = name.encode("utf-8")
        head.append(struct.pack("<H", len(key)) + key + struct.pack("<I", a.ndim))
        head.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        body.append(a.tobytes())
    payload = b"".join(head + body)
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def load_checkpoint(path):
    """Return ``(blocks, layer_count)``."""
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise UnrecognizedFormatError(f"{path}: unrecognized format")
    if len(raw) < 5 + 12 + 32:
        raise TruncatedFileError(f"{path}: truncated checkpoint")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: digest mismatch")
    version, layer_count, n_blocks = struct.unpack_from("<III", payload, 5)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 17
    specs = []
    for _ in range(n_blocks):
        (klen,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + klen].decode("utf-8")
        off += klen
        (ndim,) = struct.unpack_from("<I", payload, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", payload, off)
        off += 8 * ndim
        specs.append((name, shape))
    blocks = {}
    for name, shape in specs:
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(payload):
            raise TruncatedFileError(f"{path}: block {name} runs past end of file")
        blocks[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    return blocks, layer_count


def encoder_blocks(params: EncoderParams, prefix="enc.") -> dict:
    blocks = {prefix + k: v for k, v in params.named().items()}
    blocks[prefix + "in_shift"] = params.in_shift
    blocks[prefix + "in_scale"] = params.in_scale
    blocks[prefix + "out_scale"] = np.array(params.out_scale)
    blocks[prefix + "skip_layers"] = np.array(params.skip_layers, dtype=np.float64)
    return blocks


def encoder_from_blocks(blocks: dict, layer_count: int, prefix="enc.") -> EncoderParams:
    weights = [blocks[f"{prefix}W{i}"].copy() for i in range(layer_count)]
    biases = [blocks[f"{prefix}b{i}"].copy() for i in range(layer_count)]
    skips = tuple(int(s) for s in blocks[prefix + "skip_layers"])
    return EncoderParams(weights, biases, blocks[prefix + "in_shift"].copy(), blocks[prefix + "in_scale"].copy(),
                         float(blocks[prefix + "out_scale"].item()), skips).validate()


def optimizer_blocks(state: OptimizerState, prefix) -> dict:
    blocks = {prefix + "hyper": np.array([state.lr, state.weight_decay, state.beta1, state.beta2, state.eps,
                                          state.t], dtype=np.float64)}
    for k in state.m:
        blocks[f"{prefix}m.{k}"] = state.m[k]
        blocks[f"{prefix}v.{k}"] = state.v[k]
    return blocks


def optimizer_from_blocks(blocks: dict, prefix) -> OptimizerState:
    lr, wd, b1, b2, eps, t = blocks[prefix + "hyper"]
    state = OptimizerState(lr, wd, b1, b2, eps, int(t))
    for key, arr in blocks.items():
        if key.startswith(prefix + "m."):
            name = key[len(prefix) + 2:]
            state.m[name] = arr.copy()
            state.v[name] = blocks[f"{prefix}v.{name}"].copy()
    return state
