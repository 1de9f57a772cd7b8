"""A small convolutional encoder with two transposed-convolution decoders.

Everything is NHWC ``numpy``.  The graph is fixed: three 3x3 stride-2
convolutions (16, 32, 64 channels) form the encoder; each decoder is three
4x4 stride-2 transposed convolutions (64 -> 32 -> 16 -> out) finished by a
sigmoid.  Gradients are written out by hand for exactly this graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import decode_float_map, encode_float_map

__all__ = [
    "LEAK",
    "TrainingError",
    "ModelState",
    "Cache",
    "init_state",
    "conv2d_s2",
    "conv2d_s2_backward",
    "deconv2d_s2",
    "deconv2d_s2_backward",
    "encode",
    "decode",
    "forward",
    "backward",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

LEAK = 0.1
ENC_WIDTHS = (16, 32, 64)
DEC_WIDTHS = (32, 16)
HEADS = {"rec": 3, "msk": 1}


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelState:
    """Parameters plus Adam moment buffers.

    Names: ``enc{1,2,3}.{w,b}``, ``rec{1,2,3}.{w,b}``, ``msk{1,2,3}.{w,b}``.
    Convolution kernels are ``(kh, kw, c_in, c_out)``.
    """

    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))

    @property
    def in_channels(self) -> int:
        return self.params["enc1.w"].shape[2]

    def astype(self, dtype) -> "ModelState":
        cast = lambda d: {k: a.astype(dtype) for k, a in d.items()}  # noqa: E731
        return ModelState(cast(self.params), cast(self.m), cast(self.v), self.step)

    def copy(self) -> "ModelState":
        return self.astype(self.params["enc1.w"].dtype)


def init_state(in_channels: int, seed: int, dtype=np.float32) -> ModelState:
    rng = np.random.default_rng([seed, 0x1A1])
    gain = np.sqrt(2.0 / (1.0 + LEAK**2))
    params: dict[str, np.ndarray] = {}
    cin = in_channels
    for i, cout in enumerate(ENC_WIDTHS, 1):
        params[f"enc{i}.w"] = rng.normal(0.0, gain / np.sqrt(9 * cin), (3, 3, cin, cout))
        params[f"enc{i}.b"] = np.zeros(cout)
        cin = cout
    for head, out in HEADS.items():
        cin = ENC_WIDTHS[-1]
        for i, cout in enumerate((*DEC_WIDTHS, out), 1):
            # a stride-2 4x4 transposed conv feeds each output pixel from 4 taps
            params[f"{head}{i}.w"] = rng.normal(0.0, gain / np.sqrt(4 * cin), (4, 4, cin, cout))
            params[f"{head}{i}.b"] = np.zeros(cout)
            cin = cout
    return ModelState({k: v.astype(dtype) for k, v in params.items()})


# ---------------------------------------------------------------------------
# layers


def conv2d_s2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 convolution, stride 2, zero padding 1.  Returns (output, im2col matrix)."""
    n, h, wd, c = x.shape
    if w.shape[:3] != (3, 3, c):
        raise ValueError(f"kernel {w.shape} does not match input channels {c}")
    if h % 2 or wd % 2:
        raise ValueError("conv2d_s2 needs even spatial dims")
    ho, wo = h // 2, wd // 2
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]  # n, ho, wo, c, 3, 3
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, 9 * c)
    y = cols @ w.reshape(9 * c, -1) + b
    return y.reshape(n, ho, wo, -1), cols


def conv2d_s2_backward(dy: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, h, wd, c = x_shape
    ho, wo, cout = dy.shape[1:]
    dyf = dy.reshape(-1, cout)
    dw = (cols.T @ dyf).reshape(w.shape)
    db = dyf.sum(axis=0)
    dcols = (dyf @ w.reshape(9 * c, cout).T).reshape(n, ho, wo, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + 2 * ho : 2, j : j + 2 * wo : 2] += dcols[:, :, :, i, j]
    return dxp[:, 1:-1, 1:-1], dw, db


def deconv2d_s2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """4x4 transposed convolution, stride 2, padding 1: doubles H and W.

    ``out[2h + i - 1, 2w + j - 1] += x[h, w] @ w[i, j]``
    """
    n, h, wd, c = x.shape
    if w.shape[:3] != (4, 4, c):
        raise ValueError(f"kernel {w.shape} does not match input channels {c}")
    cout = w.shape[3]
    # sub-pixel form: each output parity is a 2x2 convolution over the zero-padded input
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (2, 2), axis=(1, 2))  # n, h+1, wd+1, c, 2, 2
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, 4 * c)
    y = (cols @ _phase_kernels(w)).reshape(n, h + 1, wd + 1, 2, 2, cout)
    out = np.empty((n, 2 * h, 2 * wd, cout), dtype=y.dtype)
    for pr in range(2):
        for pc in range(2):
            out[:, pr::2, pc::2] = y[:, pr : pr + h, pc : pc + wd, pr, pc]
    out += b
    return out


_PHASE_TAPS = ((3, 1), (2, 0))  # kernel index used by window offset 0/1 for output parity 0/1


def _phase_kernels(w: np.ndarray) -> np.ndarray:
    """(4c, 4cout) matrix holding the 2x2 sub-kernel of each output parity."""
    c, cout = w.shape[2:]
    k = np.empty((2, 2, c, 2, 2, cout), dtype=w.dtype)
    for pr in range(2):
        for pc in range(2):
            for u in range(2):
                for v in range(2):
                    k[u, v, :, pr, pc] = w[_PHASE_TAPS[pr][u], _PHASE_TAPS[pc][v]]
    return k.reshape(4 * c, 4 * cout)


def deconv2d_s2_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, h, wd, c = x.shape
    cout = w.shape[3]
    dyp = np.pad(dy, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(dyp, (4, 4), axis=(1, 2))[:, ::2, ::2]  # n, h, wd, cout, 4, 4
    dtaps = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, 16 * cout)
    wmat = w.transpose(2, 0, 1, 3).reshape(c, 16 * cout)
    dx = (dtaps @ wmat.T).reshape(x.shape)
    dw = (x.reshape(-1, c).T @ dtaps).reshape(c, 4, 4, cout).transpose(1, 2, 0, 3)
    db = dy.reshape(-1, cout).sum(axis=0)
    return dx, dw, db


def _lrelu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAK * x)


def _lrelu_grad(pre: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(pre > 0, dy, LEAK * dy)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# network


@dataclass
class Cache:
    x: np.ndarray
    enc: list = field(default_factory=list)  # (input shape, cols, preactivation) per layer
    dec: dict = field(default_factory=dict)  # head -> [(input, preactivation)] per layer
    outputs: dict = field(default_factory=dict)


def encode(params: dict[str, np.ndarray], x: np.ndarray, cache: Cache | None = None) -> np.ndarray:
    """(N, P, P, C_in) -> (N, P/8, P/8, 64)."""
    if x.ndim == 3:
        x = x[None]
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise ValueError(f"patch size must be a multiple of 8, got {x.shape[1:3]}")
    if x.shape[3] != params["enc1.w"].shape[2]:
        raise ValueError(f"expected {params['enc1.w'].shape[2]} input channels, got {x.shape[3]}")
    h = x
    for i in range(1, len(ENC_WIDTHS) + 1):
        pre, cols = conv2d_s2(h, params[f"enc{i}.w"], params[f"enc{i}.b"])
        if cache is not None:
            cache.enc.append((h.shape, cols, pre))
        h = _lrelu(pre)
    return h


def decode(params: dict[str, np.ndarray], z: np.ndarray, head: str, cache: Cache | None = None) -> np.ndarray:
    """Decoder ``head`` ('rec' or 'msk'); output in (0, 1) at 8x the latent resolution."""
    layers = []
    h = z
    for i in range(1, 4):
        w = params[f"{head}{i}.w"]
        if h.shape[-1] != w.shape[2]:
            raise ValueError(f"latent has {h.shape[-1]} channels, {head}{i} expects {w.shape[2]}")
        pre = deconv2d_s2(h, w, params[f"{head}{i}.b"])
        layers.append((h, pre))
        h = _lrelu(pre) if i < 3 else sigmoid(pre)
    if cache is not None:
        cache.dec[head] = layers
    return h


def forward(state: ModelState, x: np.ndarray, keep_cache: bool = True) -> tuple[np.ndarray, np.ndarray, Cache | None]:
    """Return (reconstruction (N,P,P,3), gate (N,P,P,1), cache)."""
    p = state.params
    x = np.asarray(x, dtype=p["enc1.w"].dtype)
    cache = Cache(x) if keep_cache else None
    z = encode(p, x, cache)
    recon = decode(p, z, "rec", cache)
    gate = decode(p, z, "msk", cache)
    if cache is not None:
        cache.outputs = {"rec": recon, "msk": gate}
    return recon, gate, cache


def backward(state: ModelState, cache: Cache | None, d_recon: np.ndarray, d_gate: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse pass given loss gradients w.r.t. both decoder outputs."""
    if cache is None or not cache.enc:
        raise RuntimeError("backward() needs the cache of a completed forward pass")
    p = state.params
    grads: dict[str, np.ndarray] = {}
    dz = None
    for head, dout in (("rec", d_recon), ("msk", d_gate)):
        y = cache.outputs[head]
        dh = dout * y * (1.0 - y)
        for i in (3, 2, 1):
            h_in, pre = cache.dec[head][i - 1]
            if i < 3:
                dh = _lrelu_grad(pre, dh)
            dh, grads[f"{head}{i}.w"], grads[f"{head}{i}.b"] = deconv2d_s2_backward(dh, h_in, p[f"{head}{i}.w"])
        dz = dh if dz is None else dz + dh
    dh = dz
    for i in (3, 2, 1):
        shape, cols, pre = cache.enc[i - 1]
        dh = _lrelu_grad(pre, dh)
        dh, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = conv2d_s2_backward(dh, cols, p[f"enc{i}.w"], shape)
    return grads


# ---------------------------------------------------------------------------
# optimiser


def adam_step(
    state: ModelState,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ModelState:
    """Bias-corrected Adam update, in place.  Returns ``state`` for chaining."""
    for name, g in grads.items():
        if g.shape != state.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {state.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = state.params[name]
        g = g.astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = "HISIR-CKPT1"


def _entries(state: ModelState):
    for name in sorted(state.params):
        yield name, state.params[name]
    for name in sorted(state.params):
        yield f"adam.m.{name}", state.m[name]
    for name in sorted(state.params):
        yield f"adam.v.{name}", state.v[name]


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    """Text index (one ``name d0xd1x...`` line per array) then one FMAP1 block per array."""
    entries = list(_entries(state))
    lines = [CKPT_MAGIC, f"step {state.step}", f"count {len(entries)}"]
    lines += [f"{name} {'x'.join(str(d) for d in arr.shape)}" for name, arr in entries]
    blob = bytearray(("\n".join(lines) + "\n").encode("ascii"))
    for _, arr in entries:
        flat = np.asarray(arr, dtype=np.float32).reshape(1, -1, 1)
        blob += encode_float_map(flat)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> ModelState:
    buf = Path(path).read_bytes()
    pos = 0

    def line() -> str:
        nonlocal pos
        nl = buf.index(b"\n", pos)
        text = buf[pos:nl].decode("ascii")
        pos = nl + 1
        return text

    if line() != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    step = int(line().split()[1])
    count = int(line().split()[1])
    index = []
    for _ in range(count):
        name, dims = line().split()
        index.append((name, tuple(int(d) for d in dims.split("x"))))
    arrays = {}
    for name, shape in index:
        flat, pos = decode_float_map(buf, pos)
        arrays[name] = flat.reshape(shape).copy()
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    params = {k: a for k, a in arrays.items() if not k.startswith("adam.")}
    m = {k[len("adam.m.") :]: a for k, a in arrays.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v.") :]: a for k, a in arrays.items() if k.startswith("adam.v.")}
    return ModelState(params, m, v, step)
