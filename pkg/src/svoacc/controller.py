"""LSTM acceleration policy conditioned on a social-preference angle."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import ConfigurationError, FormatError, ShapeError, as_phi

INPUT_DIM = 3
FORMAT_VERSION = 1
_MAGIC = b"SVOACCP\x00"
_TEXT_MAGIC = "svoacc-controller"

# learnable blocks, in serialisation order; gate order inside blocks is (input, forget, cell, output)
WEIGHT_BLOCKS = ("w_ih", "w_hh", "b", "w_head", "b_head")


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ControllerParams:
    hidden_dim: int
    seq_len: int
    a_lim: float
    w_ih: np.ndarray     # (4H, 3)
    w_hh: np.ndarray     # (4H, H)
    b: np.ndarray        # (4H,)
    w_head: np.ndarray   # (H + 2,)  hidden state then (cos phi, sin phi)
    b_head: float
    offset: np.ndarray = field(default_factory=lambda: np.zeros(INPUT_DIM))
    scale: np.ndarray = field(default_factory=lambda: np.ones(INPUT_DIM))
    input_dim: int = INPUT_DIM

    def __post_init__(self):
        for name in ("w_ih", "w_hh", "b", "w_head", "offset", "scale"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "b_head", float(self.b_head))
        object.__setattr__(self, "a_lim", float(self.a_lim))
        H = int(self.hidden_dim)
        if self.input_dim != INPUT_DIM:
            raise ShapeError(f"input_dim must be {INPUT_DIM}")
        if H < 1 or int(self.seq_len) < 1:
            raise ConfigurationError("hidden_dim and seq_len must be >= 1")
        if not (math.isfinite(self.a_lim) and self.a_lim > 0):
            raise ConfigurationError("a_lim must be > 0")
        expected = {"w_ih": (4 * H, INPUT_DIM), "w_hh": (4 * H, H), "b": (4 * H,),
                    "w_head": (H + 2,), "offset": (INPUT_DIM,), "scale": (INPUT_DIM,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if np.any(self.scale <= 0):
            raise ConfigurationError("normalisation scales must be > 0")

    @property
    def n_weights(self) -> int:
        return self.w_ih.size + self.w_hh.size + self.b.size + self.w_head.size + 1

    def to_vector(self) -> np.ndarray:
        """Flatten the learnable weights in :data:`WEIGHT_BLOCKS` order."""
        return np.concatenate([self.w_ih.ravel(), self.w_hh.ravel(), self.b,
                               self.w_head, [self.b_head]])

    def with_vector(self, theta) -> "ControllerParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_weights,):
            raise ShapeError(f"expected {self.n_weights} weights, got {theta.shape}")
        H = self.hidden_dim
        sizes = [4 * H * INPUT_DIM, 4 * H * H, 4 * H, H + 2, 1]
        parts = np.split(theta, np.cumsum(sizes)[:-1])
        return replace(self, w_ih=parts[0].reshape(4 * H, INPUT_DIM),
                       w_hh=parts[1].reshape(4 * H, H), b=parts[2], w_head=parts[3],
                       b_head=float(parts[4][0]))

    def __eq__(self, other):
        if not isinstance(other, ControllerParams):
            return NotImplemented
        head = (self.hidden_dim, self.seq_len, self.a_lim, self.b_head, self.input_dim)
        if head != (other.hidden_dim, other.seq_len, other.a_lim, other.b_head, other.input_dim):
            return False
        return all(np.array_equal(getattr(self, n), getattr(other, n))
                   for n in ("w_ih", "w_hh", "b", "w_head", "offset", "scale"))

    __hash__ = None


def init_params(hidden_dim=32, seq_len=10, a_lim=3.0, seed=0, offset=None, scale=None) -> ControllerParams:
    """Seeded initialisation: uniform in +-1/sqrt(H), forget-gate biases shifted by +1."""
    rng = np.random.default_rng(seed)
    H = int(hidden_dim)
    bound = 1.0 / math.sqrt(H)
    w_ih = rng.uniform(-bound, bound, size=(4 * H, INPUT_DIM))
    w_hh = rng.uniform(-bound, bound, size=(4 * H, H))
    b = rng.uniform(-bound, bound, size=4 * H)
    b[H:2 * H] += 1.0
    w_head = rng.uniform(-bound, bound, size=H + 2)
    b_head = rng.uniform(-bound, bound)
    return ControllerParams(
        hidden_dim=H, seq_len=int(seq_len), a_lim=a_lim, w_ih=w_ih, w_hh=w_hh, b=b,
        w_head=w_head, b_head=b_head,
        offset=np.zeros(INPUT_DIM) if offset is None else offset,
        scale=np.ones(INPUT_DIM) if scale is None else scale,
    )


def encode_phi(phi) -> tuple:
    """``(cos phi, sin phi)``, exact at 0 and pi/2."""
    phi = as_phi(phi)
    if phi == 0.0:
        return (1.0, 0.0)
    if phi == math.pi / 2:
        return (0.0, 1.0)
    return (math.cos(phi), math.sin(phi))


@dataclass(frozen=True, eq=False)
class ObservationWindow:
    """``seq_len`` rows of raw ``(spacing, closing speed, own speed)``, oldest first."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != INPUT_DIM or rows.shape[0] < 1:
            raise ShapeError(f"window must have shape (seq_len, {INPUT_DIM}), got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ConfigurationError("window contains non-finite values")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    def __len__(self):
        return len(self.rows)


def window_from_history(history, seq_len: int) -> ObservationWindow:
    """Last ``seq_len`` observations, left-padded by repeating the first one."""
    history = list(history)
    if not history:
        raise ShapeError("empty observation history")
    rows = history[-seq_len:]
    if len(rows) < seq_len:
        rows = [history[0]] * (seq_len - len(rows)) + rows
    return ObservationWindow(np.array(rows, dtype=float))


def _sigmoid(z):
    # tanh form cannot overflow for large |z|
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def lstm_cell(x, h_prev, c_prev, w_ih, w_hh, b):
    """Batched LSTM cell over rows. Returns ``(h, c, cache)``."""
    H = h_prev.shape[-1]
    z = x @ w_ih.T + h_prev @ w_hh.T + b
    gates = _sigmoid(z)
    i = gates[..., :H]
    f = gates[..., H:2 * H]
    g = np.tanh(z[..., 2 * H:3 * H])
    o = gates[..., 3 * H:]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, g, o, tc)


def lstm_cell_backward(dh, dc, cache, w_ih, w_hh):
    """Reverse pass of :func:`lstm_cell`.

    Returns ``(dx, dh_prev, dc_prev, dw_ih, dw_hh, db)``; weight gradients are
    summed over rows.
    """
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                         dg * (1.0 - g * g), do * o * (1.0 - o)], axis=-1)
    dz2 = dz.reshape(-1, dz.shape[-1])
    dw_ih = dz2.T @ x.reshape(-1, x.shape[-1])
    dw_hh = dz2.T @ h_prev.reshape(-1, h_prev.shape[-1])
    db = dz2.sum(axis=0)
    dx = dz @ w_ih
    dh_prev = dz @ w_hh
    return dx, dh_prev, dc_prev, dw_ih, dw_hh, db


def normalize(params: ControllerParams, rows):
    return (np.asarray(rows, dtype=float) - params.offset) / params.scale


def lstm_forward(params: ControllerParams, window: ObservationWindow) -> np.ndarray:
    """Final hidden state after running the window from zero initial state."""
    if not isinstance(window, ObservationWindow):
        window = ObservationWindow(window)
    x = normalize(params, window.rows)
    h = np.zeros((1, params.hidden_dim))
    c = np.zeros((1, params.hidden_dim))
    for row in x:
        h, c, _ = lstm_cell(row[None, :], h, c, params.w_ih, params.w_hh, params.b)
    return h[0]


def head(params: ControllerParams, hidden, phi) -> float:
    cos_phi, sin_phi = encode_phi(phi)
    H = params.hidden_dim
    return float(hidden @ params.w_head[:H] + params.w_head[H] * cos_phi
                 + params.w_head[H + 1] * sin_phi + params.b_head)


def predict_accel(params: ControllerParams, window: ObservationWindow, phi) -> float:
    """Bounded acceleration ``a_lim * tanh(head([h; cos phi; sin phi]))``."""
    z = head(params, lstm_forward(params, window), phi)
    return params.a_lim * math.tanh(z)


# serialisation

def _header(params):
    return {"format_version": FORMAT_VERSION, "input_dim": params.input_dim,
            "hidden_dim": params.hidden_dim, "seq_len": params.seq_len, "a_lim": params.a_lim,
            "offset": params.offset.tolist(), "scale": params.scale.tolist()}


def params_to_bytes(params: ControllerParams) -> bytes:
    head_ = struct.pack("<8sIIIId", _MAGIC, FORMAT_VERSION, params.input_dim,
                        params.hidden_dim, params.seq_len, params.a_lim)
    norm = np.concatenate([params.offset, params.scale]).astype("<f8").tobytes()
    return head_ + norm + params.to_vector().astype("<f8").tobytes()


def params_from_bytes(data: bytes) -> ControllerParams:
    fixed = struct.calcsize("<8sIIIId")
    if len(data) < fixed or data[:8] != _MAGIC:
        raise FormatError("not a controller checkpoint")
    magic, version, input_dim, hidden, seq_len, a_lim = struct.unpack_from("<8sIIIId", data)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if input_dim != INPUT_DIM:
        raise FormatError(f"checkpoint input_dim {input_dim} != {INPUT_DIM}")
    body = np.frombuffer(data[fixed:], dtype="<f8").astype(np.float64)
    n_norm = 2 * INPUT_DIM
    template = init_params(hidden, seq_len, a_lim if a_lim > 0 else 1.0, seed=0)
    if body.size != n_norm + template.n_weights:
        raise FormatError("checkpoint size does not match its header")
    params = replace(template, a_lim=a_lim, offset=body[:INPUT_DIM], scale=body[INPUT_DIM:n_norm])
    return params.with_vector(body[n_norm:])


def params_to_text(params: ControllerParams) -> str:
    lines = [_TEXT_MAGIC]
    for key, value in _header(params).items():
        if isinstance(value, list):
            value = " ".join(repr(float(v)) for v in value)
        lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    for name in WEIGHT_BLOCKS:
        values = np.atleast_1d(getattr(params, name)).ravel()
        lines.append(f"{name} = " + " ".join(repr(float(v)) for v in values))
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> ControllerParams:
    lines = text.splitlines()
    if not lines or lines[0].strip() != _TEXT_MAGIC:
        raise FormatError("not a text controller checkpoint")
    kv = {}
    for line in lines[1:]:
        if line.strip():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    try:
        version = int(kv["format_version"])
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        if int(kv["input_dim"]) != INPUT_DIM:
            raise FormatError("checkpoint input_dim mismatch")
        H = int(kv["hidden_dim"])
        floats = {k: np.array([float(t) for t in kv[k].split()]) for k in
                  ("offset", "scale") + WEIGHT_BLOCKS}
        return ControllerParams(
            hidden_dim=H, seq_len=int(kv["seq_len"]), a_lim=float(kv["a_lim"]),
            w_ih=floats["w_ih"].reshape(4 * H, INPUT_DIM), w_hh=floats["w_hh"].reshape(4 * H, H),
            b=floats["b"], w_head=floats["w_head"], b_head=floats["b_head"][0],
            offset=floats["offset"], scale=floats["scale"])
    except (KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed text checkpoint: {exc}") from exc


def save_params(params: ControllerParams, path, fmt: str = "binary") -> Path:
    path = Path(path)
    if fmt == "binary":
        path.write_bytes(params_to_bytes(params))
    elif fmt == "text":
        path.write_text(params_to_text(params), encoding="utf-8")
    else:
        raise ConfigurationError(f"unknown checkpoint format {fmt!r}")
    return path


def load_params(path) -> ControllerParams:
    """Load a checkpoint written by :func:`save_params` (either form)."""
    data = Path(path).read_bytes()
    if data.startswith(_MAGIC):
        return params_from_bytes(data)
    try:
        return params_from_text(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError("not a controller checkpoint") from exc
