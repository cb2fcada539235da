"""From-scratch LSTM surrogate of the daily root-zone pressure head.

The network is a stack of LSTM layers followed by a linear readout of the
final hidden state. Windows of lag+1 daily rows [x, u_irrig, rain, kc, et0]
(min-max normalized) map to the next day's normalized head. Training is
plain backpropagation through time with adaptive-moment updates; prediction
gradients with respect to the irrigation inputs are computed by reverse
accumulation through the unrolled recursion, which the schedulers consume.

Gate blocks are stored stacked as (4H, D) / (4H, H) matrices in the order
input, forget, output, candidate; the named per-gate matrices are views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid

from .datagen import CHANNELS, NormStats, SupervisedDataset
from .errors import Diverged, ShapeMismatch
from .serialize import decode_array, dump_json, encode_array, load_json

MODEL_FORMAT = "soilmpc-lstm-v1"


class LstmLayerWeights:
    """One layer's parameters: stacked gate matrices plus per-gate views."""

    __slots__ = ("wx", "wh", "b", "hidden")

    def __init__(self, wx, wh, b):
        self.wx = np.asarray(wx, dtype=float)
        self.wh = np.asarray(wh, dtype=float)
        self.b = np.asarray(b, dtype=float)
        hidden = self.wh.shape[1]
        if self.wx.shape[0] != 4 * hidden or self.wh.shape != (4 * hidden, hidden):
            raise ShapeMismatch("stacked gate matrices must be (4H, D) and (4H, H)")
        if self.b.shape != (4 * hidden,):
            raise ShapeMismatch("gate bias must be (4H,)")
        self.hidden = hidden

    def _block(self, arr, gate):
        h = self.hidden
        idx = {"i": 0, "f": 1, "o": 2, "c": 3}[gate]
        return arr[idx * h:(idx + 1) * h]

    # named views onto the stacked storage
    @property
    def w_i(self): return self._block(self.wx, "i")
    @property
    def w_f(self): return self._block(self.wx, "f")
    @property
    def w_o(self): return self._block(self.wx, "o")
    @property
    def w_c(self): return self._block(self.wx, "c")
    @property
    def u_i(self): return self._block(self.wh, "i")
    @property
    def u_f(self): return self._block(self.wh, "f")
    @property
    def u_o(self): return self._block(self.wh, "o")
    @property
    def u_c(self): return self._block(self.wh, "c")
    @property
    def b_i(self): return self._block(self.b, "i")
    @property
    def b_f(self): return self._block(self.b, "f")
    @property
    def b_o(self): return self._block(self.b, "o")
    @property
    def b_c(self): return self._block(self.b, "c")

    @property
    def input_dim(self):
        return self.wx.shape[1]

    def copy(self):
        return LstmLayerWeights(self.wx.copy(), self.wh.copy(), self.b.copy())


def init_layer(input_dim, hidden, rng) -> LstmLayerWeights:
    """Uniform +-1/sqrt(hidden) weights, forget-gate bias one."""
    bound = 1.0 / np.sqrt(hidden)
    wx = rng.uniform(-bound, bound, size=(4 * hidden, input_dim))
    wh = rng.uniform(-bound, bound, size=(4 * hidden, hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return LstmLayerWeights(wx, wh, b)


def cell_forward(m, h_prev, c_prev, weights: LstmLayerWeights):
    """One LSTM cell update; returns (h, C).

    i = sig(w_i m + U_i h + b_i), f and o alike, candidate = tanh(...),
    C = f*C_prev + i*candidate, h = o*tanh(C). Accepts 1-D vectors or
    batches with a leading axis.
    """
    a = m @ weights.wx.T + h_prev @ weights.wh.T + weights.b
    hid = weights.hidden
    i = sigmoid(a[..., 0 * hid:1 * hid])
    f = sigmoid(a[..., 1 * hid:2 * hid])
    o = sigmoid(a[..., 2 * hid:3 * hid])
    g = np.tanh(a[..., 3 * hid:4 * hid])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


@dataclass
class LstmModel:
    """Stacked LSTM plus scalar readout and the dataset's normalization."""

    layers: list
    w_y: np.ndarray
    b_y: float
    lag: int
    stats: NormStats
    channel_order: tuple = CHANNELS
    meta: dict = field(default_factory=dict)

    @property
    def hidden(self):
        return self.layers[-1].hidden

    @property
    def window_shape(self):
        return (self.lag + 1, len(self.channel_order))

    def check_window(self, window):
        window = np.asarray(window, dtype=float)
        if window.shape != self.window_shape:
            raise ShapeMismatch(
                f"window must be {self.window_shape}, got {window.shape}")
        return window

    def copy(self):
        return LstmModel(
            layers=[l.copy() for l in self.layers],
            w_y=self.w_y.copy(),
            b_y=float(self.b_y),
            lag=self.lag,
            stats=self.stats,
            channel_order=self.channel_order,
            meta=dict(self.meta),
        )

    # -- persistence ------------------------------------------------------
    def save(self, path):
        dump_json({
            "format": MODEL_FORMAT,
            "lag": self.lag,
            "channel_order": list(self.channel_order),
            "layers": [{
                "wx": encode_array(l.wx),
                "wh": encode_array(l.wh),
                "b": encode_array(l.b),
            } for l in self.layers],
            "w_y": encode_array(self.w_y),
            "b_y": float(self.b_y),
            "mins": encode_array(self.stats.mins),
            "maxs": encode_array(self.stats.maxs),
            "meta": self.meta,
        }, path)

    @classmethod
    def load(cls, path):
        d = load_json(path)
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} file: {path}")
        return cls(
            layers=[LstmLayerWeights(decode_array(l["wx"]), decode_array(l["wh"]),
                                     decode_array(l["b"]))
                    for l in d["layers"]],
            w_y=decode_array(d["w_y"]),
            b_y=float(d["b_y"]),
            lag=int(d["lag"]),
            stats=NormStats(decode_array(d["mins"]), decode_array(d["maxs"])),
            channel_order=tuple(d["channel_order"]),
            meta=d.get("meta", {}),
        )


def new_model(dataset: SupervisedDataset, hidden=32, n_layers=1, seed=0) -> LstmModel:
    rng = np.random.default_rng(seed)
    dims = [len(dataset.channel_order)] + [hidden] * n_layers
    layers = [init_layer(dims[k], hidden, rng) for k in range(n_layers)]
    bound = 1.0 / np.sqrt(hidden)
    return LstmModel(
        layers=layers,
        w_y=rng.uniform(-bound, bound, size=hidden),
        b_y=0.0,
        lag=dataset.lag,
        stats=dataset.stats,
        channel_order=dataset.channel_order,
    )


# ---------------------------------------------------------------------------
# forward / backward over whole windows (time-major internally)
# ---------------------------------------------------------------------------

def _forward_stack(model, windows):
    """windows: (B, T, D) normalized. Returns (pred_norm (B,), tape)."""
    x = np.swapaxes(np.asarray(windows, dtype=float), 0, 1)  # (T, B, D)
    tape = []
    for layer in model.layers:
        T, B, _ = x.shape
        hid = layer.hidden
        h = np.zeros((B, hid))
        c = np.zeros((B, hid))
        steps = []
        hs = np.empty((T, B, hid))
        for t in range(T):
            a = x[t] @ layer.wx.T + h @ layer.wh.T + layer.b
            i = sigmoid(a[:, 0 * hid:1 * hid])
            f = sigmoid(a[:, 1 * hid:2 * hid])
            o = sigmoid(a[:, 2 * hid:3 * hid])
            g = np.tanh(a[:, 3 * hid:4 * hid])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            steps.append((x[t], h, c, i, f, o, g, tc))
            h, c = h_new, c_new
            hs[t] = h
        tape.append((layer, steps, hs))
        x = hs
    pred = x[-1] @ model.w_y + model.b_y
    return pred, tape


def _backward_stack(model, tape, dpred, want_params=False, want_inputs=True):
    """Reverse sweep. dpred: (S,) seeds aligned with the forward batch axis.

    Returns (dwindows (S, T, D) or None, grads or None); grads is a list of
    arrays matching _param_arrays(model) when want_params.
    """
    top_hs = tape[-1][2]
    S = dpred.shape[0]
    grads = None
    if want_params:
        grads = [np.zeros_like(a) for a in _param_arrays(model)]
        grads[-2] += top_hs[-1].T @ dpred       # w_y
        grads[-1][0] += dpred.sum()             # b_y
    # adjoint arriving at each layer's hidden sequence; S may differ from the
    # forward batch (e.g. one forward window, many Jacobian seeds)
    T = top_hs.shape[0]
    dh_ext = np.zeros((T, S, top_hs.shape[2]))
    dh_ext[-1] = dpred[:, None] * model.w_y
    dx_out = None
    for li in range(len(tape) - 1, -1, -1):
        layer, steps, _ = tape[li]
        hid = layer.hidden
        dm_seq = np.zeros((T, S, layer.input_dim))
        dh = np.zeros((S, hid))
        dc = np.zeros((S, hid))
        if want_params:
            g_wx = np.zeros_like(layer.wx)
            g_wh = np.zeros_like(layer.wh)
            g_b = np.zeros_like(layer.b)
        for t in range(T - 1, -1, -1):
            m_t, h_prev, c_prev, i, f, o, g, tc = steps[t]
            dh = dh + dh_ext[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            df = dc * c_prev
            di = dc * g
            dg = dc * i
            da = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                do * o * (1.0 - o),
                dg * (1.0 - g * g),
            ], axis=1)
            dm_seq[t] = da @ layer.wx
            dh = da @ layer.wh
            dc = dc * f
            if want_params:
                g_wx += da.T @ m_t
                g_wh += da.T @ h_prev
                g_b += da.sum(axis=0)
        if want_params:
            grads[3 * li + 0] += g_wx
            grads[3 * li + 1] += g_wh
            grads[3 * li + 2] += g_b
        dh_ext = dm_seq
        dx_out = dm_seq
    dwindows = np.swapaxes(dx_out, 0, 1) if want_inputs else None
    return dwindows, grads


def _param_arrays(model):
    """Flat list of trainable arrays; b_y is boxed so it updates in place."""
    arrays = []
    for layer in model.layers:
        arrays.extend([layer.wx, layer.wh, layer.b])
    arrays.append(model.w_y)
    arrays.append(np.array([model.b_y]))
    return arrays


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def predict_one_step(model: LstmModel, window) -> float:
    """Denormalized next-day head [mm] from a normalized (lag+1, 5) window."""
    window = model.check_window(window)
    pred, _ = _forward_stack(model, window[None])
    return float(model.stats.denormalize_head(pred[0]))


@dataclass
class Rollout:
    """Forward tape of a recursive multi-day prediction."""

    heads_norm: np.ndarray     # (N,)
    windows: list              # per-step normalized windows
    tapes: list                # per-step forward tapes
    model: LstmModel

    @property
    def heads_mm(self):
        return self.model.stats.denormalize_head(self.heads_norm)


def rollout(model: LstmModel, window, future_inputs) -> Rollout:
    """Recursively predict 1 + len(future_inputs) days ahead.

    ``window`` is the normalized seed window whose last row carries day 0's
    inputs; ``future_inputs`` holds normalized [u, rain, kc, et0] rows for
    the following days. Each prediction is appended as the next day's head
    channel, exactly as the scheduler's prediction model requires.
    """
    window = model.check_window(window)
    future_inputs = np.asarray(future_inputs, dtype=float)
    if future_inputs.ndim != 2 or future_inputs.shape[1] != 4:
        raise ShapeMismatch("future inputs must be (N-1, 4)")
    n = len(future_inputs) + 1
    heads = np.empty(n)
    windows, tapes = [], []
    current = window
    for k in range(n):
        pred, tape = _forward_stack(model, current[None])
        heads[k] = pred[0]
        windows.append(current)
        tapes.append(tape)
        if k < n - 1:
            nxt = np.empty_like(current)
            nxt[:-1] = current[1:]
            nxt[-1, 0] = heads[k]
            nxt[-1, 1:] = future_inputs[k]
            current = nxt
    return Rollout(heads_norm=heads, windows=windows, tapes=tapes, model=model)


def predict_recursive(model: LstmModel, window, future_inputs) -> np.ndarray:
    """N-day head sequence [mm]; see rollout for argument conventions."""
    return rollout(model, window, future_inputs).heads_mm


def rollout_vjp(model: LstmModel, roll: Rollout, seeds) -> np.ndarray:
    """Reverse accumulation through a rollout.

    ``seeds``: (S, N) adjoints of the normalized predicted heads. Returns
    (S, N) adjoints of the normalized irrigation entries, one per decision
    day. Predicted heads feed later windows, so their adjoints flow back
    into earlier steps before those steps are unwound.
    """
    seeds = np.asarray(seeds, dtype=float)
    n = len(roll.windows)
    lag1 = model.lag + 1
    S = seeds.shape[0]
    dpred = seeds.astype(float).copy()  # (S, N), accumulated in place
    du = np.zeros((S, n))
    for k in range(n - 1, -1, -1):
        dwin, _ = _backward_stack(model, roll.tapes[k], dpred[:, k], want_params=False)
        # window rows are days k-lag .. k relative to the decision start
        for r in range(lag1):
            day = k - model.lag + r
            if day < 0:
                continue
            du[:, day] += dwin[:, r, 1]
            if day >= 1:
                dpred[:, day - 1] += dwin[:, r, 0]
    return du


def input_gradient(model: LstmModel, window, future_inputs) -> np.ndarray:
    """Jacobian [mm per mm/day] of predicted heads w.r.t. irrigation depths.

    Entry (j, k) is the sensitivity of day j+1's predicted head to the
    irrigation applied on day k. Causality makes it lower triangular.
    """
    roll = rollout(model, window, future_inputs)
    n = len(roll.windows)
    du_norm = rollout_vjp(model, roll, np.eye(n))
    span_x = model.stats.spans[0]
    span_u = model.stats.spans[1]
    return du_norm * (span_x / span_u)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 400
    patience: int = 40
    seed: int = 0
    hidden: int = 32
    n_layers: int = 1

    def __post_init__(self):
        for name in ("learning_rate", "beta1", "beta2", "eps", "batch_size",
                     "max_epochs", "patience", "hidden", "n_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainResult:
    model: LstmModel
    history: list          # (epoch, train_mse, val_mse)
    best_epoch: int
    best_val: float


def _mse_and_grads(model, X, y):
    pred, tape = _forward_stack(model, X)
    err = pred - y
    mse = float(np.mean(err ** 2))
    dpred = 2.0 * err / len(y)
    _, grads = _backward_stack(model, tape, dpred, want_params=True, want_inputs=False)
    return mse, grads


def _val_mse(model, X, y):
    if len(y) == 0:
        return float("nan")
    pred, _ = _forward_stack(model, X)
    return float(np.mean((pred - y) ** 2))


def train(dataset: SupervisedDataset, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit the surrogate; returns the weights of the best validation epoch.

    Windows are shuffled each epoch with a seeded generator and states reset
    per window. Stops early once validation loss has not improved for
    ``patience`` epochs. Raises Diverged on non-finite training loss.
    """
    X_train, y_train, _ = dataset.split("train")
    X_val, y_val, _ = dataset.split("val")
    if len(y_val) == 0:  # fall back to training loss for tiny datasets
        X_val, y_val = X_train, y_train
    rng = np.random.default_rng(config.seed)
    model = new_model(dataset, hidden=config.hidden, n_layers=config.n_layers,
                      seed=int(rng.integers(0, 2**63 - 1)))

    params = _param_arrays(model)
    mom = [np.zeros_like(p) for p in params]
    vel = [np.zeros_like(p) for p in params]
    t_adam = 0

    def apply_grads(grads):
        nonlocal t_adam
        t_adam += 1
        lr = config.learning_rate
        b1, b2 = config.beta1, config.beta2
        corr1 = 1.0 - b1 ** t_adam
        corr2 = 1.0 - b2 ** t_adam
        for p, g, m_, v_ in zip(params, grads, mom, vel):
            m_ *= b1
            m_ += (1 - b1) * g
            v_ *= b2
            v_ += (1 - b2) * g * g
            p -= lr * (m_ / corr1) / (np.sqrt(v_ / corr2) + config.eps)
        model.b_y = float(params[-1][0])

    history = []
    best_val = np.inf
    best_epoch = -1
    best_weights = None
    stale = 0
    n = len(y_train)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        train_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            mse, grads = _mse_and_grads(model, X_train[idx], y_train[idx])
            if not np.isfinite(mse):
                raise Diverged(f"training loss became non-finite at epoch {epoch}")
            train_losses.append(mse)
            apply_grads(grads)
        val = _val_mse(model, X_val, y_val)
        history.append((epoch, float(np.mean(train_losses)), val))
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_weights = [p.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    for p, w in zip(params, best_weights):
        p[...] = w
    model.b_y = float(params[-1][0])
    model.meta = {"best_epoch": best_epoch, "best_val": best_val,
                  "epochs_run": len(history)}
    return TrainResult(model=model, history=history,
                       best_epoch=best_epoch, best_val=best_val)
