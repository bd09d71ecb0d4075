"""Dense ReLU feedforward networks with hand-written backpropagation.

A network maps R^d to R through hidden layers ``relu(A_l h + b_l)`` and a final
affine map, optionally followed by an output activation (softplus and/or a
clipping operator). Training supports Adam and Nesterov SGD with a plateau
learning-rate schedule and early stopping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

SOFTPLUS_LINEAR_ABOVE = 30.0


class InputShapeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


# ---------------------------------------------------------------------------
# output activations


@dataclass(frozen=True)
class OutputActivation:
    """Composable output stage: optional softplus, then optional clips.

    ``upper`` applies ``min(z, upper)``; ``symmetric`` clips into
    ``[-symmetric, symmetric]``.
    """

    softplus: bool = False
    upper: float | None = None
    symmetric: float | None = None

    def __post_init__(self):
        if self.upper is not None and not self.upper > 0:
            raise ValueError("clip level must be positive")
        if self.symmetric is not None and not self.symmetric > 0:
            raise ValueError("symmetric clip level must be positive")

    @classmethod
    def identity(cls) -> "OutputActivation":
        return cls()

    def with_clip(self, xi: float | None) -> "OutputActivation":
        return OutputActivation(self.softplus, xi, self.symmetric)

    def apply(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return the activated output and its derivative with respect to z."""
        deriv = np.ones_like(z)
        out = z
        if self.softplus:
            big = z > SOFTPLUS_LINEAR_ABOVE
            safe = np.where(big, 0.0, z)
            out = np.where(big, z, np.log1p(np.exp(safe)))
            deriv = expit(z)
        if self.upper is not None:
            cut = out > self.upper
            out = np.where(cut, self.upper, out)
            deriv = np.where(cut, 0.0, deriv)
        if self.symmetric is not None:
            b = self.symmetric
            cut = (out > b) | (out < -b)
            out = np.clip(out, -b, b)
            deriv = np.where(cut, 0.0, deriv)
        return out, deriv

    def describe(self) -> str:
        parts = ["softplus" if self.softplus else "identity"]
        if self.upper is not None:
            parts.append(f"clip={self.upper!r}")
        if self.symmetric is not None:
            parts.append(f"clip_symmetric={self.symmetric!r}")
        return " ".join(parts)

    @classmethod
    def parse(cls, text: str) -> "OutputActivation":
        tokens = text.split()
        if not tokens or tokens[0] not in ("identity", "softplus"):
            raise ValueError(f"bad output activation: {text!r}")
        kw: dict = {"softplus": tokens[0] == "softplus"}
        for tok in tokens[1:]:
            key, _, val = tok.partition("=")
            if key == "clip":
                kw["upper"] = float(val)
            elif key == "clip_symmetric":
                kw["symmetric"] = float(val)
            else:
                raise ValueError(f"bad output activation token: {tok!r}")
        return cls(**kw)


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True, eq=False)
class MlpNetwork:
    """Parameters of a ReLU network; ``weights[l]`` has shape (N_{l+1}, N_l)."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    output: OutputActivation = field(default_factory=OutputActivation)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for l, (A, b) in enumerate(zip(self.weights, self.biases)):
            if A.ndim != 2 or b.shape != (A.shape[0],):
                raise ValueError(f"layer {l}: bias shape {b.shape} vs weight {A.shape}")
            if l > 0 and A.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input dim {A.shape[1]} does not chain")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must have a single unit")

    @classmethod
    def from_dims(cls, dims: Sequence[int], output: OutputActivation | None = None,
                  fill: float = 0.0) -> "MlpNetwork":
        dims = [int(n) for n in dims]
        ws = tuple(np.full((dims[l + 1], dims[l]), fill) for l in range(len(dims) - 1))
        bs = tuple(np.full(dims[l + 1], fill) for l in range(len(dims) - 1))
        return cls(ws, bs, output or OutputActivation())

    @classmethod
    def init_he(cls, dims: Sequence[int], rng: np.random.Generator,
                output: OutputActivation | None = None) -> "MlpNetwork":
        """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
        dims = [int(n) for n in dims]
        if any(n <= 0 for n in dims) or dims[-1] != 1:
            raise ValueError(f"invalid layer dims {dims}")
        ws = tuple(rng.normal(0.0, math.sqrt(2.0 / dims[l]), size=(dims[l + 1], dims[l]))
                   for l in range(len(dims) - 1))
        bs = tuple(np.zeros(dims[l + 1]) for l in range(len(dims) - 1))
        return cls(ws, bs, output or OutputActivation())

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [A.shape[0] for A in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def with_output(self, output: OutputActivation) -> "MlpNetwork":
        return MlpNetwork(self.weights, self.biases, output)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for A, b in zip(self.weights, self.biases):
            out.extend((A, b))
        return out

    def predict(self, x) -> np.ndarray:
        """Evaluate on a batch of rows (n, d); returns shape (n,)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise InputShapeError(f"expected rows of dimension {self.input_dim}, got {x.shape}")
        h = x
        for A, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ A.T + b, 0.0)
        z = (h @ self.weights[-1].T + self.biases[-1])[:, 0]
        return self.output.apply(z)[0]

    def __call__(self, x) -> float | np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            if x.shape[0] != self.input_dim:
                raise InputShapeError(
                    f"expected input of dimension {self.input_dim}, got {x.shape[0]}")
            return float(self.predict(x[None, :])[0])
        return self.predict(x)


def forward(net: MlpNetwork, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputShapeError("forward takes a single input vector; use net.predict for batches")
    return net(x)


@dataclass(frozen=True)
class NetworkStats:
    width: int
    depth: int
    size: int
    weight_bound: float


def network_stats(net: MlpNetwork) -> NetworkStats:
    dims = net.layer_dims
    hidden = dims[1:-1]
    params = net.parameters()
    return NetworkStats(
        width=max(hidden) if hidden else 0,
        depth=len(hidden),
        size=int(sum(np.count_nonzero(p) for p in params)),
        weight_bound=float(max(np.max(np.abs(p)) for p in params)),
    )


# ---------------------------------------------------------------------------
# flat parameter layout used by training


class _Layout:
    def __init__(self, dims: Sequence[int]):
        self.dims = list(dims)
        self.slices = []
        off = 0
        for l in range(len(dims) - 1):
            na = dims[l + 1] * dims[l]
            self.slices.append(((off, off + na), (off + na, off + na + dims[l + 1])))
            off += na + dims[l + 1]
        self.size = off

    def views(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for l, ((a0, a1), (b0, b1)) in enumerate(self.slices):
            A = flat[a0:a1].reshape(self.dims[l + 1], self.dims[l])
            out.append((A, flat[b0:b1]))
        return out

    def pack(self, net: MlpNetwork) -> np.ndarray:
        return np.concatenate([p.ravel() for p in net.parameters()])

    def unpack(self, flat: np.ndarray, output: OutputActivation) -> MlpNetwork:
        flat = flat.copy()
        vs = self.views(flat)
        return MlpNetwork(tuple(A for A, _ in vs), tuple(b for _, b in vs), output)


def _forward_cache(weights, biases, output: OutputActivation, x):
    acts = [x]
    h = x
    for A, b in zip(weights[:-1], biases[:-1]):
        h = h @ A.T
        h += b
        np.maximum(h, 0.0, out=h)
        acts.append(h)
    z = (h @ weights[-1].T + biases[-1])[:, 0]
    out, dact = output.apply(z)
    return out, acts, dact


def _backward(weights, acts, dz, grad_views):
    """Backpropagate dL/dz (pre-activation of the output) into grad_views."""
    delta = dz[:, None]
    for l in range(len(weights) - 1, -1, -1):
        gA, gb = grad_views[l]
        np.matmul(delta.T, acts[l], out=gA)
        gb[...] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ weights[l]
            delta *= acts[l] > 0.0


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class RegressionData:
    """Inputs, targets and optional nonnegative per-sample weights."""

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        if self.w is not None:
            object.__setattr__(self, "w", np.asarray(self.w, dtype=float).ravel())
            if self.w.shape != self.y.shape:
                raise ValueError("weights and targets differ in length")
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("inputs and targets differ in length")

    def __len__(self):
        return self.y.shape[0]

    def take(self, idx) -> "RegressionData":
        return RegressionData(self.x[idx], self.y[idx], None if self.w is None else self.w[idx])


@dataclass(frozen=True)
class RatioData:
    """Source and target covariate rows for least-squares ratio fitting."""

    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "source", np.asarray(self.source, dtype=float))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))
        if len(self.source) == 0 or len(self.target) == 0:
            raise ValueError("source and target batches must be nonempty")

    def __len__(self):
        return self.source.shape[0]


class SquaredLoss:
    """(1/n) sum w_i (y_i - f(x_i))^2, with w = 1 when no weights are given.

    With ``resample`` the weights act through the batches instead of the
    gradient: each epoch draws n rows with probability proportional to w and
    fits them unweighted. The expected step is the weighted gradient up to the
    constant mean weight, and no single heavy row can dominate a step. The
    loss value (and so any validation monitoring) stays weighted.
    """

    name = "squared"

    def __init__(self, resample: bool = False):
        self.resample = resample

    def inputs(self, data: RegressionData) -> np.ndarray:
        return data.x

    def value_and_grad(self, out: np.ndarray, data: RegressionData):
        resid = out - data.y
        n = resid.shape[0]
        wr = resid if data.w is None else data.w * resid
        return float(np.dot(wr, resid) / n), 2.0 * wr / n

    def batches(self, data: RegressionData, batch_size: int,
                rng: np.random.Generator) -> Iterator[RegressionData]:
        n = len(data)
        w = data.w
        if self.resample and w is not None:
            if np.all(w == w[0]):
                # constant weights only rescale the objective
                data = RegressionData(data.x, data.y)
            else:
                idx = rng.choice(n, size=n, p=w / w.sum())
                data = RegressionData(data.x[idx], data.y[idx])
        shuffled = data.take(rng.permutation(n))
        for start in range(0, n, batch_size):
            yield shuffled.take(slice(start, start + batch_size))


class LsifLoss:
    """(1/(2 n_s)) sum v(x_s)^2 - (1/n_t) sum v(x_t)."""

    name = "lsif"

    def inputs(self, data: RatioData) -> np.ndarray:
        return np.concatenate([data.source, data.target], axis=0)

    def value_and_grad(self, out: np.ndarray, data: RatioData):
        ns = data.source.shape[0]
        nt = data.target.shape[0]
        vs, vt = out[:ns], out[ns:]
        value = 0.5 * float(np.dot(vs, vs)) / ns - float(vt.sum()) / nt
        grad = np.concatenate([vs / ns, np.full(nt, -1.0 / nt)])
        return value, grad

    def batches(self, data: RatioData, batch_size: int,
                rng: np.random.Generator) -> Iterator[RatioData]:
        # one epoch is one pass over both samples; target batches are sized
        # so they are exhausted together with the source batches
        ns, nt = data.source.shape[0], data.target.shape[0]
        steps = max(1, math.ceil(ns / batch_size))
        s_order = rng.permutation(ns)
        t_order = rng.permutation(nt)
        s_cuts = np.linspace(0, ns, steps + 1).round().astype(int)
        t_cuts = np.linspace(0, nt, steps + 1).round().astype(int)
        for k in range(steps):
            s_idx = s_order[s_cuts[k]:s_cuts[k + 1]]
            t_idx = t_order[t_cuts[k]:t_cuts[k + 1]]
            if len(s_idx) == 0 or len(t_idx) == 0:
                continue
            yield RatioData(data.source[s_idx], data.target[t_idx])


LOSSES = {"squared": SquaredLoss, "lsif": LsifLoss}


def loss_value(net: MlpNetwork, loss, data) -> float:
    out = net.predict(loss.inputs(data))
    return loss.value_and_grad(out, data)[0]


def gradient(net: MlpNetwork, loss, data) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Loss value and exact gradient as a list of (dA_l, db_l) pairs."""
    if len(data) == 0:
        raise ValueError("empty batch")
    layout = _Layout(net.layer_dims)
    flat = np.empty(layout.size)
    views = layout.views(flat)
    value = _value_and_flat_grad(net.weights, net.biases, net.output, loss, data, views)
    return value, [(A.copy(), b.copy()) for A, b in views]


def _value_and_flat_grad(weights, biases, output, loss, data, grad_views) -> float:
    x = loss.inputs(data)
    out, acts, dact = _forward_cache(weights, biases, output, x)
    value, dout = loss.value_and_grad(out, data)
    _backward(weights, acts, dout * dact, grad_views)
    return value


# ---------------------------------------------------------------------------
# optimizers and training


@dataclass(frozen=True)
class Adam:
    lr: float = 1e-3
    decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        _check_rates(self.lr, self.decay_factor)

    def state(self, n: int):
        return {"m": np.zeros(n), "v": np.zeros(n), "t": 0}

    def step(self, theta, grad, st, lr):
        st["t"] += 1
        t = st["t"]
        m, v = st["m"], st["v"]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        mhat = m / (1.0 - self.beta1 ** t)
        vhat = v / (1.0 - self.beta2 ** t)
        theta -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass(frozen=True)
class NesterovSGD:
    lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.5

    def __post_init__(self):
        _check_rates(self.lr, self.decay_factor)
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def state(self, n: int):
        return {"buf": np.zeros(n), "tmp": np.empty(n)}

    def step(self, theta, grad, st, lr):
        buf, tmp = st["buf"], st["tmp"]
        buf *= self.momentum
        buf += grad
        # theta -= lr * (grad + momentum * buf), without temporaries
        np.multiply(buf, self.momentum, out=tmp)
        tmp += grad
        tmp *= lr
        theta -= tmp


def _check_rates(lr, decay):
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay factor must lie in (0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: Adam | NesterovSGD = field(default_factory=Adam)
    max_epochs: int = 200
    batch_size: int = 128
    early_stop_patience: int = 20
    seed: int = 0
    warmup_epochs: int = 0

    def __post_init__(self):
        for name in ("max_epochs", "batch_size", "early_stop_patience"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")


@dataclass
class TrainResult:
    net: MlpNetwork
    epochs_run: int
    best_epoch: int
    best_loss: float
    history: list[tuple[int, float, float, float]]  # epoch, train, monitor, lr


def train(net: MlpNetwork, loss, data, cfg: TrainConfig, validation=None,
          rng: np.random.Generator | None = None) -> MlpNetwork:
    return train_with_history(net, loss, data, cfg, validation, rng).net


def train_with_history(net: MlpNetwork, loss, data, cfg: TrainConfig, validation=None,
                       rng: np.random.Generator | None = None) -> TrainResult:
    """Minimise ``loss`` over ``data`` by mini-batch descent.

    The monitored quantity is the full validation loss when ``validation`` is
    given, otherwise the full training loss. The parameters with the best
    monitored value (the initial ones included) are returned. The learning
    rate is multiplied by the optimizer's decay factor after
    ``patience // 2`` epochs without improvement; training stops after
    ``patience`` such epochs.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    layout = _Layout(net.layer_dims)
    theta = layout.pack(net)
    grad = np.empty_like(theta)
    theta_views = layout.views(theta)
    grad_views = layout.views(grad)
    weights = [A for A, _ in theta_views]
    biases = [b for _, b in theta_views]
    opt = cfg.optimizer
    st = opt.state(layout.size)
    lr = opt.lr
    monitor_data = validation if validation is not None else data

    def monitor() -> float:
        out = _predict_raw(weights, biases, net.output, loss.inputs(monitor_data))
        return loss.value_and_grad(out, monitor_data)[0]

    best = monitor()
    if not np.isfinite(best):
        raise TrainingDivergedError(0, "initial loss is not finite")
    best_theta = theta.copy()
    best_epoch = 0
    stale = 0
    since_decay = 0
    plateau = max(1, cfg.early_stop_patience // 2)
    history = []
    epoch = 0
    warmup_steps = cfg.warmup_epochs * math.ceil(len(data) / cfg.batch_size)
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        count = 0
        for batch in loss.batches(data, cfg.batch_size, rng):
            value = _value_and_flat_grad(weights, biases, net.output, loss, batch, grad_views)
            # a non-finite entry anywhere makes the squared norm non-finite
            if not (np.isfinite(value) and np.isfinite(np.dot(grad, grad))):
                raise TrainingDivergedError(epoch)
            step += 1
            opt.step(theta, grad, st, lr * step / warmup_steps if step < warmup_steps else lr)
            total += value * len(batch)
            count += len(batch)
        current = monitor()
        if not np.isfinite(current):
            raise TrainingDivergedError(epoch)
        history.append((epoch, total / max(count, 1), current, lr))
        if current < best:
            best = current
            best_theta[:] = theta
            best_epoch = epoch
            stale = 0
            since_decay = 0
        else:
            stale += 1
            since_decay += 1
            if since_decay >= plateau:
                lr *= opt.decay_factor
                since_decay = 0
            if stale >= cfg.early_stop_patience:
                break
    return TrainResult(layout.unpack(best_theta, net.output), epoch, best_epoch, best, history)


def _predict_raw(weights, biases, output, x):
    h = x
    for A, b in zip(weights[:-1], biases[:-1]):
        h = h @ A.T
        h += b
        np.maximum(h, 0.0, out=h)
    return output.apply((h @ weights[-1].T + biases[-1])[:, 0])[0]


# ---------------------------------------------------------------------------
# persistence


def format_network(net: MlpNetwork) -> str:
    lines = ["dims: " + " ".join(str(n) for n in net.layer_dims),
             "output: " + net.output.describe()]
    for l, (A, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"A{l}: " + " ".join(f"{v:.17g}" for v in A.ravel()))
        lines.append(f"b{l}: " + " ".join(f"{v:.17g}" for v in b.ravel()))
    return "\n".join(lines) + "\n"


def parse_network(text: str) -> tuple[MlpNetwork, dict[str, str]]:
    """Parse the key-value network format; unknown keys are returned as extras."""
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, val = line.partition(":")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key: value'")
        entries[key.strip()] = val.strip()
    if "dims" not in entries:
        raise ValueError("missing 'dims' header")
    dims = [int(t) for t in entries.pop("dims").split()]
    output = OutputActivation.parse(entries.pop("output", "identity"))
    ws, bs = [], []
    for l in range(len(dims) - 1):
        a = np.array([float(t) for t in entries.pop(f"A{l}").split()])
        b = np.array([float(t) for t in entries.pop(f"b{l}").split()])
        ws.append(a.reshape(dims[l + 1], dims[l]))
        bs.append(b)
    return MlpNetwork(tuple(ws), tuple(bs), output), entries


def save_network(net: MlpNetwork, path, extra: dict[str, str] | None = None) -> None:
    text = format_network(net)
    for k, v in (extra or {}).items():
        text += f"{k}: {v}\n"
    Path(path).write_text(text)


def load_network(path) -> MlpNetwork:
    return parse_network(Path(path).read_text())[0]
