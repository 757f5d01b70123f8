"""Input convex neural networks with Softplus activations, in plain numpy.

Architecture, for hidden layers ``i = 0..m-1``::

    a_i     = W_y[i] y_i + W_x[i] x + b[i]      (no W_y term for i = 0)
    y_{i+1} = softplus(a_i)
    out     = W_y[m] y_m + W_x[m] x + b[m]

``W_y`` is stored for layers ``1..m`` only, so ``model.W_y[k]`` is the
inter-layer matrix of layer ``k + 1``. With ``convex_mode`` every ``W_y``
entry is kept nonnegative, which makes each output convex in ``x``. With
``convex_mode=False`` the same structure is an ordinary MLP (the baseline).

The network itself works in normalized coordinates. ``NormStats`` maps raw
inputs to normalized ones (affine, positive scales) and rescales outputs, so
convexity carries over to raw coordinates. Use :meth:`IcnnModel.predict` and
:meth:`IcnnModel.jacobian` for raw coordinates; ``icnn_forward`` and
``icnn_input_jacobian`` act on already-normalized inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

CHECKPOINT_FORMAT = "icnnopf-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    pass


def softplus(t, beta: float = 1.0):
    """``log(1 + exp(beta t)) / beta``, evaluated without overflow."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    t = np.asarray(t, dtype=float)
    z = beta * t
    big = z > 30.0
    zs = np.where(big, -z, z)  # exp argument always <= 30
    out = np.where(big, t + np.log1p(np.exp(zs)) / beta, np.log1p(np.exp(zs)) / beta)
    return out if out.ndim else float(out)


def softplus_grad(t, beta: float = 1.0):
    """Derivative of :func:`softplus`: the logistic sigmoid of ``beta t``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    out = expit(beta * np.asarray(t, dtype=float))
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class NormStats:
    """Affine input normalization and per-output scaling.

    ``normalized = (raw - in_shift) / in_scale`` and
    ``raw_output = out_scale * network_output``.
    """

    in_shift: np.ndarray
    in_scale: np.ndarray
    out_scale: np.ndarray

    @classmethod
    def identity(cls, d_in: int, d_out: int) -> "NormStats":
        return cls(np.zeros(d_in), np.ones(d_in), np.ones(d_out))

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray) -> "NormStats":
        """Zero-mean/unit-variance inputs, targets divided by their max magnitude."""
        std = inputs.std(axis=0)
        peak = np.abs(targets).max(axis=0)
        return cls(inputs.mean(axis=0), np.where(std > 1e-12, std, 1.0), np.where(peak > 1e-12, peak, 1.0))

    def __eq__(self, other):
        if not isinstance(other, NormStats):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("in_shift", "in_scale", "out_scale"))


@dataclass(frozen=True, eq=False)
class IcnnModel:
    layer_widths: tuple[int, ...]
    W_y: tuple[np.ndarray, ...]
    W_x: tuple[np.ndarray, ...]
    b: tuple[np.ndarray, ...]
    beta: float = 5.0
    convex_mode: bool = True
    augmented: bool = False
    norm_stats: NormStats = field(default=None)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        for name in ("W_y", "W_x", "b"):
            object.__setattr__(self, name, tuple(np.asarray(a, dtype=float) for a in getattr(self, name)))
        if self.norm_stats is None:
            object.__setattr__(self, "norm_stats", NormStats.identity(widths[0], widths[-1]))
        self._check()

    def _check(self):
        w = self.layer_widths
        m = len(w) - 2
        if m < 0:
            raise ValueError("layer_widths needs at least input and output widths")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if len(self.W_x) != m + 1 or len(self.b) != m + 1 or len(self.W_y) != m:
            raise ValueError("parameter list lengths do not match layer_widths")
        d = w[0]
        for i in range(m + 1):
            if self.W_x[i].shape != (w[i + 1], d):
                raise ValueError(f"W_x[{i}] has shape {self.W_x[i].shape}, expected {(w[i + 1], d)}")
            if self.b[i].shape != (w[i + 1],):
                raise ValueError(f"b[{i}] has shape {self.b[i].shape}, expected {(w[i + 1],)}")
        for k in range(m):
            if self.W_y[k].shape != (w[k + 2], w[k + 1]):
                raise ValueError(f"W_y[{k}] has shape {self.W_y[k].shape}, expected {(w[k + 2], w[k + 1])}")
        ns = self.norm_stats
        if ns.in_shift.shape != (d,) or ns.in_scale.shape != (d,) or ns.out_scale.shape != (w[-1],):
            raise ValueError("norm_stats dimensions do not match the model")
        if np.any(ns.in_scale <= 0) or np.any(ns.out_scale <= 0):
            raise ValueError("normalization scales must be positive")

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_widths[-1]

    def is_convex(self) -> bool:
        return all(np.all(w >= 0) for w in self.W_y)

    def parameters(self) -> list[np.ndarray]:
        return [*self.W_y, *self.W_x, *self.b]

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters())

    def __eq__(self, other):
        if not isinstance(other, IcnnModel):
            return NotImplemented
        same = (self.layer_widths == other.layer_widths and self.beta == other.beta
                and self.convex_mode == other.convex_mode and self.augmented == other.augmented
                and self.norm_stats == other.norm_stats)
        return same and all(np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters()))

    # raw-coordinate wrappers -------------------------------------------------
    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.norm_stats.in_shift) / self.norm_stats.in_scale

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Outputs for raw (un-normalized) inputs; accepts one vector or a batch."""
        return icnn_forward(self, self.normalize(x)) * self.norm_stats.out_scale

    def jacobian(self, x: np.ndarray, seed: np.ndarray | None = None):
        """Raw-coordinate value and Jacobian at a single raw input.

        With ``seed`` (shape ``(n_inputs, k)``) the Jacobian is taken with
        respect to ``z`` where ``dx/dz = seed``; the result is ``J @ seed``.
        Returns ``(value, jacobian)``.
        """
        ns = self.norm_stats
        s = np.eye(self.n_inputs) if seed is None else np.asarray(seed, dtype=float)
        val, jac = _forward_jacobian(self, self.normalize(x), s / ns.in_scale[:, None])
        return val * ns.out_scale, jac * ns.out_scale[:, None]


def init_model(layer_widths, beta: float = 5.0, convex_mode: bool = True, augmented: bool = False,
               seed: int = 0, norm_stats: NormStats | None = None) -> IcnnModel:
    """Random initialization with scale ``s = 1/sqrt(fan_in)``.

    ``W_y ~ U[0, s]`` in convex mode (``U[-s, s]`` for the plain MLP),
    ``W_x ~ U[-s, s]``, biases zero.
    """
    rng = np.random.default_rng(seed)
    w = tuple(int(v) for v in layer_widths)
    m = len(w) - 2
    d = w[0]
    s_x = 1.0 / np.sqrt(d)
    W_x = [rng.uniform(-s_x, s_x, size=(w[i + 1], d)) for i in range(m + 1)]
    W_y = []
    for k in range(m):
        s_y = 1.0 / np.sqrt(w[k + 1])
        lo = 0.0 if convex_mode else -s_y
        W_y.append(rng.uniform(lo, s_y, size=(w[k + 2], w[k + 1])))
    b = [np.zeros(w[i + 1]) for i in range(m + 1)]
    return IcnnModel(w, tuple(W_y), tuple(W_x), tuple(b), float(beta), convex_mode, augmented, norm_stats)


def linear_warm_start(model: IcnnModel, inputs: np.ndarray, targets: np.ndarray) -> IcnnModel:
    """Set the output layer's affine passthrough to the least-squares linear fit.

    The output-layer ``W_y`` is zeroed, so the warm-started model is exactly
    that affine fit (convex in either mode); hidden layers keep their random
    weights and are trained from there by gradient descent.
    """
    Xn = model.normalize(np.atleast_2d(inputs))
    T = np.atleast_2d(targets) / model.norm_stats.out_scale
    A = np.hstack([Xn, np.ones((Xn.shape[0], 1))])
    coef = np.linalg.lstsq(A, T, rcond=None)[0]
    W_x = (*model.W_x[:-1], np.ascontiguousarray(coef[:-1].T))
    b = (*model.b[:-1], coef[-1].copy())
    W_y = (*model.W_y[:-1], np.zeros_like(model.W_y[-1])) if model.W_y else ()
    return replace(model, W_y=W_y, W_x=W_x, b=b)


def _check_input(model: IcnnModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n_inputs:
        raise ValueError(f"input has dimension {x.shape[-1]}, model expects {model.n_inputs}")
    return x


def icnn_forward(model: IcnnModel, x: np.ndarray) -> np.ndarray:
    """Network output for normalized input(s) ``x`` (shape ``(d,)`` or ``(N, d)``)."""
    x = _check_input(model, x)
    y = None
    for i in range(model.n_hidden):
        a = x @ model.W_x[i].T + model.b[i]
        if i > 0:
            a = a + y @ model.W_y[i - 1].T
        y = softplus(a, model.beta)
    out = x @ model.W_x[-1].T + model.b[-1]
    if model.n_hidden:
        out = out + y @ model.W_y[-1].T
    return out


def _forward_jacobian(model: IcnnModel, x: np.ndarray, seed: np.ndarray):
    """Forward-mode accumulation of ``d(out)/dz`` with ``dx/dz = seed``."""
    x = _check_input(model, x)
    if x.ndim != 1:
        raise ValueError("jacobian expects a single input vector")
    y = None
    dy = None
    for i in range(model.n_hidden):
        Wx = model.W_x[i]
        a = Wx @ x + model.b[i]
        da = Wx @ seed
        if i > 0:
            a = a + model.W_y[i - 1] @ y
            da = da + model.W_y[i - 1] @ dy
        y = softplus(a, model.beta)
        dy = softplus_grad(a, model.beta)[:, None] * da
    out = model.W_x[-1] @ x + model.b[-1]
    dout = model.W_x[-1] @ seed
    if model.n_hidden:
        out = out + model.W_y[-1] @ y
        dout = dout + model.W_y[-1] @ dy
    return out, dout


def icnn_input_jacobian(model: IcnnModel, x: np.ndarray) -> np.ndarray:
    """Exact ``d(output)/d(input)`` at a normalized input, via the chain rule."""
    return _forward_jacobian(model, x, np.eye(model.n_inputs))[1]


def batch_loss(model: IcnnModel, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error in normalized units (raw inputs and targets)."""
    pred = icnn_forward(model, model.normalize(inputs))
    resid = pred - np.asarray(targets, dtype=float) / model.norm_stats.out_scale
    return float(np.mean(resid ** 2))


def icnn_param_grads(model: IcnnModel, inputs: np.ndarray, targets: np.ndarray):
    """Backpropagated gradient of :func:`batch_loss` w.r.t. every parameter.

    Returns ``(loss, grads)`` where ``grads`` is an :class:`IcnnModel`-shaped
    triple ``(dW_y, dW_x, db)`` of tuples mirroring the model's parameters.
    """
    X = model.normalize(np.atleast_2d(inputs))
    T = np.atleast_2d(np.asarray(targets, dtype=float)) / model.norm_stats.out_scale
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    _check_input(model, X)
    if T.shape != (X.shape[0], model.n_outputs):
        raise ValueError(f"targets have shape {T.shape}, expected {(X.shape[0], model.n_outputs)}")
    m, beta = model.n_hidden, model.beta

    pre, acts = [], []
    y = None
    for i in range(m):
        a = X @ model.W_x[i].T + model.b[i]
        if i > 0:
            a = a + y @ model.W_y[i - 1].T
        y = softplus(a, beta)
        pre.append(a)
        acts.append(y)
    out = X @ model.W_x[m].T + model.b[m]
    if m:
        out = out + y @ model.W_y[m - 1].T
    resid = out - T
    loss = float(np.mean(resid ** 2))

    g = 2.0 * resid / resid.size
    dW_x = [None] * (m + 1)
    db = [None] * (m + 1)
    dW_y = [None] * m
    dW_x[m] = g.T @ X
    db[m] = g.sum(axis=0)
    for i in range(m - 1, -1, -1):
        # g holds d loss / d (input of the layer that consumes y_{i+1})
        dW_y[i] = g.T @ acts[i]
        g = (g @ model.W_y[i]) * softplus_grad(pre[i], beta)
        dW_x[i] = g.T @ X
        db[i] = g.sum(axis=0)
    return loss, (tuple(dW_y), tuple(dW_x), tuple(db))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def train_step(model: IcnnModel, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig):
    """One gradient-descent step; in convex mode ``W_y`` is clamped at zero.

    Returns the updated model and the batch loss before the update.
    """
    loss, (gy, gx, gb) = icnn_param_grads(model, inputs, targets)
    if not np.isfinite(loss):
        raise TrainingDivergence(f"non-finite training loss {loss}")
    lr = cfg.learning_rate
    W_y = tuple(w - lr * g for w, g in zip(model.W_y, gy))
    if model.convex_mode:
        W_y = tuple(np.maximum(w, 0.0) for w in W_y)
    W_x = tuple(w - lr * g for w, g in zip(model.W_x, gx))
    b = tuple(v - lr * g for v, g in zip(model.b, gb))
    return replace(model, W_y=W_y, W_x=W_x, b=b), loss


def train(model: IcnnModel, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
          val_inputs: np.ndarray | None = None, val_targets: np.ndarray | None = None):
    """Mini-batch gradient descent with seed-deterministic shuffling.

    Returns ``(model, history)``; ``history`` has per-epoch ``train_loss``
    and, when validation data is given, ``val_loss``.
    """
    rng = np.random.default_rng(cfg.seed)
    n = inputs.shape[0]
    history = {"train_loss": [], "val_loss": []}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            model, loss = train_step(model, inputs[idx], targets[idx], cfg)
            total += loss * idx.size
        history["train_loss"].append(total / n)
        if val_inputs is not None:
            history["val_loss"].append(batch_loss(model, val_inputs, val_targets))
    return model, history


# --------------------------------------------------------------------------
# input augmentation x = [x~; -x~]

def augment_input(x_tilde: np.ndarray) -> np.ndarray:
    x_tilde = np.asarray(x_tilde, dtype=float)
    return np.concatenate([x_tilde, -x_tilde], axis=-1)


def reduce_augmented_jacobian(jac: np.ndarray) -> np.ndarray:
    """Jacobian w.r.t. ``x~`` from the Jacobian w.r.t. ``[x~; -x~]``."""
    half = jac.shape[-1] // 2
    return jac[..., :half] - jac[..., half:]


def embed_plain_in_augmented(model: IcnnModel) -> IcnnModel:
    """Equivalent model on ``[x~; -x~]`` whose weights on the ``-x~`` half are zero."""
    if model.augmented:
        raise ValueError("model already takes augmented input")
    d = model.n_inputs
    widths = (2 * d, *model.layer_widths[1:])
    W_x = tuple(np.hstack([w, np.zeros_like(w)]) for w in model.W_x)
    ns = model.norm_stats
    stats = NormStats(np.concatenate([ns.in_shift, -ns.in_shift]),
                      np.concatenate([ns.in_scale, ns.in_scale]), ns.out_scale.copy())
    return IcnnModel(widths, model.W_y, W_x, model.b, model.beta, model.convex_mode, True, stats)


# --------------------------------------------------------------------------
# checkpoints

def save_model(model: IcnnModel) -> str:
    """Serialize to a versioned JSON checkpoint (lossless, deterministic)."""
    ns = model.norm_stats
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_widths": list(model.layer_widths),
        "beta": model.beta,
        "convex_mode": model.convex_mode,
        "augmented": model.augmented,
        "norm_stats": {"in_shift": ns.in_shift.tolist(), "in_scale": ns.in_scale.tolist(),
                       "out_scale": ns.out_scale.tolist()},
        "W_y": [w.tolist() for w in model.W_y],
        "W_x": [w.tolist() for w in model.W_x],
        "b": [v.tolist() for v in model.b],
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def load_model(text: str) -> IcnnModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not an icnnopf checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    for key in ("layer_widths", "beta", "convex_mode", "augmented", "norm_stats", "W_y", "W_x", "b"):
        if key not in doc:
            raise CheckpointError(f"checkpoint is missing field {key!r}")
    ns = doc["norm_stats"]
    for key in ("in_shift", "in_scale", "out_scale"):
        if key not in ns:
            raise CheckpointError(f"checkpoint is missing field 'norm_stats.{key}'")
    try:
        model = IcnnModel(
            tuple(doc["layer_widths"]),
            tuple(np.array(w, dtype=float).reshape(len(w), -1) for w in doc["W_y"]),
            tuple(np.array(w, dtype=float).reshape(len(w), -1) for w in doc["W_x"]),
            tuple(np.array(v, dtype=float) for v in doc["b"]),
            float(doc["beta"]), bool(doc["convex_mode"]), bool(doc["augmented"]),
            NormStats(*(np.array(ns[k], dtype=float) for k in ("in_shift", "in_scale", "out_scale"))),
        )
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid checkpoint: {exc}") from None
    if model.convex_mode and not model.is_convex():
        raise CheckpointError("convex_mode checkpoint has negative W_y entries")
    return model
