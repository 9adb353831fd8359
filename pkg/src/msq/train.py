"""Quantization-aware training of a small fully connected classifier.

Weights are pulled onto their level sets with ADMM: once per epoch the rows
are re-partitioned, the scale re-chosen, and ``Z = proj(W + U)``,
``U = W - Z + U`` updated. SGD then minimizes cross-entropy plus
``sum 1/2 ||W - Z + U||^2``. Activations entering hidden layers are
fake-quantized in the forward pass and passed straight through (inside the
clip range) in the backward pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .partition import partition_layer
from .quantizers import (
    SP2,
    ActQuant,
    FixedPoint,
    build_levels,
    choose_alpha,
    nearest_index,
    project_matrix,
    quantize_activations,
)
from .tensor import Dataset, Rng, ShapeError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, msg: str = "loss diverged"):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass
class Dense:
    W: np.ndarray  # (out, in): one row per output channel
    b: np.ndarray
    relu: bool = True


@dataclass
class MlpModel:
    layers: list

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise ShapeError("consecutive layer dimensions do not match")

    @classmethod
    def init(cls, sizes, rng: Rng) -> "MlpModel":
        """He-initialized MLP; ReLU on every layer except the last."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            W = rng.normal(size=(fan_out, fan_in)) * math.sqrt(2.0 / fan_in)
            layers.append(Dense(W, np.zeros(fan_out), relu=i < len(sizes) - 2))
        return cls(layers)

    def copy(self) -> "MlpModel":
        return MlpModel([Dense(l.W.copy(), l.b.copy(), l.relu) for l in self.layers])

    @property
    def weights(self) -> list:
        return [l.W for l in self.layers]


@dataclass
class Gradient:
    W: np.ndarray
    b: np.ndarray


@dataclass
class AdmmState:
    Z: list
    U: list
    epoch: int = 0

    @classmethod
    def init(cls, model: MlpModel) -> "AdmmState":
        return cls([W.copy() for W in model.weights], [np.zeros_like(W) for W in model.weights])

    def penalty(self, model: MlpModel) -> float:
        return sum(0.5 * float(np.sum((W - Z + U) ** 2))
                   for W, Z, U in zip(model.weights, self.Z, self.U))


def fake_quant(x: np.ndarray, aq: ActQuant) -> tuple[np.ndarray, np.ndarray]:
    """Dequantized activations and the straight-through mask (1 inside [0, alpha])."""
    codes, scale = quantize_activations(x, aq)
    mask = (x >= 0) & (x <= aq.alpha)
    return codes * scale, mask


def forward(model: MlpModel, x, act_quants=None):
    """Return ``(logits, cache)``.

    ``act_quants`` holds one ``ActQuant`` or ``None`` per layer input; ``None``
    as a whole disables activation quantization.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.layers[0].W.shape[1]:
        raise ShapeError(f"input shape {h.shape} does not match first layer")
    cache = []
    for i, layer in enumerate(model.layers):
        aq = act_quants[i] if act_quants is not None else None
        if aq is not None:
            hq, mask = fake_quant(h, aq)
        else:
            hq, mask = h, None
        z = hq @ layer.W.T + layer.b
        cache.append({"x": h, "xq": hq, "mask": mask, "z": z})
        h = np.maximum(z, 0.0) if layer.relu else z
    return h, cache


def softmax_xent(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def backward_ste(model: MlpModel, cache, labels, state: AdmmState | None = None) -> list:
    """Gradients of cross-entropy (+ ADMM penalty when ``state`` is given)."""
    last = cache[-1]["z"]
    _, dz = softmax_xent(last, labels)
    grads = [None] * len(model.layers)
    for i in reversed(range(len(model.layers))):
        layer, c = model.layers[i], cache[i]
        if layer.relu:
            dz = dz * (c["z"] > 0)
        dW = dz.T @ c["xq"]
        db = dz.sum(axis=0)
        if state is not None:
            dW = dW + (layer.W - state.Z[i] + state.U[i])
        grads[i] = Gradient(dW, db)
        if i > 0:
            dx = dz @ layer.W
            if c["mask"] is not None:
                dx = dx * c["mask"]
            dz = dx
    return grads


def total_loss(model: MlpModel, x, labels, act_quants=None, state: AdmmState | None = None) -> float:
    logits, _ = forward(model, x, act_quants)
    loss, _ = softmax_xent(logits, labels)
    return loss + (state.penalty(model) if state is not None else 0.0)


def project_layers(weights, partitions, level_sets) -> list:
    """Row-wise projection of each weight matrix onto its (fixed, sp2) level sets."""
    out = []
    for W, part, (fixed_ls, sp2_ls) in zip(weights, partitions, level_sets):
        Z = np.empty_like(W)
        for rows, ls in ((~part.is_sp2, fixed_ls), (part.is_sp2, sp2_ls)):
            if rows.any():
                Z[rows] = ls.levels[nearest_index(W[rows], ls)]
        out.append(Z)
    return out


def admm_step(model: MlpModel, state: AdmmState, partitions, level_sets) -> AdmmState:
    Z = project_layers([W + U for W, U in zip(model.weights, state.U)], partitions, level_sets)
    U = [W - z + u for W, z, u in zip(model.weights, Z, state.U)]
    return AdmmState(Z, U, state.epoch + 1)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    pr_sp2: float = 2 / 3
    fixed_bits: int = 4
    sp2_m1: int = 2
    sp2_m2: int = 1
    act_bits: int = 4
    seed: int = 0
    quantize: bool = True
    quantize_input: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.pr_sp2 <= 1.0:
            raise ValueError("pr_sp2 must be in [0, 1]")
        if self.batch_size < 1 or not self.lr > 0:
            raise ValueError("batch_size must be >= 1 and lr > 0")

    @property
    def fixed_scheme(self) -> FixedPoint:
        return FixedPoint(self.fixed_bits)

    @property
    def sp2_scheme(self) -> SP2:
        return SP2(self.sp2_m1, self.sp2_m2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    float_acc: float
    quant_acc: float


@dataclass
class TrainResult:
    model: MlpModel
    layers: list
    act_quants: list
    history: list
    quant_accuracy: float
    float_accuracy: float | None = None
    state: AdmmState | None = None
    partitions: list = field(default_factory=list)


def accuracy(model: MlpModel, x, labels, act_quants=None) -> float:
    logits, _ = forward(model, x, act_quants)
    return float(np.mean(logits.argmax(axis=1) == labels))


def _quant_setup(model: MlpModel, cfg: TrainConfig):
    partitions, level_sets = [], []
    for W in model.weights:
        part = partition_layer(W, cfg.pr_sp2)
        alpha = choose_alpha(W, part.row_schemes(cfg.fixed_scheme, cfg.sp2_scheme))
        partitions.append(part)
        level_sets.append((build_levels(cfg.fixed_scheme, alpha), build_levels(cfg.sp2_scheme, alpha)))
    return partitions, level_sets


def _with_weights(model: MlpModel, weights) -> MlpModel:
    return MlpModel([Dense(W, l.b.copy(), l.relu) for W, l in zip(weights, model.layers)])


def train(model: MlpModel, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
          baseline: bool = True) -> TrainResult:
    """Train ``model`` (a copy; the argument is not modified).

    With ``cfg.quantize`` false this is plain minibatch SGD. With ``baseline``
    the same configuration is also trained without quantization and its
    accuracy is reported as ``float_accuracy``.
    """
    eval_data = eval_data or data
    model = model.copy()
    init = model.copy()
    rng = Rng(cfg.seed)
    n_layers = len(model.layers)
    quant_inputs = [bool(cfg.quantize and cfg.act_bits and (i > 0 or cfg.quantize_input))
                    for i in range(n_layers)]
    act_alpha = [0.0] * n_layers
    state = AdmmState.init(model) if cfg.quantize else None
    partitions, level_sets = [], []
    history = []
    n = len(data)

    def current_aqs():
        if not cfg.quantize:
            return None
        return [ActQuant(cfg.act_bits, act_alpha[i]) if quant_inputs[i] and act_alpha[i] > 0 else None
                for i in range(n_layers)]

    for epoch in range(cfg.epochs):
        if cfg.quantize:
            partitions, level_sets = _quant_setup(model, cfg)
            state = admm_step(model, state, partitions, level_sets)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = data.inputs[idx], data.labels[idx]
            if cfg.quantize and epoch == 0:
                # clip calibration: running max over the first epoch, then frozen
                _, probe = forward(model, x)
                for i in range(n_layers):
                    if quant_inputs[i]:
                        act_alpha[i] = max(act_alpha[i], float(probe[i]["x"].max()))
            # overflow shows up as a non-finite loss, which is checked below
            with np.errstate(over="ignore", invalid="ignore"):
                logits, cache = forward(model, x, current_aqs())
                loss, _ = softmax_xent(logits, y)
                if state is not None:
                    loss += state.penalty(model)
            if not math.isfinite(loss):
                raise TrainingError(epoch)
            grads = backward_ste(model, cache, y, state)
            for layer, g in zip(model.layers, grads):
                layer.W -= cfg.lr * g.W
                layer.b -= cfg.lr * g.b
            losses.append(loss)

        float_acc = accuracy(model, eval_data.inputs, eval_data.labels)
        if cfg.quantize:
            qmodel = _with_weights(model, project_layers(model.weights, partitions, level_sets))
            quant_acc = accuracy(qmodel, eval_data.inputs, eval_data.labels, current_aqs())
        else:
            quant_acc = float_acc
        history.append(EpochMetrics(epoch, float(np.mean(losses)), float_acc, quant_acc))
        log.debug("epoch %d loss %.4f float %.4f quant %.4f", epoch, history[-1].loss, float_acc, quant_acc)

    float_accuracy = None
    if baseline:
        base_cfg = TrainConfig(**{**cfg.to_dict(), "quantize": False})
        float_accuracy = train(init, data, base_cfg, eval_data, baseline=False).quant_accuracy

    if not cfg.quantize:
        return TrainResult(model, [], [None] * n_layers, history, history[-1].float_acc,
                           float_accuracy)

    # final hard projection
    aqs = current_aqs()
    partitions, _ = _quant_setup(model, cfg)
    qlayers, weights = [], []
    for i, (W, part) in enumerate(zip(model.weights, partitions)):
        alpha = choose_alpha(W, part.row_schemes(cfg.fixed_scheme, cfg.sp2_scheme))
        Wq, ql = project_matrix(W, part, alpha, cfg.fixed_scheme, cfg.sp2_scheme,
                                act_bits=cfg.act_bits, name=f"layer{i}")
        ql.act_alpha = aqs[i].alpha if aqs[i] is not None else None
        qlayers.append(ql)
        weights.append(Wq)
    qmodel = _with_weights(model, weights)
    final_state = AdmmState([W.copy() for W in weights], [np.zeros_like(W) for W in weights],
                            state.epoch)
    quant_acc = accuracy(qmodel, eval_data.inputs, eval_data.labels, aqs)
    return TrainResult(qmodel, qlayers, aqs, history, quant_acc, float_accuracy,
                       final_state, partitions)
