"""Model assembly, losses, Adam, training and evaluation."""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
from sklearn.metrics import accuracy_score, f1_score

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .graph import Graph, add_self_loops, row_norm_adjacency, sym_norm_adjacency
from .layers import (BreadthParams, DepthParams, NodeState, breadth_preactivation, depth_update,
                     gcn_layer, geniepath_lazy_update, glorot, input_embed, residual_wrap)

log = logging.getLogger(__name__)

VARIANTS = ("geniepath", "geniepath-lazy", "gcn", "gcn-mean", "breadth-only")
ATTENTION_VARIANTS = ("geniepath", "geniepath-lazy", "breadth-only")


@dataclass
class ModelConfig:
    variant: str = "geniepath"
    depth: int = 2
    hidden: int = 16
    residual: str = "none"
    lr: float = 0.005
    l2_penalty: float = 0.0
    epochs: int = 1000
    seed: int = 0
    task: str = "multi-class"
    patience: int = 50
    bias: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.depth < 1 or self.hidden < 1:
            raise ValueError("depth and hidden must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.residual not in ("none", "add", "concat"):
            raise ValueError(f"unknown residual mode {self.residual!r}")
        if self.task not in ("multi-class", "multi-label"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class Metrics:
    accuracy: float
    micro_f1: float
    macro_f1: float
    loss: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, cause: Exception):
        super().__init__(f"training diverged at epoch {epoch}: {cause}")
        self.epoch = epoch


def is_weight_matrix(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("W")


@dataclass
class ForwardOutput:
    logits: Tensor
    embeddings: Tensor
    attention: list[np.ndarray]


class Model:
    """Parameters plus the forward pass for one architecture variant.

    ``params`` maps dotted names (``layer0.W_s``, ``output.W``...) to float64
    arrays. Forward passes take either those arrays (as constants) or tape
    leaves built from them.
    """

    def __init__(self, config: ModelConfig, num_features: int, num_classes: int,
                 params: Mapping[str, np.ndarray] | None = None):
        self.config = config
        self.num_features = num_features
        self.num_classes = num_classes
        shapes = self.param_shapes()
        if params is None:
            self.params = self._init_params(shapes)
        else:
            self.load_params(params)

    # -- parameters ----------------------------------------------------------
    def param_shapes(self) -> dict[str, tuple[int, int]]:
        c = self.config
        K, P, C = c.hidden, self.num_features, self.num_classes
        shapes: dict[str, tuple[int, int]] = {"input.W_x": (P, K)}

        def breadth(prefix):
            shapes.update({f"{prefix}.W": (K, K), f"{prefix}.W_s": (K, K),
                           f"{prefix}.W_d": (K, K), f"{prefix}.v": (K, 1)})
            if c.bias:
                shapes[f"{prefix}.b_att"] = (1, K)

        def depth(prefix, fan_in):
            for gate in ("i", "f", "o", "c"):
                shapes[f"{prefix}.W_{gate}"] = (fan_in, K)
                if c.bias:
                    shapes[f"{prefix}.b_{gate}"] = (1, K)

        for t in range(c.depth):
            if c.variant == "geniepath":
                breadth(f"layer{t}")
                depth(f"layer{t}", K)
            elif c.variant == "geniepath-lazy":
                breadth(f"breadth{t}")
                depth(f"depth{t}", 2 * K)
            elif c.variant == "breadth-only":
                breadth(f"layer{t}")
            else:
                shapes[f"layer{t}.W"] = (K, K)
                if c.bias:
                    shapes[f"layer{t}.b"] = (1, K)
            if c.residual == "concat":
                shapes[f"layer{t}.W_res"] = (2 * K, K)
        shapes["output.W"] = (K, C)
        if c.bias:
            shapes["output.b"] = (1, C)
        return shapes

    def _init_params(self, shapes) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, (r, k) in shapes.items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "v" or leaf.startswith("b"):
                # zero attention vector: training starts from uniform attention
                params[name] = np.zeros((r, k))
            else:
                params[name] = glorot(rng, r, k)
        return params

    def load_params(self, params: Mapping[str, np.ndarray]):
        shapes = self.param_shapes()
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise ValueError(f"parameter names do not match model: missing {missing}, unexpected {extra}")
        for name, shape in shapes.items():
            if np.shape(params[name]) != shape:
                raise ValueError(f"parameter {name} has shape {np.shape(params[name])}, expected {shape}")
        self.params = {k: np.array(params[k], dtype=np.float64) for k in shapes}

    def leaves(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.leaf(v, k) for k, v in self.params.items()}

    # -- forward -------------------------------------------------------------
    @staticmethod
    def prepare_graph(g: Graph) -> Graph:
        return g if g.has_self_loops else add_self_loops(g)

    def forward(self, g: Graph, X, weights: Mapping[str, Tensor] | None = None) -> ForwardOutput:
        c = self.config
        g = self.prepare_graph(g)
        X = X if isinstance(X, Tensor) else ad.constant(X)
        if X.cols != self.num_features:
            raise ValueError(f"model expects {self.num_features} features, got {X.cols}")
        if X.rows != g.num_nodes:
            raise ValueError(f"{X.rows} feature rows for {g.num_nodes} nodes")
        w = weights if weights is not None else {k: ad.constant(v) for k, v in self.params.items()}
        opt = (lambda name: w.get(name))
        attention: list[np.ndarray] = []

        def theta(prefix):
            return BreadthParams(w[f"{prefix}.W"], w[f"{prefix}.W_s"], w[f"{prefix}.W_d"],
                                 w[f"{prefix}.v"], opt(f"{prefix}.b_att"))

        def phi(prefix):
            return DepthParams(*(w[f"{prefix}.W_{x}"] for x in "ifoc"),
                               *(opt(f"{prefix}.b_{x}") for x in "ifoc"))

        def breadth(H, th):
            pre, alpha = breadth_preactivation(H, g, th)
            attention.append(alpha.data[:, 0].copy())
            return ad.tanh(pre)

        def res(H_new, H_prev, t):
            return residual_wrap(H_new, H_prev, c.residual, opt(f"layer{t}.W_res"))

        H = input_embed(X, w["input.W_x"])
        if c.variant == "geniepath":
            state = NodeState(H, ad.constant(np.zeros(H.shape)))
            for t in range(c.depth):
                H_next, C_next = depth_update(breadth(state.H, theta(f"layer{t}")), state.C,
                                              phi(f"layer{t}"))
                state = NodeState(res(H_next, state.H, t), C_next)
            H = state.H
        elif c.variant == "geniepath-lazy":
            hs = [H]
            for t in range(c.depth):
                hs.append(res(breadth(hs[-1], theta(f"breadth{t}")), hs[-1], t))
            mu, C = H, ad.constant(np.zeros(H.shape))
            # gate step t reads the (t+1)-hop aggregate so the deepest hop reaches the output
            for t in range(c.depth):
                mu, C = geniepath_lazy_update(hs[t + 1], mu, C, phi(f"depth{t}"))
            H = mu
        elif c.variant == "breadth-only":
            for t in range(c.depth):
                H = res(breadth(H, theta(f"layer{t}")), H, t)
        else:
            adj = sym_norm_adjacency(g) if c.variant == "gcn" else row_norm_adjacency(g)
            for t in range(c.depth):
                H = res(gcn_layer(H, adj, w[f"layer{t}.W"], c.activation, opt(f"layer{t}.b")), H, t)
        logits = ad.matmul(H, w["output.W"])
        if "output.b" in w:
            logits = ad.add_row(logits, w["output.b"])
        return ForwardOutput(logits, H, attention)

    def predict_logits(self, g: Graph, X) -> np.ndarray:
        return self.forward(g, X).logits.data


# ---------------------------------------------------------------- loss

def masked_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray, task: str,
                weights: Mapping[str, Tensor] | None = None, l2_penalty: float = 0.0) -> Tensor:
    """Mean task loss over masked nodes plus ``l2_penalty * sum ||W||^2``.

    The penalty covers weight matrices only; attention vectors and biases are
    not regularised.
    """
    if not np.any(mask):
        raise ValueError("masked_loss: mask selects no nodes")
    if task == "multi-class":
        loss = ad.softmax_cross_entropy(logits, labels, mask)
    elif task == "multi-label":
        loss = ad.sigmoid_cross_entropy(logits, labels, mask)
    else:
        raise ValueError(f"unknown task {task!r}")
    if l2_penalty and weights:
        for name, W in weights.items():
            if is_weight_matrix(name):
                loss = ad.add(loss, ad.scale(ad.sum_squares(W), l2_penalty))
    return loss


# ---------------------------------------------------------------- optimiser

class Adam:
    """Bias-corrected Adam; updates parameter arrays in place."""

    def __init__(self, lr: float = 0.005, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise ad.NonFiniteError(f"non-finite gradient for {k}")
            if g.shape != params[k].shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params, grads, state: Adam) -> dict[str, np.ndarray]:
    state.step(params, grads)
    return params


# ---------------------------------------------------------------- metrics

def compute_metrics(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray, task: str) -> Metrics:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return Metrics(float("nan"), float("nan"), float("nan"), float("nan"))
    Z = logits[idx]
    y = labels[idx]
    if task == "multi-class":
        # argmax returns the first maximum: ties go to the lowest class index
        pred = np.argmax(Z, axis=1)
        loss = ad.softmax_cross_entropy(ad.constant(Z), y, np.ones(idx.size, bool)).item()
        classes = np.arange(Z.shape[1])
        return Metrics(float(accuracy_score(y, pred)),
                       float(f1_score(y, pred, labels=classes, average="micro", zero_division=0)),
                       float(f1_score(y, pred, labels=classes, average="macro", zero_division=0)),
                       loss)
    pred = (Z > 0).astype(np.int64)  # sigmoid(z) > 0.5
    loss = ad.sigmoid_cross_entropy(ad.constant(Z), y, np.ones(idx.size, bool)).item()
    return Metrics(float(accuracy_score(y, pred)),
                   float(f1_score(y, pred, average="micro", zero_division=0)),
                   float(f1_score(y, pred, average="macro", zero_division=0)),
                   loss)


def evaluate(model: Model, dataset: Dataset, split: str) -> Metrics:
    view = dataset.view(split)
    logits = model.predict_logits(view.graph, view.features)
    return compute_metrics(logits, view.labels, view.mask(split), dataset.task)


def selection_score(m: Metrics, task: str) -> tuple[float, float]:
    """Validation key: the task metric, ties broken by lower loss."""
    return (m.accuracy if task == "multi-class" else m.micro_f1), -m.loss


# ---------------------------------------------------------------- training

def train(model: Model, dataset: Dataset, config: ModelConfig | None = None,
          callback=None) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Full-batch Adam training with early stopping on the validation split.

    Returns the best parameters (also loaded into ``model``) and the metric
    history as ``{"epoch", "split", "metric", "value"}`` records; epoch 0 holds
    the metrics of the initial parameters.
    """
    config = config or model.config
    if config.task != dataset.task:
        raise ValueError(f"config task {config.task!r} does not match dataset task {dataset.task!r}")
    train_view = dataset.view("train")
    g_train = model.prepare_graph(train_view.graph)
    views = {"train": (g_train, train_view)}
    if dataset.val_mask.any():
        val_view = dataset.view("val")
        views["val"] = (model.prepare_graph(val_view.graph), val_view)
    select_split = "val" if "val" in views else "train"

    history: list[dict] = []

    def record(epoch):
        scores = {}
        for split, (g, view) in views.items():
            m = compute_metrics(model.predict_logits(g, view.features), view.labels,
                                view.mask(split), dataset.task)
            scores[split] = m
            for metric, value in m.as_dict().items():
                history.append({"epoch": epoch, "split": split, "metric": metric, "value": value})
        if callback is not None:
            callback(epoch, scores)
        return selection_score(scores[select_split], dataset.task)

    best = record(0)
    lowest_loss = -best[1]
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch, stale = 0, 0
    opt = Adam(config.lr)
    mask = train_view.train_mask
    for epoch in range(1, config.epochs + 1):
        try:
            tape = Tape()
            w = model.leaves(tape)
            out = model.forward(g_train, train_view.features, w)
            loss = masked_loss(out.logits, train_view.labels, mask, dataset.task, w, config.l2_penalty)
            grads = tape.backward(loss)
            opt.step(model.params, grads)
            score = record(epoch)
        except (ad.NonFiniteError, FloatingPointError) as exc:
            raise TrainingDiverged(epoch, exc) from exc
        stale += 1
        if score > best:
            best, best_epoch, stale = score, epoch, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        # a falling validation loss also counts as progress for patience
        if -score[1] < lowest_loss:
            lowest_loss, stale = -score[1], 0
        if stale >= config.patience:
            log.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
            break
    model.params = best_params
    return best_params, history


# ---------------------------------------------------------------- gradient check

def model_grad_check(model: Model, g: Graph, X: np.ndarray, labels: np.ndarray,
                     mask: np.ndarray, eps: float = 1e-6) -> ad.GradCheckResult:
    g = model.prepare_graph(g)
    c = model.config

    def f(tape, leaves):
        out = model.forward(g, X, leaves)
        return masked_loss(out.logits, labels, mask, c.task, leaves, c.l2_penalty)

    return ad.grad_check(f, model.params, eps)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"GNPK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise CheckpointError(f"parameter {name} is not 2-D")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<QQ", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, params = 8, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            if len(name.encode()) != n:
                raise CheckpointError(f"{path}: truncated name")
            pos += n
            rows, cols = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            size = rows * cols * 8
            if pos + size > len(buf):
                raise CheckpointError(f"{path}: truncated data for {name}")
            params[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols,
                                         offset=pos).reshape(rows, cols).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return params
