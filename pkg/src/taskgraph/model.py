"""Gated graph network scoring every object of a scene for every task.

Each object is a node of a fully connected graph. A node starts from the
product of a class embedding and an appearance embedding, then runs ``T``
rounds of message passing in which incoming messages are scaled by the
sender's detection score and folded in with a GRU cell. An MLP over the
concatenated initial and final node states yields one probability per task.
An auxiliary linear head scores appearance features alone; both heads are
trained with binary cross-entropy and may be averaged at test time.

All weight matrices are stored ``(out, in)``; activations are row-major
``(N, dim)``. Computation runs in float64.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import Scene
from .errors import ConfigError, DimensionMismatchError, EmptySceneError, NoLossError

FUSION_MODES = ("graph_only", "aux_only", "average")

PARAM_NAMES = (
    "W_c", "W_phi", "W_p", "b_p",
    "W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h",
    "f_W1", "f_b1", "f_W2", "f_b2",
    "aux_W", "aux_b",
)  # fmt: skip

ModelParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    K: int
    F: int
    M: int
    H: int = 128
    T: int = 3
    readout_hidden: int = 256
    use_class_input: bool = True
    use_visual_input: bool = True
    use_bbox_input: bool = False
    use_graph: bool = True
    use_weighted_aggregation: bool = True
    use_aux_head: bool = True
    fusion_mode: str = "average"

    def __post_init__(self):
        for name in ("K", "F", "M", "H", "readout_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        # T = 0 is allowed: it degenerates the graph model to a classifier.
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if not (self.use_class_input or self.use_visual_input or self.use_bbox_input):
            raise ConfigError("at least one of class, visual or bbox input must be enabled")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.fusion_mode != "graph_only" and not self.use_aux_head:
            raise ConfigError(f"fusion_mode={self.fusion_mode!r} needs the auxiliary head")
        if self.use_aux_head and not self.use_visual_input:
            raise ConfigError("the auxiliary head reads visual features; enable visual input")

    @property
    def graph_input_dim(self) -> int:
        return (self.F if self.use_visual_input else 0) + (4 if self.use_bbox_input else 0)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, K, M, R = config.H, config.K, config.M, config.readout_hidden
    shapes = {
        "W_c": (H, K),
        "W_phi": (H, config.graph_input_dim),
        "W_p": (H, H),
        "b_p": (H,),
        "f_W1": (R, 2 * H),
        "f_b1": (R,),
        "f_W2": (M, R),
        "f_b2": (M,),
        "aux_W": (M, config.F),
        "aux_b": (M,),
    }
    for gate in "zrh":
        shapes[f"W_{gate}"] = (H, H)
        shapes[f"U_{gate}"] = (H, H)
        shapes[f"b_{gate}"] = (H,)
    return {name: shapes[name] for name in PARAM_NAMES}


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1])) if sum(shape) else 0.0
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def check_params(params: ModelParams, config: ModelConfig) -> None:
    for name, shape in param_shapes(config).items():
        if name not in params:
            raise DimensionMismatchError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise DimensionMismatchError(
                f"parameter {name} has shape {params[name].shape}, config expects {shape}"
            )


sigmoid = expit


@dataclass
class SceneInputs:
    onehot: np.ndarray  # (N, K)
    graph_input: np.ndarray  # (N, graph_input_dim)
    features: Optional[np.ndarray]  # (N, F) raw appearance features for the aux head
    scores: np.ndarray  # (N,)

    @property
    def n(self) -> int:
        return len(self.scores)


def scene_inputs(scene: Scene, config: ModelConfig, scores=None) -> SceneInputs:
    n = len(scene)
    if n == 0:
        raise EmptySceneError(f"scene {scene.image_id} has no objects")
    cats = scene.categories
    if np.any(cats < 0) or np.any(cats >= config.K):
        raise DimensionMismatchError(f"category index outside [0, {config.K})")
    onehot = np.zeros((n, config.K))
    onehot[np.arange(n), cats] = 1.0
    features = None
    parts = []
    if config.use_visual_input or config.use_aux_head:
        features = scene.feature_matrix()
        if features.shape[1] != config.F:
            raise DimensionMismatchError(
                f"feature length {features.shape[1]} != model F={config.F}"
            )
    if config.use_visual_input:
        parts.append(features)
    if config.use_bbox_input:
        parts.append(scene.bbox_matrix())
    graph_input = np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))
    scores = scene.scores if scores is None else np.asarray(scores, dtype=np.float64)
    return SceneInputs(onehot, graph_input, features, scores)


@dataclass
class NodeStates:
    """Every intermediate of one forward pass.

    ``h[0]`` is the initial state and ``h[t]`` the state after ``t`` rounds;
    ``x``, ``z``, ``r`` and ``hhat`` are indexed ``t - 1`` for round ``t``.
    """

    inputs: SceneInputs
    class_pre: np.ndarray
    visual_pre: np.ndarray
    adjacency: np.ndarray
    h: list[np.ndarray] = field(default_factory=list)
    x: list[np.ndarray] = field(default_factory=list)
    z: list[np.ndarray] = field(default_factory=list)
    r: list[np.ndarray] = field(default_factory=list)
    hhat: list[np.ndarray] = field(default_factory=list)
    readout_in: Optional[np.ndarray] = None
    readout_pre: Optional[np.ndarray] = None

    @property
    def h0(self) -> np.ndarray:
        return self.h[0]

    @property
    def hT(self) -> np.ndarray:
        return self.h[-1]


@dataclass
class ScoreTable:
    """Per-object, per-task scores; column ``m`` holds task id ``m + 1``."""

    logits: np.ndarray
    p: np.ndarray
    aux_logits: Optional[np.ndarray]
    p_hat: Optional[np.ndarray]
    fused: np.ndarray
    final: np.ndarray

    def permuted(self, order) -> "ScoreTable":
        order = list(order)
        pick = lambda a: None if a is None else a[order]  # noqa: E731
        return ScoreTable(*(pick(a) for a in (self.logits, self.p, self.aux_logits,
                                              self.p_hat, self.fused, self.final)))


def init_hidden(inputs: SceneInputs, params: ModelParams, config: ModelConfig):
    """Initial node states; returns ``(h0, class_pre, visual_pre)``."""
    class_pre = inputs.onehot @ params["W_c"].T
    visual_pre = inputs.graph_input @ params["W_phi"].T
    has_visual = config.use_visual_input or config.use_bbox_input
    if config.use_class_input and has_visual:
        h0 = np.maximum(class_pre, 0.0) * np.maximum(visual_pre, 0.0)
    elif config.use_class_input:
        h0 = np.maximum(class_pre, 0.0)
    else:
        h0 = np.maximum(visual_pre, 0.0)
    return h0, class_pre, visual_pre


def message_weights(scores: np.ndarray, config: ModelConfig) -> np.ndarray:
    """``A[i, j]`` scales the message from node j into node i; the diagonal is zero."""
    n = len(scores)
    weights = scores if config.use_weighted_aggregation else np.ones(n)
    adj = np.broadcast_to(weights, (n, n)).copy()
    np.fill_diagonal(adj, 0.0)
    return adj


def aggregate(h_prev: np.ndarray, adjacency: np.ndarray, params: ModelParams) -> np.ndarray:
    return (adjacency @ h_prev) @ params["W_p"].T + params["b_p"]


def gru_update(x: np.ndarray, h_prev: np.ndarray, params: ModelParams):
    """One GRU step; returns ``(h, z, r, hhat)``."""
    z = sigmoid(x @ params["W_z"].T + h_prev @ params["U_z"].T + params["b_z"])
    r = sigmoid(x @ params["W_r"].T + h_prev @ params["U_r"].T + params["b_r"])
    hhat = np.tanh(x @ params["W_h"].T + (r * h_prev) @ params["U_h"].T + params["b_h"])
    h = (1.0 - z) * h_prev + z * hhat
    return h, z, r, hhat


def readout(h0: np.ndarray, hT: np.ndarray, params: ModelParams):
    """Graph head; returns ``(logits, concat_input, hidden_pre)``."""
    u = np.concatenate([h0, hT], axis=-1)
    pre = u @ params["f_W1"].T + params["f_b1"]
    logits = np.maximum(pre, 0.0) @ params["f_W2"].T + params["f_b2"]
    return logits, u, pre


def aux_readout(features: np.ndarray, params: ModelParams) -> np.ndarray:
    """Auxiliary head logits from appearance features alone."""
    return features @ params["aux_W"].T + params["aux_b"]


def fuse(p: np.ndarray, p_hat: Optional[np.ndarray], mode: str) -> np.ndarray:
    if mode == "graph_only":
        return p
    if mode == "aux_only":
        return p_hat
    return 0.5 * (p + p_hat)


def forward_inputs(inputs: SceneInputs, params: ModelParams, config: ModelConfig):
    h0, class_pre, visual_pre = init_hidden(inputs, params, config)
    states = NodeStates(inputs, class_pre, visual_pre, message_weights(inputs.scores, config))
    states.h.append(h0)
    if config.use_graph:
        for _ in range(config.T):
            x = aggregate(states.h[-1], states.adjacency, params)
            h, z, r, hhat = gru_update(x, states.h[-1], params)
            states.x.append(x)
            states.z.append(z)
            states.r.append(r)
            states.hhat.append(hhat)
            states.h.append(h)
    logits, states.readout_in, states.readout_pre = readout(h0, states.h[-1], params)
    p = sigmoid(logits)
    aux_logits = p_hat = None
    if config.use_aux_head:
        aux_logits = aux_readout(inputs.features, params)
        p_hat = sigmoid(aux_logits)
    fused = fuse(p, p_hat, config.fusion_mode)
    final = inputs.scores[:, None] * fused
    return ScoreTable(logits, p, aux_logits, p_hat, fused, final), states


def forward_scene(scene: Scene, params: ModelParams, config: ModelConfig, scores=None):
    """Score a scene. ``scores`` overrides the objects' detection scores."""
    return forward_inputs(scene_inputs(scene, config, scores), params, config)


def _bce_with_logits(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))


def label_matrix(labels: dict[int, np.ndarray], n: int, m: int):
    """Dense ``(N, M)`` targets plus a mask of annotated task columns."""
    y = np.zeros((n, m))
    mask = np.zeros((n, m))
    for task, vec in labels.items():
        if not 1 <= task <= m:
            raise DimensionMismatchError(f"task id {task} outside [1, {m}]")
        y[:, task - 1] = vec
        mask[:, task - 1] = 1.0
    return y, mask


def bce_loss(scores: ScoreTable, labels: dict[int, np.ndarray], config: ModelConfig):
    """Mean binary cross-entropy over (object, annotated task) pairs.

    The graph head and auxiliary head losses are summed with unit weight.
    Returns ``(loss, {"graph": ..., "aux": ...})``.
    """
    if not labels:
        raise NoLossError("scene carries no task annotations")
    n = scores.logits.shape[0]
    y, mask = label_matrix(labels, n, config.M)
    count = mask.sum()
    parts = {"graph": float((_bce_with_logits(scores.logits, y) * mask).sum() / count)}
    if config.use_aux_head:
        parts["aux"] = float((_bce_with_logits(scores.aux_logits, y) * mask).sum() / count)
    return sum(parts.values()), parts


def backward_scene(
    scores: ScoreTable,
    states: NodeStates,
    labels: dict[int, np.ndarray],
    params: ModelParams,
    config: ModelConfig,
) -> ModelParams:
    """Exact gradient of :func:`bce_loss` with respect to every parameter."""
    if not labels:
        raise NoLossError("scene carries no task annotations")
    inputs = states.inputs
    n = inputs.n
    y, mask = label_matrix(labels, n, config.M)
    count = mask.sum()
    grads = {name: np.zeros_like(value) for name, value in params.items()}

    if config.use_aux_head:
        d_aux = (sigmoid(scores.aux_logits) - y) * mask / count
        grads["aux_W"] = d_aux.T @ inputs.features
        grads["aux_b"] = d_aux.sum(axis=0)

    d_logits = (scores.p - y) * mask / count
    hidden = np.maximum(states.readout_pre, 0.0)
    grads["f_W2"] = d_logits.T @ hidden
    grads["f_b2"] = d_logits.sum(axis=0)
    d_pre = (d_logits @ params["f_W2"]) * (states.readout_pre > 0)
    grads["f_W1"] = d_pre.T @ states.readout_in
    grads["f_b1"] = d_pre.sum(axis=0)
    d_u = d_pre @ params["f_W1"]
    H = config.H
    d_h0 = d_u[:, :H].copy()
    d_h = d_u[:, H:].copy()

    adj = states.adjacency
    for t in range(len(states.x) - 1, -1, -1):
        x, h_prev = states.x[t], states.h[t]
        z, r, hhat = states.z[t], states.r[t], states.hhat[t]
        d_hprev = d_h * (1.0 - z)
        d_z_pre = d_h * (hhat - h_prev) * z * (1.0 - z)
        d_hhat_pre = d_h * z * (1.0 - hhat * hhat)

        grads["W_h"] += d_hhat_pre.T @ x
        grads["U_h"] += d_hhat_pre.T @ (r * h_prev)
        grads["b_h"] += d_hhat_pre.sum(axis=0)
        d_rh = d_hhat_pre @ params["U_h"]
        d_hprev += d_rh * r
        d_r_pre = d_rh * h_prev * r * (1.0 - r)

        grads["W_z"] += d_z_pre.T @ x
        grads["U_z"] += d_z_pre.T @ h_prev
        grads["b_z"] += d_z_pre.sum(axis=0)
        grads["W_r"] += d_r_pre.T @ x
        grads["U_r"] += d_r_pre.T @ h_prev
        grads["b_r"] += d_r_pre.sum(axis=0)
        d_hprev += d_z_pre @ params["U_z"] + d_r_pre @ params["U_r"]

        d_x = d_hhat_pre @ params["W_h"] + d_z_pre @ params["W_z"] + d_r_pre @ params["W_r"]
        grads["W_p"] += d_x.T @ (adj @ h_prev)
        grads["b_p"] += d_x.sum(axis=0)
        d_hprev += adj.T @ (d_x @ params["W_p"])
        d_h = d_hprev

    # With no propagation rounds the readout sees h0 twice.
    d_h0 += d_h

    has_visual = config.use_visual_input or config.use_bbox_input
    class_act = np.maximum(states.class_pre, 0.0)
    visual_act = np.maximum(states.visual_pre, 0.0)
    if config.use_class_input and has_visual:
        d_class = d_h0 * visual_act
        d_visual = d_h0 * class_act
    elif config.use_class_input:
        d_class, d_visual = d_h0, None
    else:
        d_class, d_visual = None, d_h0
    if d_class is not None:
        grads["W_c"] = (d_class * (states.class_pre > 0)).T @ inputs.onehot
    if d_visual is not None:
        grads["W_phi"] = (d_visual * (states.visual_pre > 0)).T @ inputs.graph_input
    return grads


def loss_and_grads(scene: Scene, params: ModelParams, config: ModelConfig, labels=None, scores=None):
    """Forward, loss and gradients for one scene."""
    labels = scene.labels if labels is None else labels
    table, states = forward_scene(scene, params, config, scores)
    loss, parts = bce_loss(table, labels, config)
    grads = backward_scene(table, states, labels, params, config)
    return loss, parts, grads


@dataclass
class Model:
    """A trained scorer: one shared parameter set, or one per task.

    In per-task mode each parameter set has a single output column and is
    trained only on its own task's labels.
    """

    config: ModelConfig
    params: list[ModelParams]
    per_task: bool = False

    def sub_config(self) -> ModelConfig:
        return replace(self.config, M=1) if self.per_task else self.config

    def score(self, scene: Scene, scores=None) -> ScoreTable:
        if not self.per_task:
            return forward_scene(scene, self.params[0], self.config, scores)[0]
        sub = self.sub_config()
        tables = [forward_scene(scene, p, sub, scores)[0] for p in self.params]
        cat = lambda attr: (  # noqa: E731
            None if getattr(tables[0], attr) is None
            else np.concatenate([getattr(t, attr) for t in tables], axis=1)
        )
        return ScoreTable(*(cat(a) for a in ("logits", "p", "aux_logits", "p_hat", "fused", "final")))

    def states(self, scene: Scene, scores=None, task: int = 1) -> NodeStates:
        params = self.params[task - 1] if self.per_task else self.params[0]
        return forward_scene(scene, params, self.sub_config(), scores)[1]
