"""A small interpreter for explicit Transformer weight programs.

Hidden states are stored as a ``(D, N)`` matrix: one column per token. Every
forward function also takes a stack ``(..., D, N)`` so one program can be run
on many prompts at once.

Attention layer update for query column t::

    h_t <- h_t + sum_m sum_{j visible} act(<Q_m h_t, K_m h_j>) V_m h_j

``act`` is either a softmax over the visible positions or ``ReLU(.)/count``
where ``count`` is the number of visible positions (N for the full mask,
t for the causal mask).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeMismatch

SOFTMAX = "softmax"
NORMALIZED_RELU = "normalized_relu"
CAUSAL = "causal"
FULL = "full"
RELU = "relu"
IDENTITY = "identity"


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Head:
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        for name in ("query", "key", "value"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.query.shape != self.key.shape or self.query.ndim != 2:
            raise ShapeMismatch(f"Q {self.query.shape} and K {self.key.shape} must be equal 2-D shapes")
        if self.value.ndim != 2 or self.value.shape[1] != self.query.shape[1]:
            raise ShapeMismatch("V must read the same hidden width as Q and K")


@dataclass(frozen=True)
class AttnLayer:
    heads: tuple[Head, ...] = ()
    activation: str = NORMALIZED_RELU
    mask: str = FULL

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.activation not in (SOFTMAX, NORMALIZED_RELU):
            raise ValueError(f"unknown attention activation {self.activation!r}")
        if self.mask not in (CAUSAL, FULL):
            raise ValueError(f"unknown attention mask {self.mask!r}")
        widths = {h.query.shape[1] for h in self.heads} | {h.value.shape[0] for h in self.heads}
        if len(widths) > 1:
            raise ShapeMismatch(f"heads disagree on hidden width: {sorted(widths)}")


@dataclass(frozen=True)
class MlpLayer:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = RELU
    skip: bool = True

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.activation not in (RELU, IDENTITY):
            raise ValueError(f"unknown MLP activation {self.activation!r}")
        hidden, width = self.w1.shape
        if self.b1.shape != (hidden,) or self.w2.shape[1] != hidden or self.b2.shape != (self.w2.shape[0],):
            raise ShapeMismatch("MLP weight shapes do not compose")
        if self.skip and self.w2.shape[0] != width:
            raise ShapeMismatch("skip connection needs output width equal to input width")

    @staticmethod
    def identity(width: int) -> "MlpLayer":
        """Zero update with a skip connection."""
        return MlpLayer(np.zeros((1, width)), np.zeros(1), np.zeros((width, 1)), np.zeros(width), IDENTITY, True)

    @staticmethod
    def linear(update: np.ndarray) -> "MlpLayer":
        """h <- h + update @ h (identity activation, skip)."""
        update = np.asarray(update, dtype=np.float64)
        width = update.shape[0]
        return MlpLayer(update, np.zeros(width), np.eye(width), np.zeros(width), IDENTITY, True)


@dataclass(frozen=True)
class TFProgram:
    width: int
    layers: tuple[tuple[AttnLayer, MlpLayer], ...]
    readout_u: np.ndarray
    readout_v: float = 0.0
    query_column: int = -1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((a, m) for a, m in self.layers))
        object.__setattr__(self, "readout_u", _frozen(self.readout_u))
        if self.readout_u.shape != (self.width,):
            raise ShapeMismatch(f"readout has length {self.readout_u.shape}, width is {self.width}")
        for attn, mlp in self.layers:
            for head in attn.heads:
                if head.query.shape[1] != self.width or head.value.shape[0] != self.width:
                    raise ShapeMismatch("attention head does not match program width")
            if mlp.w1.shape[1] != self.width or mlp.w2.shape[0] != self.width:
                raise ShapeMismatch("MLP does not match program width")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        def head(h: Head):
            return {"Q": h.query.tolist(), "K": h.key.tolist(), "V": h.value.tolist()}

        layers = []
        for attn, mlp in self.layers:
            layers.append({
                "attention": {"activation": attn.activation, "mask": attn.mask, "heads": [head(h) for h in attn.heads]},
                "mlp": {"activation": mlp.activation, "skip": mlp.skip, "w1": mlp.w1.tolist(), "b1": mlp.b1.tolist(),
                        "w2": mlp.w2.tolist(), "b2": mlp.b2.tolist()},
            })
        return {
            "width": self.width,
            "layers": layers,
            "readout": {"u": self.readout_u.tolist(), "v": self.readout_v},
            "query_column": self.query_column,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @staticmethod
    def from_dict(doc: dict) -> "TFProgram":
        try:
            width = int(doc["width"])
            layers = []
            for entry in doc["layers"]:
                a, m = entry["attention"], entry["mlp"]
                heads = tuple(Head(np.array(h["Q"]).reshape(-1, width), np.array(h["K"]).reshape(-1, width),
                                   np.array(h["V"]).reshape(width, width)) for h in a["heads"])
                mlp = MlpLayer(np.array(m["w1"]).reshape(-1, width), np.array(m["b1"]), np.array(m["w2"]).reshape(width, -1),
                               np.array(m["b2"]), m["activation"], bool(m["skip"]))
                layers.append((AttnLayer(heads, a["activation"], a["mask"]), mlp))
            return TFProgram(width, tuple(layers), np.array(doc["readout"]["u"]), float(doc["readout"]["v"]),
                             int(doc.get("query_column", -1)), dict(doc.get("meta", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed program document: {exc}") from exc

    @staticmethod
    def from_json(text: str) -> "TFProgram":
        return TFProgram.from_dict(json.loads(text))


def _states(h, width: int | None = None) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim < 2:
        raise ShapeMismatch(f"hidden states need shape (D, N), got {h.shape}")
    if width is not None and h.shape[-2] != width:
        raise ShapeMismatch(f"hidden width {h.shape[-2]} does not match {width}")
    return h


def attention_weights(layer: AttnLayer, head: Head, h: np.ndarray) -> np.ndarray:
    """act(<Q h_t, K h_j>) as an array (..., N_query, N_key)."""
    q = head.query @ h
    k = head.key @ h
    scores = np.swapaxes(q, -1, -2) @ k
    n = h.shape[-1]
    visible = np.tril(np.ones((n, n), dtype=bool)) if layer.mask == CAUSAL else np.ones((n, n), dtype=bool)
    if layer.activation == NORMALIZED_RELU:
        count = visible.sum(axis=1).astype(np.float64)
        return np.where(visible, np.maximum(scores, 0.0), 0.0) / count[:, None]
    masked = np.where(visible, scores, -np.inf)
    masked = masked - np.max(masked, axis=-1, keepdims=True)
    expo = np.exp(masked)
    return expo / np.sum(expo, axis=-1, keepdims=True)


def attn_forward(layer: AttnLayer, h) -> np.ndarray:
    h = _states(h)
    out = h.copy()
    for head in layer.heads:
        if head.query.shape[1] != h.shape[-2]:
            raise ShapeMismatch(f"head width {head.query.shape[1]} does not match states {h.shape[-2]}")
        weights = attention_weights(layer, head, h)
        out = out + (head.value @ h) @ np.swapaxes(weights, -1, -2)
    return out


def mlp_forward(layer: MlpLayer, h) -> np.ndarray:
    h = _states(h, layer.w1.shape[1])
    pre = layer.w1 @ h + layer.b1[:, None]
    act = np.maximum(pre, 0.0) if layer.activation == RELU else pre
    out = layer.w2 @ act + layer.b2[:, None]
    return h + out if layer.skip else out


def forward(prog: TFProgram, prompt, keep_states: bool = False):
    """Run every layer; returns the final states, plus the list of states
    after each (attention, MLP) pair when ``keep_states`` is set."""
    h = _states(prompt, prog.width)
    states = []
    for attn, mlp in prog.layers:
        h = mlp_forward(mlp, attn_forward(attn, h))
        if keep_states:
            states.append(h)
    return (h, states) if keep_states else h


def readout(prog: TFProgram, h) -> np.ndarray | float:
    h = _states(h, prog.width)
    val = h[..., :, prog.query_column] @ prog.readout_u + prog.readout_v
    return val if h.ndim > 2 else float(val)


def run_program(prog: TFProgram, prompt) -> np.ndarray | float:
    """Forward pass plus readout at the query column (last column by default)."""
    return readout(prog, forward(prog, prompt))
