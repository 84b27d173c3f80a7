"""Weight-level constructions: prompt layout, primitive layers and the
Transformer that runs k Newton-Schulz steps in k+8 layers.

Prompt layout for dimension d (rows are 0-based, columns are tokens)::

    rows [0, d)         x block: x_i on example columns, later T x_i, then w_hat
    rows [d, 2d)        copy block (x_i kept for the iteration layers)
    row  2d             label: y_i on label columns, prediction on the query column
    rows [2d+1, 3d+1)   query block: x_query on the last column
    row  3d+1           constant 1 on every column
    row  3d+2           position 1..N of the column
    rows [3d+3, 4d+2)   unused padding

Example columns are 0, 2, 4, ..., label columns 1, 3, 5, ..., and the query
is column 2t.  All attention in the constructions is full-mask
normalized-ReLU, so every head's weight is ReLU(score)/N with N = 2t+1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidDims, InvalidSlice
from .taskgen import TaskInstance
from .transformer import FULL, IDENTITY, NORMALIZED_RELU, RELU, AttnLayer, Head, MlpLayer, TFProgram

GRAM_SCALED = "gram_scaled"
COVARIANCE_SCALED = "covariance_scaled"
MODES = (GRAM_SCALED, COVARIANCE_SCALED)


@dataclass(frozen=True)
class PromptLayout:
    dim: int

    @property
    def x(self) -> slice:
        return slice(0, self.dim)

    @property
    def copy(self) -> slice:
        return slice(self.dim, 2 * self.dim)

    @property
    def label(self) -> int:
        return 2 * self.dim

    @property
    def query(self) -> slice:
        return slice(2 * self.dim + 1, 3 * self.dim + 1)

    @property
    def one(self) -> int:
        return 3 * self.dim + 1

    @property
    def pos(self) -> int:
        return 3 * self.dim + 2

    @property
    def min_width(self) -> int:
        return 3 * self.dim + 3

    @property
    def width(self) -> int:
        """Hidden width used by the Newton program."""
        return 4 * self.dim + 2


def encode_arrays(xs, ys, x_query, width: int | None = None) -> np.ndarray:
    """Interleaved prompt for examples ``xs`` (t, d), labels ``ys`` (t,).

    Leading batch axes are allowed: xs (..., t, d), ys (..., t), x_query (..., d).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x_query = np.asarray(x_query, dtype=np.float64)
    t, d = xs.shape[-2:]
    if ys.shape[-1] != t or x_query.shape[-1] != d:
        raise DimensionMismatch(f"xs {xs.shape}, ys {ys.shape}, x_query {x_query.shape} disagree")
    lay = PromptLayout(d)
    width = lay.width if width is None else width
    if width < lay.min_width:
        raise DimensionMismatch(f"width {width} is below the {lay.min_width} rows the layout needs")
    batch = xs.shape[:-2]
    h = np.zeros(batch + (width, 2 * t + 1))
    h[..., lay.x, 0:2 * t:2] = np.swapaxes(xs, -1, -2)
    h[..., lay.label, 1:2 * t:2] = ys
    h[..., lay.query, 2 * t] = x_query
    h[..., lay.one, :] = 1.0
    h[..., lay.pos, :] = np.arange(1, 2 * t + 2)
    return h


def encode_prompt(task: TaskInstance, t: int, x_query=None, width: int | None = None) -> np.ndarray:
    """Prompt for the first ``t`` examples of ``task``; the query defaults to x_{t+1}."""
    if not 1 <= t <= task.n_examples:
        raise DimensionMismatch(f"prefix length {t} outside 1..{task.n_examples}")
    if x_query is None:
        x_query = task.xs[t]
    xs, ys = task.prefix(t)
    return encode_arrays(xs, ys, x_query, width)


def decode_prompt(h, dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h = np.asarray(h, dtype=np.float64)
    cols = h.shape[-1]
    if cols % 2 != 1:
        raise DimensionMismatch("a prompt has an odd number of columns")
    lay = PromptLayout(dim)
    xs = np.swapaxes(h[..., lay.x, 0:cols - 1:2], -1, -2)
    ys = h[..., lay.label, 1:cols - 1:2]
    return xs, ys, h[..., lay.query, cols - 1]


# ---------------------------------------------------------------------------
# weight templates


def _move(width: int, src, dst, scale: float = 1.0) -> np.ndarray:
    """Matrix writing ``scale`` * rows ``src`` into rows ``dst``."""
    m = np.zeros((width, width))
    m[np.arange(width)[dst], np.arange(width)[src]] = scale
    return m


def _project(width: int, rows, scale: float = 1.0) -> np.ndarray:
    return _move(width, rows, rows, scale)


def _pm_pair(query: np.ndarray, key: np.ndarray, value: np.ndarray) -> list[Head]:
    """Two heads whose normalized-ReLU outputs add to a linear attention:
    ReLU(a) V - ReLU(-a) V = a V."""
    return [Head(query, key, value), Head(query, -key, -value)]


def _affine_score_heads(width: int, one: int, pos: int, slope: float, offset: float,
                        weights: dict[float, float], value: np.ndarray) -> list[Head]:
    """Heads with score (POS_j - slope*POS_t - offset + c) for each shift c,
    value scaled by ``weights[c]``."""
    heads = []
    for c, w in weights.items():
        q = np.zeros((2, width))
        k = np.zeros((2, width))
        q[0, one] = 1.0
        k[0, pos] = 1.0
        q[1, pos] = -slope
        q[1, one] = c - offset
        k[1, one] = 1.0
        heads.append(Head(q, k, w * value))
    return heads


_HAT = {1.0: 1.0, 0.0: -2.0, -1.0: 1.0}


def hat_heads(width: int, one: int, pos: int, slope: float, offset: float, value: np.ndarray) -> list[Head]:
    """Three heads giving weight 1 exactly when POS_j = slope*POS_t + offset,
    0 at every other integer position (times the 1/N normalization)."""
    return _affine_score_heads(width, one, pos, slope, offset, _HAT, value)


def point_heads(width: int, one: int, pos: int, n_cols: int, src_col: int, dst_col: int, value: np.ndarray) -> list[Head]:
    """Heads under which only column ``dst_col`` reads, and only from ``src_col``."""
    big = float(n_cols + 1)
    # score: (j - s) + big*(t - t0) = j - (-big*t + s + big*t0)
    return hat_heads(width, one, pos, -big, (src_col + 1) + big * (dst_col + 1), value)


def product_heads(width: int, one: int, pos: int, left: int, right: int, bound: float, value: np.ndarray) -> list[Head]:
    """Heads adding h_t[left] * h_t[right] * (value @ e_one) to every column.

    Uses the window g(u) = -R(u+2B) + 2R(u+B) - 2R(u-B) + R(u-2B), which is
    the identity on [-B, B] and vanishes beyond 2B, with
    u = h_t[left] h_j[right] + 4B (j - t).  Exact for |h[left] h[right]| <= B.
    """
    heads = []
    for c, w in ((2.0 * bound, -1.0), (bound, 2.0), (-bound, -2.0), (-2.0 * bound, 1.0)):
        q = np.zeros((3, width))
        k = np.zeros((3, width))
        q[0, left] = 1.0
        k[0, right] = 1.0
        q[1, one] = 4.0 * bound
        k[1, pos] = 1.0
        q[2, pos] = -4.0 * bound
        q[2, one] = c
        k[2, one] = 1.0
        heads.append(Head(q, k, w * value))
    return heads


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Frame:
    """Geometry shared by every primitive: width, column count and the
    rows holding the constant 1 and the column position."""

    width: int
    n_cols: int
    one: int
    pos: int

    def check_rows(self, *ranges) -> None:
        for r in ranges:
            lo, hi = r
            if not 0 <= lo <= hi <= self.width:
                raise InvalidSlice(f"row range {r} outside [0, {self.width})")
            for special in (self.one, self.pos):
                if lo <= special < hi:
                    raise InvalidSlice(f"row range {r} overlaps the constant/position rows")

    def check_cols(self, *cols) -> None:
        for c in cols:
            if not 0 <= c < self.n_cols:
                raise InvalidSlice(f"column {c} outside [0, {self.n_cols})")

    def attention(self, heads) -> AttnLayer:
        return AttnLayer(tuple(heads), NORMALIZED_RELU, FULL)

    def erase_heads(self, rows: slice) -> list[Head]:
        """Subtract a column's own ``rows`` from themselves."""
        return hat_heads(self.width, self.one, self.pos, 1.0, 0.0, _project(self.width, rows, -self.n_cols))


def _rng(r) -> slice:
    return slice(r[0], r[1])


def _mov(frame: Frame, src_col: int, dst_col: int, src_rows, dst_rows) -> list[tuple[AttnLayer, MlpLayer]]:
    frame.check_rows(src_rows, dst_rows)
    frame.check_cols(src_col, dst_col)
    if src_rows[1] - src_rows[0] != dst_rows[1] - dst_rows[0]:
        raise InvalidSlice("source and destination row ranges differ in length")
    n, w = frame.n_cols, frame.width
    heads = point_heads(w, frame.one, frame.pos, n, src_col, dst_col, _move(w, _rng(src_rows), _rng(dst_rows), n))
    heads += point_heads(w, frame.one, frame.pos, n, dst_col, dst_col, _project(w, _rng(dst_rows), -n))
    return [(frame.attention(heads), MlpLayer.identity(w))]


def _mul_heads(frame: Frame, a: int, b: int, c: int, r1, r2, r3, bound: float) -> list[Head]:
    heads = frame.erase_heads(_rng(r3))
    for p in range(a):
        for q in range(b):
            for r in range(c):
                value = np.zeros((frame.width, frame.width))
                value[r3[0] + p * c + r, frame.one] = frame.n_cols
                heads += product_heads(frame.width, frame.one, frame.pos, r1[0] + p * b + q, r2[0] + q * c + r, bound, value)
    return heads


def _mul(frame: Frame, a: int, b: int, c: int, r1, r2, r3, bound: float) -> list[tuple[AttnLayer, MlpLayer]]:
    frame.check_rows(r1, r2, r3)
    if a < 1 or b < 1 or c < 1:
        raise InvalidSlice("matrix dimensions must be positive")
    if r1[1] - r1[0] != a * b or r2[1] - r2[0] != b * c or r3[1] - r3[0] != a * c:
        raise InvalidSlice("row ranges do not match the matrix shapes")
    if not bound > 0:
        raise InvalidSlice("product bound must be positive")
    return [(frame.attention(_mul_heads(frame, a, b, c, r1, r2, r3, bound)), MlpLayer.identity(frame.width))]


def _aff(frame: Frame, r1, r2, r3, w1, w2, bias) -> list[tuple[AttnLayer, MlpLayer]]:
    frame.check_rows(r1, r2, r3)
    w1 = np.atleast_2d(np.asarray(w1, dtype=np.float64))
    w2 = np.atleast_2d(np.asarray(w2, dtype=np.float64))
    out = r3[1] - r3[0]
    bias = np.zeros(out) if bias is None else np.asarray(bias, dtype=np.float64)
    if w1.shape != (out, r1[1] - r1[0]) or w2.shape != (out, r2[1] - r2[0]) or bias.shape != (out,):
        raise InvalidSlice("affine weights do not match the row ranges")
    width = frame.width
    update = np.zeros((width, width))
    update[r3[0]:r3[1], r1[0]:r1[1]] += w1
    update[r3[0]:r3[1], r2[0]:r2[1]] += w2
    update[r3[0]:r3[1], r3[0]:r3[1]] -= np.eye(out)
    b1 = np.zeros(width)
    b1[r3[0]:r3[1]] = bias
    mlp = MlpLayer(update, b1, np.eye(width), np.zeros(width), IDENTITY, True)
    return [(frame.attention(()), mlp)]


def _sum(frame: Frame, src_rows, dst_rows) -> list[tuple[AttnLayer, MlpLayer]]:
    frame.check_rows(src_rows, dst_rows)
    if src_rows[1] - src_rows[0] != dst_rows[1] - dst_rows[0]:
        raise InvalidSlice("source and destination row ranges differ in length")
    w = frame.width
    sel = np.zeros((1, w))
    sel[0, frame.one] = 1.0
    value = _move(w, _rng(src_rows), _rng(dst_rows), frame.n_cols)
    return [(frame.attention([Head(sel, sel, value)]), MlpLayer.identity(w))]


def _count(frame: Frame, dst_row: int) -> list[tuple[AttnLayer, MlpLayer]]:
    frame.check_rows((dst_row, dst_row + 1))
    w = frame.width
    sel = np.zeros((1, w))
    sel[0, frame.one] = 1.0
    value = np.zeros((w, w))
    value[dst_row, frame.pos] = 2.0
    value[dst_row, frame.one] = -1.0
    # sum_j (2j - 1) / N = N
    return [(frame.attention([Head(sel, sel, value)]), MlpLayer.identity(w))]


def reciprocal_steps(c_min: float, c_max: float) -> int:
    """Squarings needed so the reciprocal error (1 - c r0)^(2^m) is below 2^-60."""
    ratio = (c_max - c_min) / (c_max + c_min)
    if ratio <= 0.0:
        return 0
    return max(0, math.ceil(math.log2(60.0 * math.log(2.0) / -math.log(ratio))))


def _div(frame: Frame, src_rows, denom_row: int, dst_rows, c_range, scratch: int, bound: float):
    """h[dst] = h[src] / |h[denom]| for |h[denom]| in ``c_range``.

    Uses three scratch rows (|c|, r, e).  r starts at 2/(c_min + c_max) and
    e = 1 - |c| r; each layer maps (r, e) to (r + r e, e^2), so after m layers
    r = (1 - e0^(2^m)) / |c|.  A final layer multiplies the source by r.
    """
    c_min, c_max = map(float, c_range)
    if not 0.0 < c_min <= c_max:
        raise InvalidSlice("divisor range must satisfy 0 < c_min <= c_max")
    frame.check_rows(src_rows, dst_rows, (denom_row, denom_row + 1), (scratch, scratch + 3))
    if src_rows[1] - src_rows[0] != dst_rows[1] - dst_rows[0]:
        raise InvalidSlice("source and destination row ranges differ in length")
    w = frame.width
    absr, rr, er = scratch, scratch + 1, scratch + 2
    r0 = 2.0 / (c_min + c_max)

    # |c| = R(c) + R(-c); scratch rows overwritten via R(s) - R(-s) = s
    w1 = np.zeros((8, w))
    w1[0, denom_row], w1[1, denom_row] = 1.0, -1.0
    for i, row in enumerate((absr, rr, er)):
        w1[2 + 2 * i, row], w1[3 + 2 * i, row] = 1.0, -1.0
    w2 = np.zeros((w, 8))
    w2[absr, 0:2] = 1.0
    w2[er, 0:2] = -r0
    for i, row in enumerate((absr, rr, er)):
        w2[row, 2 + 2 * i] -= 1.0
        w2[row, 3 + 2 * i] += 1.0
    b2 = np.zeros(w)
    b2[rr], b2[er] = r0, 1.0
    layers = [(frame.attention(()), MlpLayer(w1, np.zeros(8), w2, b2, RELU, True))]

    n = frame.n_cols
    inner_bound = max(1.0, r0)
    for _ in range(reciprocal_steps(c_min, c_max)):
        to_r = np.zeros((w, w))
        to_r[rr, frame.one] = n
        to_e = np.zeros((w, w))
        to_e[er, frame.one] = n
        heads = product_heads(w, frame.one, frame.pos, rr, er, inner_bound, to_r)
        heads += product_heads(w, frame.one, frame.pos, er, er, inner_bound, to_e)
        heads += frame.erase_heads(slice(er, er + 1))
        layers.append((frame.attention(heads), MlpLayer.identity(w)))

    heads = frame.erase_heads(_rng(dst_rows))
    for i in range(src_rows[1] - src_rows[0]):
        value = np.zeros((w, w))
        value[dst_rows[0] + i, frame.one] = n
        heads += product_heads(w, frame.one, frame.pos, src_rows[0] + i, rr, bound, value)
    layers.append((frame.attention(heads), MlpLayer.identity(w)))
    return layers


PRIMITIVES = ("mov", "mul", "div", "aff", "sum", "count")


def build_primitive(kind: str, params: dict | None = None, **kwargs) -> list[tuple[AttnLayer, MlpLayer]]:
    """Layers performing one primitive on designated rows/columns.

    Every kind needs ``width``, ``n_cols``, ``one_row`` and ``pos_row``.
    Row ranges are half-open ``(start, stop)`` pairs and columns are 0-based.

    =====  ==================================================================
    mov    ``src_col, dst_col, src_rows, dst_rows``: overwrite dst rows of
           column dst_col with src rows of column src_col
    mul    ``a, b, c, left, right, out, bound``: per column, out = L @ R with
           L (a x b) and R (b x c) stored row-major; exact when every scalar
           product is at most ``bound`` in magnitude
    div    ``src_rows, denom_row, dst_rows, c_range, scratch, bound``: per
           column, dst = src / |h[denom_row]|; ``scratch`` starts three
           free rows; |denominator| must lie in ``c_range``
    aff    ``left, right, out, w1, w2, bias``: out = w1 @ h[left] + w2 @ h[right] + bias
    sum    ``src_rows, dst_rows``: dst += sum of src over all columns
    count  ``dst_row``: dst += number of columns
    =====  ==================================================================
    """
    p = dict(params or {})
    p.update(kwargs)
    if kind not in PRIMITIVES:
        raise InvalidSlice(f"unknown primitive {kind!r}")
    try:
        frame = Frame(int(p["width"]), int(p["n_cols"]), int(p["one_row"]), int(p["pos_row"]))
        if kind == "mov":
            return _mov(frame, int(p["src_col"]), int(p["dst_col"]), tuple(p["src_rows"]), tuple(p["dst_rows"]))
        if kind == "mul":
            return _mul(frame, int(p["a"]), int(p["b"]), int(p["c"]), tuple(p["left"]), tuple(p["right"]),
                        tuple(p["out"]), float(p.get("bound", 1e3)))
        if kind == "div":
            return _div(frame, tuple(p["src_rows"]), int(p["denom_row"]), tuple(p["dst_rows"]), tuple(p["c_range"]),
                        int(p["scratch"]), float(p.get("bound", 1e3)))
        if kind == "aff":
            return _aff(frame, tuple(p["left"]), tuple(p["right"]), tuple(p["out"]), p["w1"], p["w2"], p.get("bias"))
        if kind == "sum":
            return _sum(frame, tuple(p["src_rows"]), tuple(p["dst_rows"]))
        return _count(frame, int(p["dst_row"]))
    except KeyError as exc:
        raise InvalidSlice(f"{kind} is missing parameter {exc}") from exc


# ---------------------------------------------------------------------------
# the Newton program


def prompt_columns(n: int) -> int:
    return 2 * n + 1


def effective_alpha(alpha: float, n: int, mode: str = GRAM_SCALED) -> float:
    """Step size on S = XᵀX that the program's iteration is equivalent to.

    Covariance-scaled programs iterate on S/N (N = 2n+1 prompt columns), so
    their alpha is N² times the equivalent Gram-matrix alpha.
    """
    return alpha if mode == GRAM_SCALED else alpha / prompt_columns(n) ** 2


def state_scale(n: int, mode: str = GRAM_SCALED) -> float:
    """Factor between the x-block after an iteration layer and M_l x_t."""
    return 1.0 if mode == GRAM_SCALED else float(prompt_columns(n))


def build_newton_program(d: int, n: int, k: int, alpha: float, mode: str = GRAM_SCALED) -> TFProgram:
    """k Newton-Schulz steps in k+8 layers of width 4d+2.

    Layer roles: copy x, gather x + alpha S x, subtract x (three set-up
    layers); k iteration layers T <- 2T - T S T; then shift T x_i next to
    y_i, sum y_i T x_i into every column, take the inner product with the
    query, and two pass-through layers.  ``alpha`` is the Gram-matrix step
    for ``gram_scaled`` and the S/N step for ``covariance_scaled``.
    """
    if d < 1 or n < 1 or k < 0:
        raise InvalidDims(f"need d >= 1, n >= 1, k >= 0; got d={d}, n={n}, k={k}")
    if mode not in MODES:
        raise InvalidDims(f"unknown mode {mode!r}")
    lay = PromptLayout(d)
    width = lay.width
    n_cols = prompt_columns(n)
    gram = mode == GRAM_SCALED
    scale = float(n_cols) if gram else 1.0
    xb, cb = lay.x, lay.copy
    empty = AttnLayer((), NORMALIZED_RELU, FULL)
    layers: list[tuple[AttnLayer, MlpLayer]] = []
    roles: list[str] = []

    layers.append((empty, MlpLayer.linear(_move(width, xb, cb))))
    roles.append("copy")

    px = _project(width, xb)
    layers.append((AttnLayer(tuple(_pm_pair(px, px, alpha * scale * px)), NORMALIZED_RELU, FULL), MlpLayer.identity(width)))
    roles.append("gram")

    layers.append((empty, MlpLayer.linear(-_move(width, cb, xb))))
    roles.append("subtract")

    copy_to_x = _move(width, cb, xb)
    iterate = AttnLayer(tuple(_pm_pair(copy_to_x, px, -0.5 * scale * px)), NORMALIZED_RELU, FULL)
    double = MlpLayer.linear(px)
    for step in range(1, k + 1):
        layers.append((iterate, double))
        roles.append(f"iterate{step}")

    shift = hat_heads(width, lay.one, lay.pos, 1.0, -1.0, _move(width, xb, lay.query, scale))
    layers.append((AttnLayer(tuple(shift), NORMALIZED_RELU, FULL), MlpLayer.linear(-px)))
    roles.append("shift")

    ones = np.zeros((1, width))
    ones[0, lay.one] = 1.0
    labels = np.zeros((1, width))
    labels[0, lay.label] = 1.0
    gather = _pm_pair(ones, labels, _move(width, lay.query, xb, scale))
    layers.append((AttnLayer(tuple(gather), NORMALIZED_RELU, FULL), MlpLayer.identity(width)))
    roles.append("sum")

    to_label = np.zeros((width, width))
    if gram:
        to_label[lay.label, lay.one] = 1.0
    else:
        # sum_j (2 POS_j - 1) / N = N restores the remaining factor
        to_label[lay.label, lay.pos] = 2.0
        to_label[lay.label, lay.one] = -1.0
    inner = _pm_pair(_move(width, lay.query, xb), px, to_label)
    layers.append((AttnLayer(tuple(inner), NORMALIZED_RELU, FULL), MlpLayer.identity(width)))
    roles.append("product")

    for _ in range(2):
        layers.append((empty, MlpLayer.identity(width)))
        roles.append("pass")

    u = np.zeros(width)
    u[lay.label] = 1.0
    meta = {"kind": "newton", "mode": mode, "d": d, "n": n, "k": k, "alpha": alpha, "roles": roles}
    return TFProgram(width, tuple(layers), u, 0.0, -1, meta)
