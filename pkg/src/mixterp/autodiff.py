"""Minimal reverse-mode differentiable layer graph.

Supplies exactly the operations the two network branches need: dense, conv2d
(stride 1, same zero-padding), 2x2 max-pooling, relu/sigmoid/softplus,
element and spatial (whole-feature-map) inverted dropout, concat and flatten.

Conventions:
  - tensors are numpy arrays, batch-first; images are channels-first
    (batch, channels, height, width); feature vectors are (batch, features)
  - parameters are stored in 32-bit floats; matrix products and sum
    reductions accumulate in 64-bit; verification work casts the whole graph
    to 64-bit via Graph.cast
  - dropout masks are drawn fresh per forward pass in 'train' and
    'mc-sample' modes, pre-scaled by 1/(1-rate) so deterministic mode needs
    no rescaling; a Trace records the masks so backward (and replayed
    forwards) reuse them exactly
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, ShapeError, UsageError

MODES = ("train", "mc-sample", "deterministic")

OP_KINDS = (
    "input",
    "dense",
    "conv2d",
    "maxpool2x2",
    "relu",
    "sigmoid",
    "softplus",
    "dropout",
    "spatial_dropout",
    "concat",
    "flatten",
)


@dataclass
class Node:
    name: str
    op: str
    parents: list[str]
    out_shape: tuple[int, ...]  # per-sample shape, batch dim excluded
    params: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


class Graph:
    """Acyclic layer graph; node insertion order is a topological order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: dict[str, Node] = {}

    # -- construction -----------------------------------------------------

    def _add(self, node: Node) -> str:
        if node.name in self.nodes:
            raise UsageError(f"duplicate node name '{node.name}'")
        for p in node.parents:
            if p not in self.nodes:
                raise ShapeError(node.name, f"unknown parent '{p}'")
        self.nodes[node.name] = node
        return node.name

    def _shape(self, name: str) -> tuple[int, ...]:
        return self.nodes[name].out_shape

    def input(self, name: str, shape: tuple[int, ...]) -> str:
        return self._add(Node(name, "input", [], tuple(int(s) for s in shape)))

    def dense(self, name: str, parent: str, units: int, rng=None) -> str:
        shape = self._shape(parent)
        if len(shape) != 1:
            raise ShapeError(name, f"dense expects a flat parent, got {shape}")
        fan_in = shape[0]
        w = _init_uniform((fan_in, units), fan_in, rng, self.dtype)
        b = np.zeros(units, dtype=self.dtype)
        return self._add(Node(name, "dense", [parent], (units,),
                              params={"W": w, "b": b}))

    def conv2d(self, name: str, parent: str, channels: int, kernel: int = 3,
               rng=None) -> str:
        shape = self._shape(parent)
        if len(shape) != 3:
            raise ShapeError(name, f"conv2d expects (C,H,W) parent, got {shape}")
        if kernel % 2 != 1:
            raise UsageError("conv2d kernel must be odd for same padding")
        c_in, h, w_ = shape
        fan_in = c_in * kernel * kernel
        w = _init_uniform((channels, c_in, kernel, kernel), fan_in, rng, self.dtype)
        b = np.zeros(channels, dtype=self.dtype)
        return self._add(Node(name, "conv2d", [parent], (channels, h, w_),
                              params={"W": w, "b": b}, attrs={"kernel": kernel}))

    def maxpool2x2(self, name: str, parent: str) -> str:
        shape = self._shape(parent)
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(name, f"maxpool2x2 needs even (C,H,W), got {shape}")
        c, h, w = shape
        return self._add(Node(name, "maxpool2x2", [parent], (c, h // 2, w // 2)))

    def relu(self, name: str, parent: str) -> str:
        return self._add(Node(name, "relu", [parent], self._shape(parent)))

    def sigmoid(self, name: str, parent: str) -> str:
        return self._add(Node(name, "sigmoid", [parent], self._shape(parent)))

    def softplus(self, name: str, parent: str) -> str:
        return self._add(Node(name, "softplus", [parent], self._shape(parent)))

    def dropout(self, name: str, parent: str, rate: float) -> str:
        _check_rate(rate)
        return self._add(Node(name, "dropout", [parent], self._shape(parent),
                              attrs={"rate": float(rate)}))

    def spatial_dropout(self, name: str, parent: str, rate: float) -> str:
        _check_rate(rate)
        shape = self._shape(parent)
        if len(shape) != 3:
            raise ShapeError(name, f"spatial dropout needs (C,H,W), got {shape}")
        return self._add(Node(name, "spatial_dropout", [parent], shape,
                              attrs={"rate": float(rate)}))

    def concat(self, name: str, parents: list[str]) -> str:
        shapes = [self._shape(p) for p in parents]
        if any(len(s) != 1 for s in shapes):
            raise ShapeError(name, f"concat expects flat parents, got {shapes}")
        return self._add(Node(name, "concat", list(parents),
                              (sum(s[0] for s in shapes),)))

    def flatten(self, name: str, parent: str) -> str:
        shape = self._shape(parent)
        return self._add(Node(name, "flatten", [parent],
                              (int(np.prod(shape)),)))

    # -- parameters --------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        """Trainable parameters, '<node>/<W|b>' keyed, in declared order."""
        out: dict[str, np.ndarray] = {}
        for node in self.nodes.values():
            for pname, arr in node.params.items():
                out[f"{node.name}/{pname}"] = arr
        return out

    def set_param(self, key: str, value: np.ndarray) -> None:
        node_name, pname = key.rsplit("/", 1)
        node = self.nodes[node_name]
        cur = node.params[pname]
        if cur.shape != value.shape:
            raise ShapeError(node_name, f"param {pname}: expected {cur.shape}, "
                                        f"got {value.shape}")
        node.params[pname] = np.asarray(value, dtype=self.dtype)

    def parameter_count(self) -> int:
        return sum(arr.size for arr in self.params().values())

    def cast(self, dtype) -> "Graph":
        """Copy of the graph with parameters cast to `dtype`."""
        g = Graph(dtype)
        for node in self.nodes.values():
            g.nodes[node.name] = Node(
                node.name, node.op, list(node.parents), node.out_shape,
                params={k: v.astype(dtype) for k, v in node.params.items()},
                attrs=dict(node.attrs),
            )
        return g


def _check_rate(rate: float) -> None:
    if not (0.0 <= rate < 1.0):
        raise UsageError(f"dropout rate must lie in [0, 1), got {rate}")


def _init_uniform(shape, fan_in, rng, dtype) -> np.ndarray:
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- forward -----------------------------------------------------------------


@dataclass
class Trace:
    """Recorded forward pass: node outputs, dropout masks, op caches."""

    values: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    caches: dict[str, tuple]
    batch: int

    @property
    def outputs(self) -> dict[str, np.ndarray]:
        return self.values


def _matmul_acc(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    # 64-bit accumulation regardless of storage dtype
    r = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return r.astype(out_dtype, copy=False)


def _sum_acc(x: np.ndarray, axis, out_dtype) -> np.ndarray:
    return x.sum(axis=axis, dtype=np.float64).astype(out_dtype, copy=False)


def _im2col(x_pad: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    b, c = x_pad.shape[:2]
    cols = np.empty((b, c, k, k, h, w), dtype=x_pad.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = x_pad[:, :, di:di + h, dj:dj + w]
    return cols.reshape(b, c * k * k, h * w)


def forward(graph: Graph, inputs: dict[str, np.ndarray], mode: str = "deterministic",
            rng: np.random.Generator | None = None,
            masks: dict[str, np.ndarray] | None = None,
            shared_mask: bool = False) -> Trace:
    """Evaluate the whole graph on a batch; returns the recorded Trace.

    `masks` replays previously drawn dropout masks (freezing the stochastic
    pass); `shared_mask` draws one mask per dropout node shared across the
    batch, which makes every sample see the same sampled weights.
    """
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got '{mode}'")
    stochastic = mode in ("train", "mc-sample")
    if stochastic and rng is None and masks is None:
        raise UsageError(f"mode '{mode}' needs an rng (or replayed masks)")

    values: dict[str, np.ndarray] = {}
    drawn: dict[str, np.ndarray] = {}
    caches: dict[str, tuple] = {}
    dtype = graph.dtype
    batch = None

    input_nodes = [n for n in graph.nodes.values() if n.op == "input"]
    for node in input_nodes:
        if node.name not in inputs:
            raise UsageError(f"missing input '{node.name}'")
        x = np.asarray(inputs[node.name], dtype=dtype)
        if x.shape[1:] != node.out_shape:
            raise ShapeError(node.name, f"expected per-sample shape "
                                        f"{node.out_shape}, got {x.shape[1:]}")
        if batch is None:
            batch = x.shape[0]
        elif x.shape[0] != batch:
            raise ShapeError(node.name, "inconsistent batch sizes across inputs")
        values[node.name] = x
    if batch is None:
        raise UsageError("graph has no input nodes")

    for node in graph.nodes.values():
        if node.op == "input":
            continue
        parents = [values[p] for p in node.parents]
        x = parents[0]
        if node.op == "dense":
            w, b = node.params["W"], node.params["b"]
            values[node.name] = _matmul_acc(x, w, dtype) + b
        elif node.op == "conv2d":
            w, b = node.params["W"], node.params["b"]
            k = node.attrs["kernel"]
            pad = k // 2
            _, c, h, wd = x.shape
            x_pad = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            cols = _im2col(x_pad, k, h, wd)  # (B, C*k*k, H*W)
            w_mat = w.reshape(w.shape[0], -1)  # (O, C*k*k)
            y = _matmul_acc(w_mat, cols, dtype)  # (B, O, H*W)
            values[node.name] = y.reshape(x.shape[0], w.shape[0], h, wd) \
                + b[None, :, None, None]
            caches[node.name] = (cols,)
        elif node.op == "maxpool2x2":
            bsz, c, h, wd = x.shape
            win = x.reshape(bsz, c, h // 2, 2, wd // 2, 2) \
                   .transpose(0, 1, 2, 4, 3, 5) \
                   .reshape(bsz, c, h // 2, wd // 2, 4)
            idx = win.argmax(axis=-1)  # first max wins on ties (row-major)
            values[node.name] = np.take_along_axis(
                win, idx[..., None], axis=-1)[..., 0]
            caches[node.name] = (idx,)
        elif node.op == "relu":
            values[node.name] = np.maximum(x, 0)
        elif node.op == "sigmoid":
            values[node.name] = _sigmoid(x)
        elif node.op == "softplus":
            values[node.name] = _softplus(x)
        elif node.op in ("dropout", "spatial_dropout"):
            rate = node.attrs["rate"]
            if masks is not None and node.name in masks:
                mask = masks[node.name]
            elif not stochastic or rate == 0.0:
                mask = None
            else:
                if node.op == "spatial_dropout":
                    mshape = (1 if shared_mask else x.shape[0], x.shape[1], 1, 1)
                else:
                    mshape = (1 if shared_mask else x.shape[0],) + x.shape[1:]
                keep = (rng.random(mshape) >= rate)
                mask = keep.astype(dtype) / dtype.type(1.0 - rate)
            if mask is None:
                values[node.name] = x
            else:
                values[node.name] = x * mask
                drawn[node.name] = mask
        elif node.op == "concat":
            values[node.name] = np.concatenate(parents, axis=1)
        elif node.op == "flatten":
            values[node.name] = x.reshape(x.shape[0], -1)
        else:  # pragma: no cover - construction forbids unknown ops
            raise UsageError(f"unknown op '{node.op}'")

    return Trace(values=values, masks=drawn, caches=caches, batch=batch)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


# -- backward ----------------------------------------------------------------


def backward(graph: Graph, trace: Trace,
             seed_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Adjoints of a recorded forward pass.

    `seed_grads` maps node names to dLoss/dOutput arrays. Returns gradients
    for every trainable parameter ('<node>/<W|b>') and for every input node
    reached by the sweep; the same dropout masks recorded in the trace are
    applied on the way back.
    """
    if not seed_grads:
        raise UsageError("backward needs at least one seeded output gradient")
    adj: dict[str, np.ndarray] = {}
    for name, g in seed_grads.items():
        if name not in graph.nodes:
            raise UsageError(f"unknown seed node '{name}'")
        g = np.asarray(g, dtype=graph.dtype)
        if g.shape != trace.values[name].shape:
            raise ShapeError(name, f"seed gradient shape {g.shape} != output "
                                   f"shape {trace.values[name].shape}")
        adj[name] = g.copy()

    grads: dict[str, np.ndarray] = {}
    dtype = graph.dtype

    for node in reversed(list(graph.nodes.values())):
        if node.name not in adj:
            continue
        dy = adj[node.name]
        if node.op == "input":
            grads[node.name] = dy
            continue
        x = trace.values[node.parents[0]]
        if node.op == "dense":
            w = node.params["W"]
            grads[f"{node.name}/W"] = _matmul_acc(x.T, dy, dtype)
            grads[f"{node.name}/b"] = _sum_acc(dy, 0, dtype)
            _accum(adj, node.parents[0], _matmul_acc(dy, w.T, dtype))
        elif node.op == "conv2d":
            w = node.params["W"]
            k = node.attrs["kernel"]
            pad = k // 2
            bsz, c, h, wd = x.shape
            (cols,) = trace.caches[node.name]
            dy_mat = dy.reshape(bsz, w.shape[0], h * wd)  # (B, O, HW)
            dw = _sum_acc(np.matmul(dy_mat.astype(np.float64),
                                    cols.transpose(0, 2, 1).astype(np.float64)),
                          0, dtype)
            grads[f"{node.name}/W"] = dw.reshape(w.shape)
            grads[f"{node.name}/b"] = _sum_acc(dy, (0, 2, 3), dtype)
            w_mat = w.reshape(w.shape[0], -1)
            dcols = _matmul_acc(w_mat.T, dy_mat, dtype)  # (B, C*k*k, HW)
            dcols = dcols.reshape(bsz, c, k, k, h, wd)
            dx_pad = np.zeros((bsz, c, h + 2 * pad, wd + 2 * pad), dtype=dtype)
            for di in range(k):
                for dj in range(k):
                    dx_pad[:, :, di:di + h, dj:dj + wd] += dcols[:, :, di, dj]
            _accum(adj, node.parents[0], dx_pad[:, :, pad:pad + h, pad:pad + wd])
        elif node.op == "maxpool2x2":
            (idx,) = trace.caches[node.name]
            bsz, c, h, wd = x.shape
            dwin = np.zeros((bsz, c, h // 2, wd // 2, 4), dtype=dtype)
            np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
            dx = dwin.reshape(bsz, c, h // 2, wd // 2, 2, 2) \
                     .transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, wd)
            _accum(adj, node.parents[0], dx)
        elif node.op == "relu":
            _accum(adj, node.parents[0], dy * (x > 0))
        elif node.op == "sigmoid":
            y = trace.values[node.name]
            _accum(adj, node.parents[0], dy * y * (1.0 - y))
        elif node.op == "softplus":
            _accum(adj, node.parents[0], dy * _sigmoid(x))
        elif node.op in ("dropout", "spatial_dropout"):
            mask = trace.masks.get(node.name)
            _accum(adj, node.parents[0], dy if mask is None else dy * mask)
        elif node.op == "concat":
            off = 0
            for p in node.parents:
                width = trace.values[p].shape[1]
                _accum(adj, p, dy[:, off:off + width])
                off += width
        elif node.op == "flatten":
            _accum(adj, node.parents[0], dy.reshape(x.shape))

    return grads


def _accum(adj: dict[str, np.ndarray], name: str, g: np.ndarray) -> None:
    if name in adj:
        adj[name] = adj[name] + g
    else:
        adj[name] = g


# -- verification --------------------------------------------------------------


def default_sum_loss(outputs: dict[str, np.ndarray], leaves: list[str]):
    loss = sum(float(outputs[n].sum()) for n in leaves)
    seeds = {n: np.ones_like(outputs[n]) for n in leaves}
    return loss, seeds


def finite_difference_check(graph: Graph, inputs: dict[str, np.ndarray],
                            epsilon: float, loss=None, mode: str = "deterministic",
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss` is a callable mapping the forward outputs to (scalar, seed_grads);
    by default the loss is the sum of every leaf node's output. Stochastic
    modes draw dropout masks once and freeze them for all evaluations. The
    whole check runs on a 64-bit copy of the graph.
    """
    if not (1e-5 <= epsilon <= 1e-2):
        raise UsageError("epsilon must lie in [1e-5, 1e-2]")
    g = graph.cast(np.float64)
    if loss is None:
        leaves = _leaf_nodes(g)
        loss = lambda outs: default_sum_loss(outs, leaves)  # noqa: E731

    trace0 = forward(g, inputs, mode=mode, rng=rng)
    masks = trace0.masks
    _, seeds = loss(trace0.values)
    grads = backward(g, trace0, seeds)

    def eval_loss() -> float:
        tr = forward(g, inputs, mode=mode, masks=masks)
        return loss(tr.values)[0]

    max_rel = 0.0
    for key, arr in g.params().items():
        analytic = grads.get(key, np.zeros_like(arr))
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = eval_loss()
            flat[i] = orig - epsilon
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            rel = abs(analytic.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
            max_rel = max(max_rel, rel)
    return max_rel


def _leaf_nodes(graph: Graph) -> list[str]:
    used = {p for n in graph.nodes.values() for p in n.parents}
    return [n.name for n in graph.nodes.values() if n.name not in used]


# -- named-tensor container ---------------------------------------------------

_MAGIC = "MIXTERP-TENSORS v1"


def write_tensors(path, tensors: dict[str, np.ndarray],
                  config: dict[str, str] | None = None) -> None:
    """Binary container: text header (version, config echo, named tensor list
    with shapes) then the flat little-endian float32 arrays in declared order."""
    config = config or {}
    buf = io.BytesIO()
    header = [_MAGIC]
    for key in sorted(config):
        val = str(config[key])
        if "\n" in key or "\n" in val or "=" in key:
            raise UsageError(f"config entry '{key}' not header-safe")
        header.append(f"config {key}={val}")
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise UsageError(f"tensor name '{name}' contains whitespace")
        shape = "x".join(str(int(d)) for d in arr.shape) or "scalar"
        header.append(f"tensor {name} {shape}")
    header.append("end-header")
    buf.write(("\n".join(header) + "\n").encode("utf-8"))
    for arr in tensors.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0 or blob[:nl].decode("utf-8", "replace") != _MAGIC:
        raise DataFormatError(f"{path}: not a mixterp tensor file")
    pos = nl + 1
    config: dict[str, str] = {}
    order: list[tuple[str, tuple[int, ...]]] = []
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise DataFormatError(f"{path}: truncated header")
        line = blob[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end-header":
            break
        if line.startswith("config "):
            key, _, val = line[len("config "):].partition("=")
            config[key] = val
        elif line.startswith("tensor "):
            _, name, shape_s = line.split(" ", 2)
            shape = () if shape_s == "scalar" else \
                tuple(int(d) for d in shape_s.split("x"))
            order.append((name, shape))
        else:
            raise DataFormatError(f"{path}: bad header line '{line}'")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in order:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        raw = blob[pos:pos + nbytes]
        if len(raw) != nbytes:
            raise DataFormatError(f"{path}: truncated data for tensor '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise DataFormatError(f"{path}: trailing bytes after tensor data")
    return tensors, config
