"""Network DAG with recorded-tape backpropagation and SGD updates."""

from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, ShapeError, make_conv, make_linear


class GradientError(ValueError):
    """Backward/step called with missing or non-finite gradient state."""


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: list  # producer node names or graph input names


@dataclass
class Tape:
    """Per-forward record consumed by one backward pass."""

    caches: dict
    feed_names: list
    consumed: bool = False


@dataclass
class Grads:
    """Parameter gradients per node plus gradients w.r.t. graph inputs."""

    params: dict = field(default_factory=dict)  # name -> (dw, db)
    inputs: dict = field(default_factory=dict)  # input name -> array

    def add(self, other: "Grads") -> "Grads":
        for name, (dw, db) in other.params.items():
            if name in self.params:
                sw, sb = self.params[name]
                self.params[name] = (sw + dw, sb + db)
            else:
                self.params[name] = (dw, db)
        for name, g in other.inputs.items():
            self.inputs[name] = self.inputs.get(name, 0) + g
        return self

    def scale(self, s: float) -> "Grads":
        self.params = {k: (dw * s, db * s) for k, (dw, db) in self.params.items()}
        self.inputs = {k: g * s for k, g in self.inputs.items()}
        return self


class Network:
    """Ordered acyclic graph of layers with a single output node.

    Weights are immutable during inference; a forward pass with
    ``record=True`` returns a Tape that the matching ``backward`` call
    consumes. Identical inputs and weights give bit-identical outputs.
    """

    def __init__(self, input_names, nodes, output):
        self.input_names = list(input_names)
        self.nodes = list(nodes)
        self.output = output
        self._by_name = {n.name: n for n in self.nodes}
        self._validate_graph()

    def _validate_graph(self):
        seen = set(self.input_names)
        for node in self.nodes:
            for src in node.inputs:
                if src not in seen:
                    raise ValueError(
                        f"node {node.name!r} consumes {src!r} before it is produced "
                        "(graph must be topologically ordered and acyclic)")
            if node.name in seen:
                raise ValueError(f"duplicate node name {node.name!r}")
            seen.add(node.name)
        if self.output not in seen:
            raise ValueError(f"output node {self.output!r} not in graph")

    # -- introspection -----------------------------------------------------

    @property
    def parameter_count(self) -> int:
        return sum(n.layer.param_count() for n in self.nodes)

    def param_nodes(self):
        return [n for n in self.nodes if n.layer.has_params]

    def node(self, name: str) -> Node:
        return self._by_name[name]

    # -- execution ---------------------------------------------------------

    def forward(self, feeds, record=False):
        """Run the graph. ``feeds`` is one array, a list matching
        input_names, or a dict name -> array. Returns the output array,
        or (output, Tape) when record is True."""
        feeds = self._normalize_feeds(feeds)
        values = dict(feeds)
        caches = {}
        for node in self.nodes:
            xs = [values[src] for src in node.inputs]
            try:
                out, cache = node.layer.forward(xs, record)
            except ShapeError:
                raise
            except ValueError as e:
                raise ShapeError(f"layer {node.name!r}: {e}") from e
            values[node.name] = out
            if record:
                caches[node.name] = cache
        out = values[self.output]
        if record:
            return out, Tape(caches=caches, feed_names=list(feeds))
        return out

    def forward_collect(self, feeds) -> dict:
        """Forward pass that returns every node's output by name (for
        shape inspection and debugging; no tape is recorded)."""
        feeds = self._normalize_feeds(feeds)
        values = dict(feeds)
        for node in self.nodes:
            out, _ = node.layer.forward([values[src] for src in node.inputs],
                                        record=False)
            values[node.name] = out
        return values

    def backward(self, tape: Tape, grad_out: np.ndarray) -> Grads:
        """Backpropagate ``grad_out`` (gradient w.r.t. the output) through
        the recorded forward pass."""
        if tape is None or tape.consumed:
            raise GradientError("backward requires a recorded, unconsumed forward tape")
        tape.consumed = True
        pending = {self.output: np.asarray(grad_out)}
        grads = Grads()
        for node in reversed(self.nodes):
            g = pending.pop(node.name, None)
            if g is None:
                continue
            input_grads, dw, db = node.layer.backward(g, tape.caches[node.name])
            if dw is not None:
                if node.name in grads.params:
                    sw, sb = grads.params[node.name]
                    grads.params[node.name] = (sw + dw, sb + db)
                else:
                    grads.params[node.name] = (dw, db)
            for src, ig in zip(node.inputs, input_grads):
                if src in pending:
                    pending[src] = pending[src] + ig
                else:
                    pending[src] = ig
        for name in tape.feed_names:
            if name in pending:
                grads.inputs[name] = pending[name]
        return grads

    def _normalize_feeds(self, feeds):
        if isinstance(feeds, dict):
            missing = [n for n in self.input_names if n not in feeds]
            if missing:
                raise ShapeError(f"missing graph inputs: {missing}")
            return {n: np.asarray(feeds[n]) for n in self.input_names}
        if isinstance(feeds, np.ndarray):
            feeds = [feeds]
        if len(feeds) != len(self.input_names):
            raise ShapeError(
                f"expected {len(self.input_names)} inputs, got {len(feeds)}")
        return {n: np.asarray(x) for n, x in zip(self.input_names, feeds)}

    # -- copies --------------------------------------------------------------

    def copy(self) -> "Network":
        return self.astype(None)

    def astype(self, dtype) -> "Network":
        """Deep copy; with a dtype, parameters are cast (used for float64
        gradient checks)."""
        nodes = []
        for n in self.nodes:
            w = None if n.layer.weight is None else (
                n.layer.weight.copy() if dtype is None else n.layer.weight.astype(dtype))
            b = None if n.layer.bias is None else (
                n.layer.bias.copy() if dtype is None else n.layer.bias.astype(dtype))
            nodes.append(Node(n.name, Layer(n.layer.kind, n.layer.name, w, b,
                                            dict(n.layer.hyper)), list(n.inputs)))
        return Network(self.input_names, nodes, self.output)

    def params_equal(self, other: "Network") -> bool:
        for a, b in zip(self.param_nodes(), other.param_nodes()):
            if not np.array_equal(a.layer.weight, b.layer.weight):
                return False
            if not np.array_equal(a.layer.bias, b.layer.bias):
                return False
        return True


class GraphBuilder:
    """Functional-style builder: each method adds a node and returns its name."""

    def __init__(self, rng=None, dtype=np.float32):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = dtype
        self.input_names = []
        self.nodes = []
        self._counts = {}

    def _name(self, kind):
        i = self._counts.get(kind, 0)
        self._counts[kind] = i + 1
        return f"{kind}{i}"

    def input(self, name="image"):
        self.input_names.append(name)
        return name

    def conv(self, src, in_ch, out_ch, kernel=3, stride=1, pad=None, name=None,
             zero_init=False):
        name = name or self._name("conv")
        layer = make_conv(name, in_ch, out_ch, kernel, stride, pad,
                          rng=self.rng, dtype=self.dtype, zero_init=zero_init)
        self.nodes.append(Node(name, layer, [src]))
        return name

    def relu(self, src, name=None):
        name = name or self._name("relu")
        self.nodes.append(Node(name, Layer("relu", name), [src]))
        return name

    def maxpool(self, src, name=None):
        name = name or self._name("pool")
        self.nodes.append(Node(name, Layer("maxpool2", name), [src]))
        return name

    def upsample(self, src, name=None):
        name = name or self._name("up")
        self.nodes.append(Node(name, Layer("upsample2", name), [src]))
        return name

    def concat(self, srcs, name=None):
        name = name or self._name("concat")
        self.nodes.append(Node(name, Layer("concat", name), list(srcs)))
        return name

    def linear(self, src, in_features, out_features, name=None):
        name = name or self._name("linear")
        layer = make_linear(name, in_features, out_features, rng=self.rng,
                            dtype=self.dtype)
        self.nodes.append(Node(name, layer, [src]))
        return name

    def build(self, output) -> Network:
        return Network(self.input_names, self.nodes, output)


class SGD:
    """Plain SGD with optional momentum; velocity is kept per node."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, net: Network, grads: Grads):
        for name, (dw, db) in grads.params.items():
            if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
                raise GradientError(f"non-finite gradient for node {name!r}; step rejected")
        for node in net.param_nodes():
            if node.name not in grads.params:
                continue
            dw, db = grads.params[node.name]
            if dw.shape != node.layer.weight.shape:
                raise GradientError(
                    f"gradient shape {dw.shape} != weight shape "
                    f"{node.layer.weight.shape} for node {node.name!r}")
            if self.momentum > 0.0:
                vw, vb = self.velocity.get(node.name, (0.0, 0.0))
                vw = self.momentum * vw - self.lr * dw
                vb = self.momentum * vb - self.lr * db
                self.velocity[node.name] = (vw, vb)
                node.layer.weight += vw.astype(node.layer.weight.dtype, copy=False)
                node.layer.bias += vb.astype(node.layer.bias.dtype, copy=False)
            else:
                node.layer.weight -= (self.lr * dw).astype(node.layer.weight.dtype, copy=False)
                node.layer.bias -= (self.lr * db).astype(node.layer.bias.dtype, copy=False)


def sgd_step(net: Network, grads: Grads, lr: float, momentum: float = 0.0,
             optimizer: SGD = None) -> SGD:
    """Single update step; returns the optimizer carrying momentum state."""
    if optimizer is None:
        optimizer = SGD(lr, momentum)
    optimizer.step(net, grads)
    return optimizer
