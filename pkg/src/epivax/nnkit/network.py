"""Dense feedforward networks evaluated either eagerly (numpy) or on the graph."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

HIDDEN_ACTIVATIONS = ("tanh", "sigmoid")
OUTPUT_ACTIVATIONS = ("tanh", "sigmoid", "identity", "affine-bounded")


@dataclass
class DenseNetwork:
    """Fully connected network; layer ``k`` maps ``sizes[k]`` to ``sizes[k+1]``.

    Weights are stored as ``(out, in)`` matrices and inputs are row vectors,
    so a batch ``x`` of shape ``(B, in)`` maps to ``x @ W.T + b``.
    """

    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden: str = "tanh"
    output: str = "identity"
    bounds: tuple[float, float] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.hidden not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden!r}")
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output!r}")
        if self.output == "affine-bounded":
            if self.bounds is None or self.bounds[0] > self.bounds[1]:
                raise ValueError("affine-bounded output needs bounds lo <= hi")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[k + 1], self.sizes[k]) or b.shape != (self.sizes[k + 1],):
                raise ad.ShapeError(f"layer {k}: weight {w.shape}, bias {b.shape} for sizes {self.sizes}")

    @classmethod
    def init(
        cls,
        sizes: list[int],
        rng: np.random.Generator,
        hidden: str = "tanh",
        output: str = "identity",
        bounds: tuple[float, float] | None = None,
        zero_last: bool = False,
    ) -> "DenseNetwork":
        """Glorot-uniform weights, zero biases."""
        if any(s < 1 for s in sizes) or len(sizes) < 2:
            raise ValueError(f"bad layer sizes {sizes}")
        weights, biases = [], []
        for k in range(len(sizes) - 1):
            fan_in, fan_out = sizes[k], sizes[k + 1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            if zero_last and k == len(sizes) - 2:
                w = np.zeros_like(w)
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(list(sizes), weights, biases, hidden, output, bounds)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params: list[np.ndarray]) -> "DenseNetwork":
        return DenseNetwork(
            list(self.sizes),
            [np.array(p) for p in params[0::2]],
            [np.array(p) for p in params[1::2]],
            self.hidden,
            self.output,
            self.bounds,
        )

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x.value if isinstance(x, ad.Node) else x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ad.ShapeError(f"input has {x.shape[-1]} features, network expects {self.sizes[0]}")
        return x

    def _out_np(self, z):
        if self.output == "tanh":
            return np.tanh(z)
        if self.output == "sigmoid":
            return ad.sigmoid_value(z)
        if self.output == "affine-bounded":
            lo, hi = self.bounds
            return lo + (hi - lo) * ad.sigmoid_value(z)
        return z

    def __call__(self, x) -> np.ndarray:
        """Eager forward pass."""
        h = self._check_input(x)
        act = np.tanh if self.hidden == "tanh" else ad.sigmoid_value
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = act(z) if k < self.n_layers - 1 else self._out_np(z)
        return h

    def parameter_nodes(self) -> list[ad.Node]:
        return [ad.parameter(p) for p in self.params()]

    def forward(self, x, params: list[ad.Node] | None = None) -> ad.Node:
        """Forward pass recorded on the graph.

        ``params`` are the parameter nodes to differentiate against; fresh
        ones are created when omitted (reach them via ``out.parents``).
        """
        self._check_input(x)
        params = params if params is not None else self.parameter_nodes()
        h = ad.as_node(x)
        act = ad.tanh if self.hidden == "tanh" else ad.sigmoid
        for k in range(self.n_layers):
            w, b = params[2 * k], params[2 * k + 1]
            z = ad.matmul(h, _transpose(w)) + b
            h = act(z) if k < self.n_layers - 1 else self._out_graph(z)
        return h

    def _out_graph(self, z: ad.Node) -> ad.Node:
        if self.output == "tanh":
            return ad.tanh(z)
        if self.output == "sigmoid":
            return ad.sigmoid(z)
        if self.output == "affine-bounded":
            lo, hi = self.bounds
            return lo + (hi - lo) * ad.sigmoid(z)
        return z

    def forward_fused(self, x, params: list[ad.Node] | None = None) -> ad.Node:
        """Same value as :meth:`forward`, recorded as a single graph node.

        The reverse pass is hand-written layer by layer, which keeps graphs of
        many small networks (one per control step) cheap to build.
        """
        self._check_input(x)
        params = params if params is not None else self.parameter_nodes()
        x = ad.as_node(x)
        ws = [params[2 * k].value for k in range(self.n_layers)]
        bs = [params[2 * k + 1].value for k in range(self.n_layers)]
        hs = [x.value]
        for k in range(self.n_layers):
            z = hs[-1] @ ws[k].T + bs[k]
            hs.append((np.tanh(z) if self.hidden == "tanh" else ad.sigmoid_value(z))
                      if k < self.n_layers - 1 else self._out_np(z))
        out = hs[-1]
        cache = {}

        def grads(g):
            if "v" in cache:
                return cache["v"]
            res = [None] * (2 * self.n_layers + 1)
            for k in reversed(range(self.n_layers)):
                h = hs[k + 1]
                kind = self.output if k == self.n_layers - 1 else self.hidden
                if kind == "tanh":
                    dz = g * (1.0 - h * h)
                elif kind == "sigmoid":
                    dz = g * h * (1.0 - h)
                elif kind == "affine-bounded":
                    lo, hi = self.bounds
                    s = (h - lo) / (hi - lo) if hi > lo else np.full_like(h, 0.5)
                    dz = g * (hi - lo) * s * (1.0 - s)
                else:
                    dz = g
                res[2 * k] = dz.reshape(-1, dz.shape[-1]).T @ hs[k].reshape(-1, hs[k].shape[-1])
                res[2 * k + 1] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
                g = dz @ ws[k]
            res[-1] = g
            cache["v"] = res
            return res

        parents = []
        for i, pn in enumerate(params[: 2 * self.n_layers]):
            if pn.op != "constant" or pn.parents:
                parents.append((pn, lambda g, i=i: grads(g)[i]))
        if x.op != "constant" or x.parents:
            parents.append((x, lambda g: grads(g)[-1]))
        return ad.Node(out, tuple(parents), "mlp")

    def forward_tangent(self, x, dx, params: list[ad.Node] | None = None) -> tuple[ad.Node, ad.Node]:
        """Outputs and their directional derivative along ``dx``.

        The tangent is propagated with graph ops, so both results can be
        differentiated with respect to the parameters in one reverse sweep.
        """
        self._check_input(x)
        params = params if params is not None else self.parameter_nodes()
        h = ad.as_node(x)
        dh = ad.as_node(np.broadcast_to(np.asarray(dx, dtype=np.float64), h.shape))
        for k in range(self.n_layers):
            w, b = params[2 * k], params[2 * k + 1]
            wt = _transpose(w)
            z = ad.matmul(h, wt) + b
            dz = ad.matmul(dh, wt)
            last = k == self.n_layers - 1
            kind = self.output if last else self.hidden
            if kind == "tanh":
                h = ad.tanh(z)
                dh = dz * (1.0 - ad.square(h))
            elif kind in ("sigmoid", "affine-bounded"):
                s = ad.sigmoid(z)
                ds = dz * s * (1.0 - s)
                if kind == "affine-bounded":
                    lo, hi = self.bounds
                    h, dh = lo + (hi - lo) * s, (hi - lo) * ds
                else:
                    h, dh = s, ds
            else:
                h, dh = z, dz
        return h, dh

    def to_dict(self) -> dict:
        acts = [self.hidden] * (self.n_layers - 1) + [self.output]
        doc = {
            "sizes": list(self.sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "activations": acts,
        }
        if self.bounds is not None:
            doc["bounds"] = list(self.bounds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DenseNetwork":
        acts = doc["activations"]
        hidden = acts[0] if len(acts) > 1 else "tanh"
        bounds = tuple(doc["bounds"]) if "bounds" in doc else None
        return cls(
            list(doc["sizes"]),
            [np.asarray(w, dtype=np.float64).reshape(doc["sizes"][k + 1], doc["sizes"][k]) for k, w in enumerate(doc["weights"])],
            [np.asarray(b, dtype=np.float64) for b in doc["biases"]],
            hidden,
            acts[-1],
            bounds,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DenseNetwork":
        return cls.from_dict(json.loads(text))


def _transpose(w: ad.Node) -> ad.Node:
    wv = w.value
    return ad.Node(wv.T, ((w, lambda g: g.T),), "transpose")
