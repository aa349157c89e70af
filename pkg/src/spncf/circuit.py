"""Gaussian-leaf sum-product networks over latent vectors.

A circuit is an immutable graph of :class:`SumNode`, :class:`ProductNode` and
:class:`GaussianLeaf` records addressed by integer ids.  When the root is a sum
node its children are read as per-class sub-circuits and its weights as class
priors, so the same object serves as density model and classifier.

All inference happens in natural-log space.  Evaluation is batched: every node
holds one value per row of the input, which keeps per-row results independent
of batch composition.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

SIGMA_FLOOR = 1e-3
FORMAT_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


class CircuitError(Exception):
    """Base class for circuit failures."""


class StructuralError(CircuitError):
    """Raised when the graph itself is malformed (dangling or unknown ids)."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class InvalidCircuitError(CircuitError):
    def __init__(self, report: "ValidationReport"):
        failed = ", ".join(
            f"{name} (nodes {list(res.offenders)})" for name, res in report.failures().items()
        )
        super().__init__(f"circuit failed validation: {failed}")
        self.report = report


class EvidenceError(CircuitError, ValueError):
    """Raised for malformed or non-finite query inputs."""


@dataclass(frozen=True)
class GaussianLeaf:
    variable: int
    mean: float
    stddev: float


@dataclass(frozen=True)
class SumNode:
    children: tuple[int, ...]
    weights: tuple[float, ...]


@dataclass(frozen=True)
class ProductNode:
    children: tuple[int, ...]


Node = Union[GaussianLeaf, SumNode, ProductNode]


class _Marginalized:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "MARGINALIZED"


MARGINALIZED = _Marginalized()


@dataclass(frozen=True)
class LogMarginal:
    """Gradient target: log p(z)."""


@dataclass(frozen=True)
class LogPosterior:
    """Gradient target: log p(y = cls | z)."""

    cls: int


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    offenders: tuple[int, ...] = ()


@dataclass
class ValidationReport:
    checks: dict[str, CheckResult] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failures(self) -> dict[str, CheckResult]:
        return {k: v for k, v in self.checks.items() if not v.passed}

    def __getitem__(self, name: str) -> CheckResult:
        return self.checks[name]


CHECKS = (
    "acyclic",
    "complete",
    "decomposable",
    "weights_normalized",
    "scope_covers_all_variables",
    "leaf_parameters",
)


@dataclass(frozen=True)
class RawCircuit:
    """An unvalidated node list; what :func:`validate` inspects."""

    nodes: tuple[Node, ...]
    root: int
    dimension: int


def _children(node: Node) -> tuple[int, ...]:
    return () if isinstance(node, GaussianLeaf) else node.children


def _check_references(nodes: Sequence[Node], root: int) -> None:
    n = len(nodes)
    if not 0 <= root < n:
        raise StructuralError(f"root id {root} does not name a node", root)
    for i, node in enumerate(nodes):
        if not isinstance(node, (GaussianLeaf, SumNode, ProductNode)):
            raise StructuralError(f"node {i} has unknown kind {type(node).__name__}", i)
        for c in _children(node):
            if not 0 <= c < n:
                raise StructuralError(f"node {i} references missing child {c}", i)


def _find_cycle(nodes: Sequence[Node], root: int) -> tuple[int, ...]:
    """Nodes on the first cycle reachable from ``root`` (empty if none)."""
    WHITE, GREY, BLACK = 0, 1, 2
    color = [WHITE] * len(nodes)
    path: list[int] = []
    stack: list[tuple[int, Iterable[int]]] = [(root, iter(_children(nodes[root])))]
    color[root] = GREY
    path.append(root)
    while stack:
        node, it = stack[-1]
        advanced = False
        for c in it:
            if color[c] == GREY:
                return tuple(sorted(path[path.index(c):]))
            if color[c] == WHITE:
                color[c] = GREY
                path.append(c)
                stack.append((c, iter(_children(nodes[c]))))
                advanced = True
                break
        if not advanced:
            color[node] = BLACK
            path.pop()
            stack.pop()
    return ()


def _topological_order(nodes: Sequence[Node], root: int) -> list[int]:
    """Post-order over nodes reachable from ``root``; assumes acyclicity."""
    order: list[int] = []
    seen = set()
    stack: list[tuple[int, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node in seen:
            continue
        seen.add(node)
        stack.append((node, True))
        for c in reversed(_children(nodes[node])):
            if c not in seen:
                stack.append((c, False))
    return order


def _compute_scopes(nodes: Sequence[Node], order: Sequence[int]) -> dict[int, frozenset[int]]:
    scopes: dict[int, frozenset[int]] = {}
    for i in order:
        node = nodes[i]
        if isinstance(node, GaussianLeaf):
            scopes[i] = frozenset((node.variable,))
        else:
            scopes[i] = frozenset().union(*(scopes[c] for c in node.children))
    return scopes


def validate(circuit: "RawCircuit | Circuit") -> ValidationReport:
    """Run every structural check and report offending node ids per check.

    Raises :class:`StructuralError` for references that do not resolve, since no
    other check is meaningful on such a graph.
    """
    nodes, root, dim = circuit.nodes, circuit.root, circuit.dimension
    _check_references(nodes, root)
    report = ValidationReport()

    cycle = _find_cycle(nodes, root)
    report.checks["acyclic"] = CheckResult(not cycle, cycle)

    bad_weights = []
    bad_leaves = []
    for i, node in enumerate(nodes):
        if isinstance(node, SumNode):
            w = np.asarray(node.weights, dtype=float)
            if (
                len(node.children) == 0
                or len(w) != len(node.children)
                or not np.all(np.isfinite(w))
                or np.any(w < 0)
                or abs(w.sum() - 1.0) > 1e-9
            ):
                bad_weights.append(i)
        elif isinstance(node, ProductNode):
            if len(node.children) == 0:
                bad_weights.append(i)
        else:
            if (
                not 0 <= node.variable < dim
                or not math.isfinite(node.mean)
                or not math.isfinite(node.stddev)
                or node.stddev < SIGMA_FLOOR
            ):
                bad_leaves.append(i)
    report.checks["weights_normalized"] = CheckResult(not bad_weights, tuple(bad_weights))
    report.checks["leaf_parameters"] = CheckResult(not bad_leaves, tuple(bad_leaves))

    if cycle:
        # scopes are undefined on a cyclic graph
        for name in ("complete", "decomposable", "scope_covers_all_variables"):
            report.checks[name] = CheckResult(False, cycle)
        return report

    order = _topological_order(nodes, root)
    scopes = _compute_scopes(nodes, order)
    incomplete, overlapping = [], []
    for i in order:
        node = nodes[i]
        if isinstance(node, SumNode):
            first = scopes[node.children[0]]
            if any(scopes[c] != first for c in node.children[1:]):
                incomplete.append(i)
        elif isinstance(node, ProductNode):
            seen: set[int] = set()
            total = 0
            for c in node.children:
                seen |= scopes[c]
                total += len(scopes[c])
            if total != len(seen):
                overlapping.append(i)
    report.checks["complete"] = CheckResult(not incomplete, tuple(incomplete))
    report.checks["decomposable"] = CheckResult(not overlapping, tuple(overlapping))
    covers = scopes[root] == frozenset(range(dim)) and dim >= 1
    report.checks["scope_covers_all_variables"] = CheckResult(covers, () if covers else (root,))
    return report


# --------------------------------------------------------------------------
# the circuit


@dataclass(frozen=True)
class _Layer:
    """Same-height inner nodes of one kind, evaluated with segment reductions."""

    ids: np.ndarray
    flat: np.ndarray
    starts: np.ndarray
    seg: np.ndarray
    logw: np.ndarray | None
    unique_children: bool

    @classmethod
    def build(cls, nodes: Sequence[Node], ids: list[int], with_weights: bool) -> "_Layer":
        children = [nodes[i].children for i in ids]
        counts = np.array([len(c) for c in children], dtype=np.intp)
        flat = np.concatenate([np.asarray(c, dtype=np.intp) for c in children])
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp)
        logw = None
        if with_weights:
            with np.errstate(divide="ignore"):
                logw = np.log(np.concatenate(
                    [np.asarray(nodes[i].weights, dtype=float) for i in ids]))[:, None]
        return cls(np.asarray(ids, dtype=np.intp), flat, starts,
                   np.repeat(np.arange(len(ids)), counts), logw,
                   len(np.unique(flat)) == len(flat))

    def forward(self, vals: np.ndarray) -> None:
        if self.logw is None:
            vals[self.ids] = np.add.reduceat(vals[self.flat], self.starts, axis=0)
            return
        a = self.logw + vals[self.flat]
        m = np.maximum.reduceat(a, self.starts, axis=0)
        safe = np.where(np.isfinite(m), m, 0.0)
        total = np.add.reduceat(np.exp(a - safe[self.seg]), self.starts, axis=0)
        with np.errstate(divide="ignore"):
            vals[self.ids] = safe + np.log(total)

    def backward(self, vals: np.ndarray, adj: np.ndarray) -> None:
        upstream = adj[self.ids][self.seg]
        if self.logw is not None:
            upstream = upstream * np.exp(self.logw + vals[self.flat] - vals[self.ids][self.seg])
        if self.unique_children:
            adj[self.flat] += upstream
        else:
            np.add.at(adj, self.flat, upstream)


def _logsumexp0(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.sum(np.exp(a - safe), axis=0))


class Circuit:
    """Validated, immutable sum-product network.

    Construction refuses graphs that fail :func:`validate`.  If the root is a
    sum node its children are the per-class sub-circuits and its weights the
    class priors; otherwise the circuit is a single-class model.
    """

    def __init__(self, nodes: Sequence[Node], root: int, dimension: int):
        nodes = tuple(_freeze(n) for n in nodes)
        raw = RawCircuit(nodes, int(root), int(dimension))
        report = validate(raw)
        if not report.ok:
            raise InvalidCircuitError(report)
        self._nodes = nodes
        self._root = int(root)
        self._dimension = int(dimension)
        self._order = tuple(_topological_order(nodes, self._root))
        self._scopes = _compute_scopes(nodes, self._order)
        self._compile()

    def _compile(self) -> None:
        nodes = self._nodes
        leaves = [i for i in self._order if isinstance(nodes[i], GaussianLeaf)]
        self._leaf_ids = np.array(leaves, dtype=np.intp)
        self._leaf_vars = np.array([nodes[i].variable for i in leaves], dtype=np.intp)
        self._leaf_means = np.array([nodes[i].mean for i in leaves], dtype=float)
        self._leaf_stds = np.array([nodes[i].stddev for i in leaves], dtype=float)
        self._leaf_log_norm = -np.log(self._leaf_stds) - 0.5 * _LOG_2PI
        # group inner nodes by height so each level is a handful of segment ops
        height: dict[int, int] = {}
        levels: dict[int, tuple[list[int], list[int]]] = {}
        for i in self._order:
            node = nodes[i]
            if isinstance(node, GaussianLeaf):
                height[i] = 0
                continue
            height[i] = 1 + max(height[c] for c in node.children)
            sums, prods = levels.setdefault(height[i], ([], []))
            (sums if isinstance(node, SumNode) else prods).append(i)
        layers = []
        for h in sorted(levels):
            sums, prods = levels[h]
            if prods:
                layers.append(_Layer.build(nodes, prods, with_weights=False))
            if sums:
                layers.append(_Layer.build(nodes, sums, with_weights=True))
        self._layers = tuple(layers)
        root = nodes[self._root]
        if isinstance(root, SumNode):
            self._class_children = tuple(root.children)
            self._class_priors = tuple(float(w) for w in root.weights)
        else:
            self._class_children = (self._root,)
            self._class_priors = (1.0,)
        with np.errstate(divide="ignore"):
            self._log_priors = np.log(np.asarray(self._class_priors))

    # -- structure -------------------------------------------------------

    @property
    def nodes(self) -> tuple[Node, ...]:
        return self._nodes

    @property
    def root(self) -> int:
        return self._root

    @property
    def dimension(self) -> int:
        return self._dimension

    @property
    def class_children(self) -> tuple[int, ...]:
        return self._class_children

    @property
    def class_priors(self) -> tuple[float, ...]:
        return self._class_priors

    @property
    def num_classes(self) -> int:
        return len(self._class_children)

    def __len__(self) -> int:
        return len(self._nodes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Circuit):
            return NotImplemented
        return (self._nodes, self._root, self._dimension) == (
            other._nodes, other._root, other._dimension)

    def scope(self, node: int) -> frozenset[int]:
        try:
            return self._scopes[node]
        except KeyError:
            raise StructuralError(f"node {node} is not part of this circuit", node) from None

    # -- batched evaluation ---------------------------------------------

    def _check_batch(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[None, :]
        if z.ndim != 2 or z.shape[1] != self._dimension:
            raise EvidenceError(
                f"expected latent vectors of length {self._dimension}, got shape {z.shape}")
        return z

    def forward(self, z: np.ndarray, observed: np.ndarray | None = None) -> np.ndarray:
        """Log-value of every node for each row of ``z``; shape (num_nodes, batch).

        ``observed`` is an optional boolean mask over variables; unobserved
        variables are marginalized (their leaves contribute log 1).
        Nodes not reachable from the root are left at 0.
        """
        z = self._check_batch(z)
        if observed is None:
            if not np.all(np.isfinite(z)):
                raise EvidenceError("latent input contains non-finite values")
            observed = np.ones(self._dimension, dtype=bool)
        vals = np.zeros((len(self._nodes), z.shape[0]))
        x = z[:, self._leaf_vars].T
        dev = (x - self._leaf_means[:, None]) / self._leaf_stds[:, None]
        leaf_vals = self._leaf_log_norm[:, None] - 0.5 * dev * dev
        leaf_vals[~observed[self._leaf_vars]] = 0.0
        vals[self._leaf_ids] = leaf_vals
        for layer in self._layers:
            layer.forward(vals)
        return vals

    def backward(self, z: np.ndarray, vals: np.ndarray, seeds: np.ndarray,
                 observed: np.ndarray | None = None) -> np.ndarray:
        """Reverse pass: given adjoints ``seeds`` (d out / d log-value per node),
        return d out / d z with shape (batch, dimension)."""
        z = self._check_batch(z)
        adj = np.array(seeds, dtype=float, copy=True)
        for layer in reversed(self._layers):
            layer.backward(vals, adj)
        x = z[:, self._leaf_vars].T
        score = (self._leaf_means[:, None] - x) / (self._leaf_stds[:, None] ** 2)
        contrib = adj[self._leaf_ids] * score
        if observed is not None:
            contrib[~observed[self._leaf_vars]] = 0.0
        grad_t = np.zeros((self._dimension, z.shape[0]))
        np.add.at(grad_t, self._leaf_vars, contrib)
        return grad_t.T

    def log_marginal_batch(self, z: np.ndarray) -> np.ndarray:
        return self.forward(z)[self._root]

    def class_log_joint_batch(self, z: np.ndarray) -> np.ndarray:
        """log p(z, y=k) per row and class; shape (batch, num_classes)."""
        vals = self.forward(z)
        return self.log_joint_from(vals)

    def log_joint_from(self, vals: np.ndarray) -> np.ndarray:
        """Per-class log joints from a :meth:`forward` result; shape (batch, classes)."""
        if self._class_children == (self._root,):
            return vals[self._root][:, None]
        return (self._log_priors[:, None] + vals[list(self._class_children)]).T

    def class_posterior_batch(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        log_joint = self.class_log_joint_batch(z)
        log_post = log_joint - _logsumexp0(log_joint.T)[:, None]
        return np.exp(log_post), log_joint

    def predict(self, z: np.ndarray) -> np.ndarray:
        """Class argmax per row; ties go to the smaller class index."""
        log_joint = self.class_log_joint_batch(z)
        return np.argmax(log_joint, axis=1)

    def value_and_grad(self, z: np.ndarray, target: LogMarginal | LogPosterior
                       ) -> tuple[np.ndarray, np.ndarray]:
        """Per-row value of ``target`` and its gradient with respect to ``z``."""
        z = self._check_batch(z)
        vals = self.forward(z)
        seeds = np.zeros_like(vals)
        if isinstance(target, LogMarginal):
            seeds[self._root] = 1.0
            value = vals[self._root]
        elif isinstance(target, LogPosterior):
            k = target.cls
            if not 0 <= k < self.num_classes:
                raise EvidenceError(f"class index {k} out of range [0, {self.num_classes})")
            child = self._class_children[k]
            seeds[child] += 1.0
            seeds[self._root] -= 1.0
            value = self.log_joint_from(vals)[:, k] - vals[self._root]
        else:
            raise TypeError(f"unknown gradient target {target!r}")
        return value, self.backward(z, vals, seeds)

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        out = []
        for i, node in enumerate(self._nodes):
            if isinstance(node, GaussianLeaf):
                out.append({"id": i, "kind": "leaf", "variable": node.variable,
                            "mean": node.mean, "stddev": node.stddev})
            elif isinstance(node, SumNode):
                out.append({"id": i, "kind": "sum", "children": list(node.children),
                            "weights": list(node.weights)})
            else:
                out.append({"id": i, "kind": "product", "children": list(node.children)})
        return {
            "version": FORMAT_VERSION,
            "dimension": self._dimension,
            "class_priors": list(self._class_priors),
            "root": self._root,
            "nodes": out,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Circuit":
        if doc.get("version") != FORMAT_VERSION:
            raise StructuralError(f"unsupported circuit format version {doc.get('version')!r}")
        entries = sorted(doc["nodes"], key=lambda e: e["id"])
        if [e["id"] for e in entries] != list(range(len(entries))):
            raise StructuralError("node ids must be contiguous from 0")
        nodes: list[Node] = []
        for e in entries:
            kind = e["kind"]
            if kind == "leaf":
                nodes.append(GaussianLeaf(int(e["variable"]), float(e["mean"]), float(e["stddev"])))
            elif kind == "sum":
                nodes.append(SumNode(tuple(int(c) for c in e["children"]),
                                     tuple(float(w) for w in e["weights"])))
            elif kind == "product":
                nodes.append(ProductNode(tuple(int(c) for c in e["children"])))
            else:
                raise StructuralError(f"node {e['id']} has unknown kind {kind!r}", e["id"])
        circuit = cls(nodes, doc["root"], doc["dimension"])
        priors = doc.get("class_priors")
        if priors is not None and tuple(float(p) for p in priors) != circuit.class_priors:
            raise StructuralError("class_priors disagree with the root weights")
        return circuit

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Circuit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _freeze(node: Node) -> Node:
    if isinstance(node, SumNode):
        return SumNode(tuple(int(c) for c in node.children), tuple(float(w) for w in node.weights))
    if isinstance(node, ProductNode):
        return ProductNode(tuple(int(c) for c in node.children))
    if isinstance(node, GaussianLeaf):
        return GaussianLeaf(int(node.variable), float(node.mean), float(node.stddev))
    return node


class CircuitBuilder:
    """Append-only node collector; ``build`` validates and freezes."""

    def __init__(self, dimension: int):
        self.dimension = dimension
        self.nodes: list[Node] = []

    def _add(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, variable: int, mean: float, stddev: float) -> int:
        return self._add(GaussianLeaf(int(variable), float(mean), float(stddev)))

    def sum(self, children: Sequence[int], weights: Sequence[float]) -> int:
        return self._add(SumNode(tuple(children), tuple(float(w) for w in weights)))

    def product(self, children: Sequence[int]) -> int:
        return self._add(ProductNode(tuple(children)))

    def raw(self, root: int) -> RawCircuit:
        return RawCircuit(tuple(self.nodes), root, self.dimension)

    def build(self, root: int) -> Circuit:
        return Circuit(self.nodes, root, self.dimension)


# --------------------------------------------------------------------------
# single-query convenience API


def _evidence_arrays(circuit: Circuit, evidence) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(evidence, np.ndarray) and evidence.dtype != object:
        values = evidence.astype(float)
        if values.shape != (circuit.dimension,):
            raise EvidenceError(f"evidence must have length {circuit.dimension}")
        if not np.all(np.isfinite(values)):
            raise EvidenceError("assigned evidence values must be finite")
        return values, np.ones(circuit.dimension, dtype=bool)
    evidence = list(evidence)
    if len(evidence) != circuit.dimension:
        raise EvidenceError(f"evidence must have length {circuit.dimension}, got {len(evidence)}")
    observed = np.array([v is not MARGINALIZED for v in evidence], dtype=bool)
    values = np.array([0.0 if v is MARGINALIZED else float(v) for v in evidence])
    if not np.all(np.isfinite(values[observed])):
        raise EvidenceError("assigned evidence values must be finite")
    return values, observed


def log_density(circuit: Circuit, evidence) -> float:
    """Log density of the assigned variables with the rest marginalized."""
    values, observed = _evidence_arrays(circuit, evidence)
    return float(circuit.forward(values[None, :], observed)[circuit.root, 0])


def scope(circuit: Circuit, node: int) -> frozenset[int]:
    return circuit.scope(node)


def class_posterior(circuit: Circuit, z) -> tuple[np.ndarray, np.ndarray]:
    """Posterior over classes at ``z`` and the per-class log joints."""
    post, log_joint = circuit.class_posterior_batch(_vector(circuit, z))
    return post[0], log_joint[0]


def log_marginal(circuit: Circuit, z) -> float:
    return float(circuit.log_marginal_batch(_vector(circuit, z))[0])


def grad_z(circuit: Circuit, z, target: LogMarginal | LogPosterior) -> np.ndarray:
    return circuit.value_and_grad(_vector(circuit, z), target)[1][0]


def _vector(circuit: Circuit, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (circuit.dimension,):
        raise EvidenceError(f"expected a vector of length {circuit.dimension}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise EvidenceError("latent input contains non-finite values")
    return z[None, :]
