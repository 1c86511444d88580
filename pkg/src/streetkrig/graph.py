"""Adjacency construction, transition matrices, Chebyshev diffusion and
connectivity measures for street-segment graphs."""

from __future__ import annotations

import csv
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor
from .errors import NodeReferenceError, ParameterError, ParseError

KINDS = ("binary", "distance", "similarity", "custom")


@dataclass
class Graph:
    node_ids: list
    W: np.ndarray
    kind: str = "custom"
    directed: bool = False

    def __post_init__(self):
        self.node_ids = list(self.node_ids)
        self.W = np.asarray(self.W, dtype=np.float64)
        n = len(self.node_ids)
        if self.W.shape != (n, n):
            raise ParameterError(f"adjacency shape {self.W.shape} does not match {n} node ids")
        if len(set(self.node_ids)) != n:
            raise ParameterError("node ids must be unique")
        if np.any(self.W < 0) or not np.isfinite(self.W).all():
            raise ParameterError("adjacency weights must be finite and non-negative")
        if self.kind not in KINDS:
            raise ParameterError(f"unknown graph kind {self.kind!r}")

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def index_of(self, ids: Iterable) -> list[int]:
        lookup = {nid: i for i, nid in enumerate(self.node_ids)}
        out = []
        for nid in ids:
            if nid not in lookup:
                raise NodeReferenceError(f"unknown node id {nid!r}")
            out.append(lookup[nid])
        return out


@dataclass
class TransitionPair:
    Wf: np.ndarray
    Wb: np.ndarray


def build_binary(edges: Iterable[tuple], nodes: Sequence) -> Graph:
    """Undirected 0/1 adjacency; an edge listed in either direction counts once."""
    nodes = list(nodes)
    lookup = {nid: i for i, nid in enumerate(nodes)}
    W = np.zeros((len(nodes), len(nodes)))
    for a, b in edges:
        if a not in lookup:
            raise NodeReferenceError(f"edge endpoint {a!r} is not a declared node")
        if b not in lookup:
            raise NodeReferenceError(f"edge endpoint {b!r} is not a declared node")
        i, j = lookup[a], lookup[b]
        if i == j:
            continue
        W[i, j] = W[j, i] = 1.0
    return Graph(nodes, W, kind="binary")


def default_sigma(dist: np.ndarray) -> float:
    d = np.asarray(dist, dtype=np.float64)
    off = d[~np.eye(d.shape[0], dtype=bool)]
    off = off[np.isfinite(off)]
    sigma = float(off.std()) if off.size else 0.0
    return sigma if sigma > 0 else 1.0


def build_distance(dist, sigma: float | None = None, nodes: Sequence | None = None) -> Graph:
    """Gaussian kernel ``exp(-(d/sigma)^2)``; ``sigma`` defaults to the std of pairwise distances."""
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ParameterError(f"distance matrix must be square, got {d.shape}")
    if np.any(d < 0) or np.isnan(d).any():
        raise ParameterError("distances must be non-negative")
    if sigma is None:
        sigma = default_sigma(d)
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    W = np.exp(-((d / sigma) ** 2))
    nodes = list(nodes) if nodes is not None else list(range(d.shape[0]))
    return Graph(nodes, W, kind="distance", directed=not np.allclose(d, d.T))


def build_similarity(infra, nodes: Sequence | None = None) -> Graph:
    """Cosine similarity of time-invariant feature rows, clamped to [0, 1]."""
    X = np.asarray(infra, dtype=np.float64)
    if X.ndim != 2:
        raise ParameterError(f"infrastructure features must be 2-D, got {X.shape}")
    norms = np.linalg.norm(X, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} node(s) have all-zero infrastructure features; similarities set to 0")
    safe = np.where(zero, 1.0, norms)
    U = X / safe[:, None]
    W = np.clip(U @ U.T, 0.0, 1.0)
    W[zero, :] = 0.0
    W[:, zero] = 0.0
    nodes = list(nodes) if nodes is not None else list(range(X.shape[0]))
    return Graph(nodes, W, kind="similarity")


def _row_normalize(A: np.ndarray) -> np.ndarray:
    rows = A.sum(axis=1)
    out = np.divide(A, rows[:, None], out=np.zeros_like(A), where=rows[:, None] > 0)
    dead = rows <= 0
    out[dead, dead] = 1.0
    return out


def transitions(g: Graph | np.ndarray) -> TransitionPair:
    W = g.W if isinstance(g, Graph) else np.asarray(g, dtype=np.float64)
    return TransitionPair(_row_normalize(W), _row_normalize(W.T))


def chebyshev_apply(M, H, K: int) -> list[Tensor]:
    """Return ``[T_1(M)H, ..., T_K(M)H]`` with ``T_1 = M``, ``T_2 = 2M^2 - I``."""
    if K < 1:
        raise ParameterError(f"Chebyshev order must be >= 1, got {K}")
    M = as_tensor(M)
    H = as_tensor(H)
    out = [M @ H]
    if K >= 2:
        out.append(2.0 * (M @ out[0]) - H)
    for _ in range(2, K):
        out.append(2.0 * (M @ out[-1]) - out[-2])
    return out


def _bfs(adj: list[list[int]], s: int):
    n = len(adj)
    dist = [-1] * n
    sigma = [0] * n
    preds: list[list[int]] = [[] for _ in range(n)]
    order = []
    dist[s], sigma[s] = 0, 1
    q = deque([s])
    while q:
        v = q.popleft()
        order.append(v)
        for w in adj[v]:
            if dist[w] < 0:
                dist[w] = dist[v] + 1
                q.append(w)
            if dist[w] == dist[v] + 1:
                sigma[w] += sigma[v]
                preds[w].append(v)
    return dist, sigma, preds, order


def connectivity(g: Graph) -> dict[str, np.ndarray]:
    """Degree, betweenness (unnormalised, unordered pairs), closeness and clustering."""
    A = (np.asarray(g.W) > 0).astype(np.int64)
    np.fill_diagonal(A, 0)
    A = np.maximum(A, A.T)
    n = A.shape[0]
    adj = [list(np.flatnonzero(A[i])) for i in range(n)]
    degree = A.sum(axis=1).astype(float)

    betweenness = np.zeros(n)
    closeness = np.zeros(n)
    for s in range(n):
        dist, sigma, preds, order = _bfs(adj, s)
        delta = [0.0] * n
        for w in reversed(order):
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                betweenness[w] += delta[w]
        reach = [d for i, d in enumerate(dist) if d > 0 and i != s]
        if reach and n > 1:
            closeness[s] = 1.0 / (sum(reach) / (n - 1))
    betweenness /= 2.0  # each unordered pair counted from both endpoints

    triangles = np.diag(A @ A @ A) / 2.0
    denom = degree * (degree - 1)
    clustering = np.divide(2.0 * triangles, denom, out=np.zeros(n), where=degree >= 2)
    return {"degree": degree, "betweenness": betweenness, "closeness": closeness, "clustering": clustering}


def subgraph(g: Graph, ids: Sequence) -> Graph:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ParameterError("subgraph ids contain duplicates")
    idx = g.index_of(ids)
    return Graph(ids, g.W[np.ix_(idx, idx)], kind=g.kind, directed=g.directed)


def grid_graph(rows: int, cols: int, node_ids: Sequence | None = None) -> Graph:
    ids = list(node_ids) if node_ids is not None else list(range(rows * cols))
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((ids[i], ids[i + 1]))
            if r + 1 < rows:
                edges.append((ids[i], ids[i + cols]))
    return build_binary(edges, ids)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def read_edge_list(path) -> tuple[list, list[tuple]]:
    """Parse ``src,dst[,weight]`` lines.  A non-numeric third column on the
    first line, or the literal ``src`` header, marks a header row."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and row[0].strip().lower() in ("src", "source", "from"):
                continue
            if len(row) < 2:
                raise ParseError(f"{path}:{lineno}: expected src,dst[,weight]")
            w = 1.0
            if len(row) > 2 and row[2].strip():
                try:
                    w = float(row[2])
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: weight {row[2]!r} is not numeric") from None
            rows.append((row[0].strip(), row[1].strip(), w))
    nodes = list(dict.fromkeys([r[0] for r in rows] + [r[1] for r in rows]))
    return nodes, rows


def write_edge_list(g: Graph, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "weight"])
        for i, j in zip(*np.nonzero(g.W)):
            if g.kind == "binary" and j < i:
                continue
            w.writerow([g.node_ids[i], g.node_ids[j], repr(float(g.W[i, j]))])


def load_graph(path, nodes: Sequence, kind: str = "binary") -> Graph:
    """Read an edge list against a declared node order."""
    _, rows = read_edge_list(path)
    nodes = [str(n) for n in nodes]
    if kind == "binary":
        return build_binary([(a, b) for a, b, _ in rows], nodes)
    lookup = {nid: i for i, nid in enumerate(nodes)}
    W = np.zeros((len(nodes), len(nodes)))
    for a, b, w in rows:
        for nid in (a, b):
            if nid not in lookup:
                raise NodeReferenceError(f"edge endpoint {nid!r} is not a declared node")
        W[lookup[a], lookup[b]] = w
    return Graph(nodes, W, kind=kind, directed=not np.allclose(W, W.T))


def read_node_matrix(path, nodes: Sequence | None = None, square: bool = False) -> tuple[list, np.ndarray]:
    """CSV with ``node_id`` first column and numeric remaining columns.

    When ``nodes`` is given, rows (and columns too, for a ``square`` distance
    matrix) are reordered to match it.
    """
    ids, vals = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            ids.append(row[0].strip())
            try:
                vals.append([float(v) for v in row[1:]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric cell") from None
    M = np.asarray(vals, dtype=np.float64)
    if nodes is not None:
        lookup = {nid: i for i, nid in enumerate(ids)}
        missing = [nid for nid in map(str, nodes) if nid not in lookup]
        if missing:
            raise NodeReferenceError(f"{path}: no row for node(s) {missing[:10]}")
        order = [lookup[str(nid)] for nid in nodes]
        M = M[order]
        if square:
            M = M[:, order]
        ids = [str(n) for n in nodes]
    return ids, M
