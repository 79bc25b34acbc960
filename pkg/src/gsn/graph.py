"""Sequence-node multi-relational graphs and their text interchange format."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

HEADER = "gsn-graph v1"
SAME_DOC, SHARED_ENTITY, QUESTION_ENTITY = 0, 1, 2


class GraphValidationError(ValueError):
    pass


class GraphParseError(ValueError):
    def __init__(self, line_no: int, field_name: str, msg: str):
        super().__init__(f"line {line_no}: {field_name}: {msg}")
        self.line_no = line_no
        self.field = field_name


@dataclass(frozen=True, eq=False)
class SequenceNode:
    node_id: int
    tokens: tuple[int, ...] | None = None
    features: np.ndarray | None = None  # T x D
    doc_id: int | None = None
    sup: int | None = None

    def __post_init__(self):
        if self.tokens is not None:
            object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.features is not None:
            f = np.array(self.features, dtype=np.float64)
            if f.ndim != 2:
                raise GraphValidationError(f"node {self.node_id}: features must be T x D")
            f.flags.writeable = False
            object.__setattr__(self, "features", f)
        if self.tokens is None and self.features is None:
            raise GraphValidationError(f"node {self.node_id}: needs tokens or features")
        if self.length < 1:
            raise GraphValidationError(f"node {self.node_id}: sequence length must be >= 1")
        if (self.tokens is not None and self.features is not None
                and len(self.tokens) != self.features.shape[0]):
            raise GraphValidationError(
                f"node {self.node_id}: token count {len(self.tokens)} != feature rows "
                f"{self.features.shape[0]}")
        if self.sup not in (None, 0, 1):
            raise GraphValidationError(f"node {self.node_id}: sup label must be 0 or 1")

    @property
    def length(self) -> int:
        if self.features is not None:
            return self.features.shape[0]
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SequenceNode):
            return NotImplemented
        same_feats = (
            (self.features is None and other.features is None)
            or (self.features is not None and other.features is not None
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))
        )
        return (self.node_id == other.node_id and self.tokens == other.tokens
                and self.doc_id == other.doc_id and self.sup == other.sup and same_feats)


def _norm_edge(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True, eq=False)
class RelationalGraph:
    """Nodes plus R undirected edge sets.

    Node ids must equal positions (0..N-1). Edges are stored as ``(i, j)``
    with ``i < j``; self-loops are rejected because every layer adds the
    node itself to its neighborhood.
    """

    nodes: tuple[SequenceNode, ...]
    relations: tuple[frozenset, ...]
    question: tuple[int, ...] | None = None
    answer: tuple[int, int, int] | None = None  # (node, start, end), local indices
    label: int | None = None
    _nbrs: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        seen = set()
        for pos, n in enumerate(nodes):
            if n.node_id in seen:
                raise GraphValidationError(f"duplicate node id {n.node_id}")
            seen.add(n.node_id)
            if n.node_id != pos:
                raise GraphValidationError(
                    f"node ids must be 0..N-1 in order; position {pos} holds id {n.node_id}")
        dims = {n.dim for n in nodes if n.features is not None}
        if len(dims) > 1:
            raise GraphValidationError(f"nodes disagree on feature dimension: {sorted(dims)}")
        if not self.relations:
            raise GraphValidationError("a graph needs at least one relation")
        rels = []
        for r, edges in enumerate(self.relations):
            norm = set()
            for i, j in edges:
                i, j = int(i), int(j)
                if i == j:
                    raise GraphValidationError(f"relation {r}: self-loop on node {i}")
                if not (0 <= i < len(nodes) and 0 <= j < len(nodes)):
                    raise GraphValidationError(f"relation {r}: edge ({i}, {j}) references a missing node")
                norm.add(_norm_edge(i, j))
            rels.append(frozenset(norm))
        object.__setattr__(self, "relations", tuple(rels))
        if self.question is not None:
            object.__setattr__(self, "question", tuple(int(t) for t in self.question))
            if not self.question:
                raise GraphValidationError("question must not be empty")
        if self.answer is not None:
            node, s, e = (int(x) for x in self.answer)
            if not 0 <= node < len(nodes):
                raise GraphValidationError(f"answer node {node} does not exist")
            if not 0 <= s <= e < nodes[node].length:
                raise GraphValidationError(f"answer span ({s}, {e}) outside node {node}")
            object.__setattr__(self, "answer", (node, s, e))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def dim(self) -> int:
        return max((n.dim for n in self.nodes), default=0)

    @property
    def lengths(self) -> list[int]:
        return [n.length for n in self.nodes]

    def offsets(self) -> list[int]:
        """Start of each node in the concatenated token sequence."""
        return [0] + list(itertools.accumulate(self.lengths))

    def answer_global(self) -> tuple[int, int] | None:
        if self.answer is None:
            return None
        node, s, e = self.answer
        off = self.offsets()[node]
        return off + s, off + e

    def supporting(self) -> frozenset[int] | None:
        if any(n.sup is None for n in self.nodes):
            return None
        return frozenset(n.node_id for n in self.nodes if n.sup == 1)

    def neighbors(self, r: int) -> list[list[int]]:
        if r in self._nbrs:
            return self._nbrs[r]
        out = neighbor_sets(self, r)
        self._nbrs[r] = out
        return out

    def __eq__(self, other):
        if not isinstance(other, RelationalGraph):
            return NotImplemented
        return (self.nodes == other.nodes and self.relations == other.relations
                and self.question == other.question and self.answer == other.answer
                and self.label == other.label)


def neighbor_sets(g: RelationalGraph, r: int) -> list[list[int]]:
    if not 0 <= r < g.num_relations:
        raise IndexError(f"relation {r} out of range (graph has {g.num_relations})")
    nbrs: list[set[int]] = [set() for _ in g.nodes]
    for i, j in g.relations[r]:
        nbrs[i].add(j)
        nbrs[j].add(i)
    return [sorted(s) for s in nbrs]


# ------------------------------------------------------------ sentence graphs

def normalize_entity(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[int, ...]
    entities: frozenset[str] = frozenset()
    sup: int | None = None


@dataclass(frozen=True)
class AnnotatedCorpus:
    """Documents of sentences, each tagged with its NE/NP strings."""

    documents: tuple[tuple[Sentence, ...], ...]
    question_tokens: tuple[int, ...] = ()
    question_entities: frozenset[str] = frozenset()


def _normalized(entities: Iterable[str], where: str) -> frozenset[str]:
    out = set()
    for e in entities:
        n = normalize_entity(e)
        if not n:
            raise GraphValidationError(f"{where}: empty entity after normalization")
        out.add(n)
    return frozenset(out)


def build_sentence_graph(corpus: AnnotatedCorpus, answer=None, label=None) -> RelationalGraph:
    """Connect sentences under three relations.

    0: same document; 1: different documents sharing an entity;
    2: different documents, both mentioning a question entity.
    A pair may be linked under several relations.
    """
    sents, docs = [], []
    for d, doc in enumerate(corpus.documents):
        for s in doc:
            sents.append(s)
            docs.append(d)
    if not sents:
        raise ValueError("build_sentence_graph: corpus has no sentences")
    ents = [_normalized(s.entities, f"sentence {k}") for k, s in enumerate(sents)]
    q_ents = _normalized(corpus.question_entities, "question")
    hits_q = [bool(e & q_ents) for e in ents]
    rel = (set(), set(), set())
    for i, j in itertools.combinations(range(len(sents)), 2):
        if docs[i] == docs[j]:
            rel[SAME_DOC].add((i, j))
            continue
        if ents[i] & ents[j]:
            rel[SHARED_ENTITY].add((i, j))
        if hits_q[i] and hits_q[j]:
            rel[QUESTION_ENTITY].add((i, j))
    nodes = tuple(SequenceNode(k, tokens=s.tokens, doc_id=docs[k], sup=s.sup)
                  for k, s in enumerate(sents))
    return RelationalGraph(nodes, tuple(frozenset(r) for r in rel),
                           question=tuple(corpus.question_tokens) or None,
                           answer=answer, label=label)


# ------------------------------------------------------------------ text I/O

def serialize_graph(g: RelationalGraph) -> str:
    lines = [f"{HEADER} nodes={g.num_nodes} relations={g.num_relations} dim={g.dim}"]
    if g.question is not None:
        lines.append("question: " + " ".join(map(str, g.question)))
    for n in g.nodes:
        head = f"node {n.node_id} len={n.length}"
        if n.doc_id is not None:
            head += f" doc={n.doc_id}"
        if n.sup is not None:
            head += f" sup={n.sup}"
        lines.append(head)
        if n.tokens is not None:
            lines.append("tokens: " + " ".join(map(str, n.tokens)))
        if n.features is not None:
            lines.extend(" ".join(repr(float(x)) for x in row) for row in n.features)
    for r, edges in enumerate(g.relations):
        lines.append(f"relation {r}")
        lines.extend(f"edge {i} {j}" for i, j in sorted(edges))
    if g.answer is not None:
        lines.append("answer {} {} {}".format(*g.answer))
    if g.label is not None:
        lines.append(f"class {g.label}")
    return "\n".join(lines) + "\n"


def _kv(parts: list[str], line_no: int) -> dict[str, str]:
    out = {}
    for p in parts:
        if "=" not in p:
            raise GraphParseError(line_no, p, "expected key=value")
        k, v = p.split("=", 1)
        out[k] = v
    return out


def _int(text: str, line_no: int, name: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise GraphParseError(line_no, name, f"not an integer: {text!r}") from None


def _ints(text: str, line_no: int, name: str) -> tuple[int, ...]:
    return tuple(_int(t, line_no, name) for t in text.split())


def parse_graph(text: str) -> RelationalGraph:
    graphs = parse_graphs(text)
    if len(graphs) != 1:
        raise GraphParseError(1, "header", f"expected one graph, found {len(graphs)}")
    return graphs[0]


def parse_graphs(text: str) -> list[RelationalGraph]:
    """Parse one or more concatenated graph documents."""
    lines = text.splitlines()
    graphs, i = [], 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        g, i = _parse_one(lines, i)
        graphs.append(g)
    return graphs


def _parse_one(lines: list[str], i: int) -> tuple[RelationalGraph, int]:
    line_no = i + 1
    if not lines[i].startswith(HEADER + " "):
        raise GraphParseError(line_no, "header", f"expected '{HEADER} ...'")
    hdr = _kv(lines[i][len(HEADER):].split(), line_no)
    for key in ("nodes", "relations", "dim"):
        if key not in hdr:
            raise GraphParseError(line_no, key, "missing from header")
    n_nodes = _int(hdr["nodes"], line_no, "nodes")
    n_rel = _int(hdr["relations"], line_no, "relations")
    dim = _int(hdr["dim"], line_no, "dim")
    i += 1
    nodes, relations = [], [set() for _ in range(max(n_rel, 0))]
    question = answer = label = None
    current_rel = None
    while i < len(lines) and not lines[i].startswith(HEADER):
        line, line_no = lines[i].strip(), i + 1
        i += 1
        if not line:
            continue
        if line.startswith("question:"):
            question = _ints(line[len("question:"):], line_no, "question")
        elif line.startswith("node "):
            parts = line.split()
            node_id = _int(parts[1], line_no, "node")
            kv = _kv(parts[2:], line_no)
            if "len" not in kv:
                raise GraphParseError(line_no, "len", "missing")
            length = _int(kv["len"], line_no, "len")
            doc = _int(kv["doc"], line_no, "doc") if "doc" in kv else None
            sup = _int(kv["sup"], line_no, "sup") if "sup" in kv else None
            tokens = None
            if i < len(lines) and lines[i].startswith("tokens:"):
                tokens = _ints(lines[i][len("tokens:"):], i + 1, "tokens")
                if len(tokens) != length:
                    raise GraphParseError(i + 1, "tokens", f"expected {length} ids, got {len(tokens)}")
                i += 1
            feats = None
            if dim > 0:
                rows = []
                for _ in range(length):
                    if i >= len(lines):
                        raise GraphParseError(i, "features", "unexpected end of input")
                    try:
                        row = [float(x) for x in lines[i].split()]
                    except ValueError:
                        raise GraphParseError(i + 1, "features", "not a number") from None
                    if len(row) != dim:
                        raise GraphParseError(i + 1, "features", f"expected {dim} values, got {len(row)}")
                    rows.append(row)
                    i += 1
                feats = np.array(rows)
            if tokens is None and feats is None:
                raise GraphParseError(line_no, "node", "needs a tokens line or features")
            try:
                nodes.append(SequenceNode(node_id, tokens, feats, doc, sup))
            except GraphValidationError as exc:
                raise GraphParseError(line_no, "node", str(exc)) from None
        elif line.startswith("relation "):
            current_rel = _int(line.split()[1], line_no, "relation")
            if not 0 <= current_rel < n_rel:
                raise GraphParseError(line_no, "relation", f"id {current_rel} out of range")
        elif line.startswith("edge "):
            if current_rel is None:
                raise GraphParseError(line_no, "edge", "edge before any relation line")
            parts = line.split()
            if len(parts) != 3:
                raise GraphParseError(line_no, "edge", "expected 'edge <i> <j>'")
            a, b = _int(parts[1], line_no, "edge"), _int(parts[2], line_no, "edge")
            relations[current_rel].add(_norm_edge(a, b))
        elif line.startswith("answer "):
            vals = _ints(line[len("answer "):], line_no, "answer")
            if len(vals) != 3:
                raise GraphParseError(line_no, "answer", "expected node start end")
            answer = vals
        elif line.startswith("class "):
            label = _int(line.split()[1], line_no, "class")
        else:
            raise GraphParseError(line_no, "record", f"unrecognized line {line!r}")
    if len(nodes) != n_nodes:
        raise GraphParseError(line_no, "nodes", f"header says {n_nodes}, found {len(nodes)}")
    g = RelationalGraph(tuple(nodes), tuple(frozenset(r) for r in relations),
                        question=question, answer=answer, label=label)
    return g, i


def serialize_graphs(graphs: Sequence[RelationalGraph]) -> str:
    return "".join(serialize_graph(g) for g in graphs)
