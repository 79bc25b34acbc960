"""Seeded multi-hop toy tasks with exact labels, plus brute-force solvers.

Every sample draws from its own generator seeded by ``(seed, split, index)``,
so a dataset is a pure function of its spec. The vocabulary is split into
filler words, entity words (which become graph entities), decoy content
words and two polarity groups used by the classification task.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import (AnnotatedCorpus, RelationalGraph, Sentence, build_sentence_graph,
                    serialize_graphs)

KINDS = ("bridge-span", "support-chain", "graph-class")
SPLITS = {"train": 0, "dev": 1}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "bridge-span"
    num_nodes: int = 10
    min_len: int = 4
    max_len: int = 12
    vocab_size: int = 200
    hops: int = 2
    relations: int = 3
    seed: int = 17
    train_size: int = 800
    dev_size: int = 200
    same_doc_prob: float = 0.5
    max_doc_size: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"kind must be one of {KINDS}")
        if self.hops < 1:
            raise SpecError("hop count must be >= 1")
        if self.min_len < 2 or self.max_len < self.min_len:
            raise SpecError("need 2 <= min_len <= max_len")
        if self.relations not in (1, 2, 3):
            raise SpecError("relations must be 1, 2 or 3")
        if self.train_size < 0 or self.dev_size < 0:
            raise SpecError("split sizes must be >= 0")
        if not 0.0 <= self.same_doc_prob <= 1.0:
            raise SpecError("same_doc_prob must lie in [0, 1]")
        if self.max_doc_size < 1:
            raise SpecError("max_doc_size must be >= 1")
        chain = self.chain_length
        if self.num_nodes < chain:
            raise SpecError(f"{self.num_nodes} nodes cannot hold a chain of {chain}")
        v = self.vocab
        if self.kind != "graph-class" and len(v.entities) < 2 * self.num_nodes:
            raise SpecError(f"vocabulary {self.vocab_size} too small for distinct bridge entities")
        if len(v.decoys) < self.num_nodes:
            raise SpecError(f"vocabulary {self.vocab_size} too small for distinct decoy words")
        if self.kind == "graph-class" and len(v.entities) < 4:
            raise SpecError("vocabulary too small for claim entities")

    @property
    def chain_length(self) -> int:
        return self.hops if self.kind == "bridge-span" else self.hops + 1

    @property
    def vocab(self) -> "Vocab":
        return Vocab.split(self.vocab_size)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TaskSpec":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for k, raw in values.items():
            if k not in kinds:
                raise SpecError(f"unknown spec key {k!r}")
            try:
                kw[k] = {"int": int, "float": float}.get(kinds[k], str)(raw)
            except ValueError:
                raise SpecError(f"bad value for {k}: {raw!r}") from None
        return cls(**kw)


@dataclass(frozen=True)
class Vocab:
    filler: range
    entities: range
    decoys: range
    positive: range
    negative: range

    @classmethod
    def split(cls, size: int) -> "Vocab":
        if size < 40:
            raise SpecError(f"vocabulary of {size} is too small (need >= 40)")
        q = size // 10
        pol = max(2, size // 40)
        # 40% filler, 40% entities, remainder decoy and polarity words
        f_end = 4 * q
        e_end = f_end + 4 * q
        c_end = size - 2 * pol
        return cls(range(0, f_end), range(f_end, e_end), range(e_end, c_end),
                   range(c_end, c_end + pol), range(c_end + pol, size))


def entity_name(token: int) -> str:
    return f"ent{token}"


def _place(rng, length: int, special: list[int], filler: range) -> list[int]:
    toks = [int(t) for t in rng.choice(filler, size=length)]
    slots = rng.choice(length, size=len(special), replace=False)
    for s, t in zip(slots, special):
        toks[int(s)] = int(t)
    return toks


def _length(rng, spec: TaskSpec, at_least: int) -> int:
    return int(rng.integers(max(spec.min_len, at_least), max(spec.max_len, at_least) + 1))


def _documents(rng, spec: TaskSpec, paths: list[list[int]]) -> list[list[int]]:
    """Group node indices into shuffled documents.

    Consecutive nodes of a path share a document with ``same_doc_prob``;
    such a link is then visible only through the same-document relation.
    Documents from different paths are also merged at random, so a
    document can hold sentences that share no entity.
    """
    docs: list[list[int]] = []
    for path in paths:
        cur = [path[0]]
        for a in path[1:]:
            if rng.random() < spec.same_doc_prob and len(cur) < spec.max_doc_size:
                cur.append(a)
            else:
                docs.append(cur)
                cur = [a]
        docs.append(cur)
    rng.shuffle(docs)
    merged: list[list[int]] = []
    for d in docs:
        roomy = [m for m in merged if len(m) + len(d) <= spec.max_doc_size]
        if roomy and rng.random() < 0.5:
            roomy[int(rng.integers(len(roomy)))].extend(d)
        else:
            merged.append(list(d))
    for d in merged:
        rng.shuffle(d)
    rng.shuffle(merged)
    return merged


def _assemble(nodes, docs, q_tokens, q_ents, sup=None):
    """Lay nodes out document by document; returns (corpus, old->new id map)."""
    order = [k for d in docs for k in d]
    new_id = {old: new for new, old in enumerate(order)}
    documents = tuple(
        tuple(Sentence(tuple(nodes[k][0]), frozenset(nodes[k][1]),
                       None if sup is None else int(k in sup)) for k in d)
        for d in docs)
    corpus = AnnotatedCorpus(documents, tuple(q_tokens), frozenset(q_ents))
    return corpus, new_id


def _reduce_relations(g: RelationalGraph, r: int) -> RelationalGraph:
    if r == 3:
        return g
    same, shared, qent = g.relations
    cross = frozenset(shared | qent)
    rels = (frozenset(same | cross),) if r == 1 else (same, cross)
    return RelationalGraph(g.nodes, rels, g.question, g.answer, g.label)


def _question(rng, v: Vocab, entities: list[int]) -> list[int]:
    length = int(rng.integers(3, 7))
    return _place(rng, max(length, len(entities) + 1), entities, v.filler)


def _paths(rng, n: int, first: int, longest: int) -> list[list[int]]:
    """Split nodes 0..n-1 into paths; the first path has ``first`` nodes or more."""
    lengths = [min(n, first + int(rng.integers(0, 3)))]
    while sum(lengths) < n:
        lengths.append(min(int(rng.integers(1, longest + 1)), n - sum(lengths)))
    out, k = [], 0
    for m in lengths:
        out.append(list(range(k, k + m)))
        k += m
    return out


def _chain_sample(spec: TaskSpec, rng: np.random.Generator, with_answer: bool):
    """Nodes lie on entity paths: consecutive path nodes share one entity and
    every node mentions exactly two, plus one decoy word. The question names
    the first entity of path 0; its first ``chain_length`` nodes are the chain.
    The answer is the bridge entity of the last chain node: the one it shares
    with its predecessor (with the question, for a single hop). Path 0 may
    run on past the chain, so the hop count, not a dead end, marks the answer."""
    v = spec.vocab
    n, h = spec.num_nodes, spec.chain_length
    paths = _paths(rng, n, h, h + 2)
    ents = iter(int(e) for e in rng.choice(v.entities, size=n + len(paths), replace=False))
    node_ents: list[list[int]] = [[] for _ in range(n)]
    starts = []
    for path in paths:
        cur = next(ents)
        starts.append(cur)
        for k in path:
            nxt = next(ents)
            node_ents[k] = [cur, nxt]
            cur = nxt
    decoys = [int(c) for c in rng.choice(v.decoys, size=n, replace=False)]
    nodes = []
    answer_pos = None
    for k in range(n):
        special = [*node_ents[k], decoys[k]]
        toks = _place(rng, _length(rng, spec, len(special) + 1), special, v.filler)
        if with_answer and k == h - 1:
            answer_pos = toks.index(node_ents[k][0])
        nodes.append((toks, [entity_name(e) for e in node_ents[k]]))
    chain = list(range(h))
    docs = _documents(rng, spec, paths)
    q = _question(rng, v, [starts[0]])
    corpus, new_id = _assemble(nodes, docs, q, [entity_name(starts[0])], set(chain))
    answer = (new_id[h - 1], answer_pos, answer_pos) if with_answer else None
    g = build_sentence_graph(corpus, answer=answer)
    return _reduce_relations(g, spec.relations)


def gen_bridge_span(spec: TaskSpec, split: str = "train") -> list[RelationalGraph]:
    """Answer = the incoming bridge entity of the last node of a bridge chain."""
    _need(spec, "bridge-span")
    return [_chain_sample(spec, _rng(spec, split, i), True) for i in range(_size(spec, split))]


def gen_support_chain(spec: TaskSpec, split: str = "train") -> list[RelationalGraph]:
    """Supporting labels only; the chain has hops + 1 nodes."""
    _need(spec, "support-chain")
    return [_chain_sample(spec, _rng(spec, split, i), False) for i in range(_size(spec, split))]


def _class_sample(spec: TaskSpec, rng: np.random.Generator, label: int) -> RelationalGraph:
    v = spec.vocab
    n = spec.num_nodes
    claim, *others = [int(e) for e in rng.choice(v.entities, size=4, replace=False)]
    n_ev = int(rng.integers(1, min(3, n) + 1))
    nodes = []
    for k in range(n):
        if k < n_ev and label != 2:
            ent = claim
            pol_range = v.positive if label == 0 else v.negative
        else:
            ent = others[int(rng.integers(len(others)))]
            pol_range = v.positive if rng.random() < 0.5 else v.negative
        pol = int(rng.choice(pol_range))
        toks = _place(rng, _length(rng, spec, 3), [ent, pol], v.filler)
        nodes.append((toks, [entity_name(ent)]))
    docs = _documents(rng, spec, [[k] for k in range(n)])
    q = _question(rng, v, [claim])
    corpus, _ = _assemble(nodes, docs, q, [entity_name(claim)])
    g = build_sentence_graph(corpus, label=label)
    return _reduce_relations(g, spec.relations)


def gen_graph_class(spec: TaskSpec, split: str = "train") -> list[RelationalGraph]:
    """Class 0: every claim mention is positive; 1: every one negative;
    2: the claim entity is never mentioned. Classes are balanced."""
    _need(spec, "graph-class")
    size = _size(spec, split)
    labels = np.arange(size) % 3
    np.random.default_rng([spec.seed, SPLITS[split], 2**31]).shuffle(labels)
    return [_class_sample(spec, _rng(spec, split, i), int(labels[i])) for i in range(size)]


GENERATORS = {"bridge-span": gen_bridge_span, "support-chain": gen_support_chain,
              "graph-class": gen_graph_class}


def generate(spec: TaskSpec, split: str) -> list[RelationalGraph]:
    return GENERATORS[spec.kind](spec, split)


def _need(spec, kind):
    if spec.kind != kind:
        raise SpecError(f"spec is for {spec.kind}, not {kind}")


def _rng(spec: TaskSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, SPLITS[split], index])


def _size(spec, split):
    if split not in SPLITS:
        raise SpecError(f"split must be one of {tuple(SPLITS)}")
    return spec.train_size if split == "train" else spec.dev_size


# ------------------------------------------------------------------ oracles

def follow_chain(g: RelationalGraph, vocab: Vocab, length: int) -> list[int]:
    """Greedy chain of ``length`` nodes: start at the node holding a question
    entity, then hop to the unvisited node sharing an entity not yet used.
    Stops early if a hop is missing or ambiguous."""
    ents = set(vocab.entities)
    node_ents = [{t for t in n.tokens if t in ents} for n in g.nodes]
    frontier = {t for t in g.question if t in ents}
    used: set[int] = set()
    chain: list[int] = []
    while len(chain) < length:
        hits = [i for i, e in enumerate(node_ents) if i not in chain and e & frontier]
        if len(hits) != 1:
            break
        i = hits[0]
        chain.append(i)
        used |= frontier
        frontier = node_ents[i] - used
    return chain


def bridge_oracle(g: RelationalGraph, spec: TaskSpec) -> tuple[tuple[int, int], frozenset[int]]:
    """(global answer span, supporting set) recovered from tokens alone."""
    vocab = spec.vocab
    chain = follow_chain(g, vocab, spec.chain_length)
    last = chain[-1]
    ents = set(vocab.entities)
    if len(chain) > 1:
        incoming = set(g.nodes[chain[-2]].tokens) & set(g.nodes[last].tokens)
    else:
        incoming = set(g.question)
    pos = next(t for t, tok in enumerate(g.nodes[last].tokens) if tok in ents and tok in incoming)
    start = g.offsets()[last] + pos
    return (start, start), frozenset(chain)


def chain_oracle(g: RelationalGraph, spec: TaskSpec) -> frozenset[int]:
    return frozenset(follow_chain(g, spec.vocab, spec.chain_length))


def class_oracle(g: RelationalGraph, vocab: Vocab) -> int:
    claim = {t for t in g.question if t in vocab.entities}
    pols = []
    for n in g.nodes:
        if claim & set(n.tokens):
            pols.append(any(t in vocab.positive for t in n.tokens))
    if not pols:
        return 2
    return 0 if all(pols) else 1


# ------------------------------------------------------------------ writing

def write_dataset(spec: TaskSpec, out_dir) -> dict:
    """Write ``train.gsn``, ``dev.gsn`` and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in SPLITS:
        graphs = generate(spec, split)
        _atomic_write(out / f"{split}.gsn", serialize_graphs(graphs))
        counts[split] = len(graphs)
    manifest = {"kind": spec.kind, "seed": spec.seed, "counts": counts,
                "spec": dataclasses.asdict(spec),
                "files": {s: f"{s}.gsn" for s in SPLITS}}
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
