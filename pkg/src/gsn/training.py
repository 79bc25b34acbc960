"""Model assembly, deterministic training, evaluation and checkpoints."""
from __future__ import annotations

import configparser
import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .coattention import CoattnParams, coattn_group
from .graph import RelationalGraph
from .heads import (NodeHeadParams, Prediction, ReadoutParams, SpanParams, graph_head,
                    graph_loss, joint_loss, metrics, node_head, node_loss, span_head, span_loss)
from .layers import (AttentivePoolParams, ConfigError, GcnLayerParams, GsnLayerParams,
                     gcn_layer_matrix, gsn_stack_forward, summarize_node)
from .tensor import NumericError, Tape, Tensor, add, add_row, concat_rows, matmul, repeat_rows, slice_rows, take_rows

TASKS = ("span-only", "sup-only", "joint", "graph-class")
MAGIC = b"GSNCKPT1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 17
    dim: int = 16
    layers: int = 2
    combiner: str = "max"
    relations: int = 3
    activation: str = "relu"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    lam: float = 0.5
    task: str = "span-only"
    baseline: str = "none"
    self_inclusive: bool = True
    vocab_size: int = 200
    num_classes: int = 3
    window: int = 30
    summarizer: str = "attentive"
    gcn_width: int = 0  # 0 picks the width that parameter-matches the GSN layers

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("dim", "layers", "relations", "epochs", "vocab_size", "window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment decays must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.combiner not in ("max", "mean"):
            raise ConfigError("combiner must be max or mean")
        if self.baseline not in ("none", "gcn"):
            raise ConfigError("baseline must be none or gcn")
        if self.activation not in ("relu", "identity"):
            raise ConfigError("activation must be relu or identity")
        if self.summarizer not in ("mean", "max", "attentive"):
            raise ConfigError("summarizer must be mean, max or attentive")
        if self.task == "graph-class" and self.num_classes < 2:
            raise ConfigError("graph classification needs num_classes >= 2")
        if self.gcn_width < 0:
            raise ConfigError("gcn_width must be >= 0")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kind = kinds[key]
            try:
                if kind in ("bool", bool):
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    kwargs[key] = raw.lower() in ("true", "1", "yes")
                elif kind in ("int", int):
                    kwargs[key] = int(raw)
                elif kind in ("float", float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(parse_kv(text))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines with ``#`` comments."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",))
    try:
        cp.read_string("[root]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return dict(cp["root"])


# ------------------------------------------------------------------- model

def _uniform(rng, shape):
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-bound, bound, shape), True)


def gsn_weight_count(dim: int, relations: int, layers: int = 1) -> int:
    return layers * relations * (3 * dim + 4 * dim * dim)


def matched_gcn_width(cfg: TrainConfig) -> int:
    """Width whose GCN stack (in/out projections, summarizer, layers) best
    matches the GSN layers' weight count."""
    target = gsn_weight_count(cfg.dim, cfg.relations, cfg.layers)
    pool = cfg.dim * cfg.dim + cfg.dim if cfg.summarizer == "attentive" else 0

    def count(w):
        return 2 * cfg.dim * w + cfg.layers * cfg.relations * w * w + pool

    return min(range(1, 8 * cfg.dim + 1), key=lambda w: (abs(count(w) - target), w))


def init_params(cfg: TrainConfig, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """All trainable tensors, created in a fixed order from one seeded stream.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)); biases are zero.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    D = cfg.dim
    params: dict[str, Tensor] = {}

    def put(prefix, mapping):
        for k, v in mapping.items():
            params[f"{prefix}.{k}"] = v

    params["embed"] = _uniform(rng, (cfg.vocab_size, D))
    put("reader", CoattnParams.init(D, rng, cfg.activation).tensors())
    if cfg.baseline == "none":
        for k in range(cfg.layers):
            for r in range(cfg.relations):
                put(f"gsn.{k}.rel{r}", CoattnParams.init(D, rng, cfg.activation).tensors())
    else:
        W = cfg.gcn_width or matched_gcn_width(cfg)
        if cfg.summarizer == "attentive":
            put("gcn.pool", AttentivePoolParams.init(D, rng).tensors())
        params["gcn.in_w"] = _uniform(rng, (D, W))
        params["gcn.in_b"] = Tensor(np.zeros((1, W)), True)
        for k in range(cfg.layers):
            layer = GcnLayerParams.init(W, cfg.relations, rng, cfg.activation, cfg.self_inclusive)
            for r in range(cfg.relations):
                params[f"gcn.{k}.rel{r}.w"] = layer.proj_w[r]
                params[f"gcn.{k}.rel{r}.b"] = layer.proj_b[r]
        params["gcn.out_w"] = _uniform(rng, (W, D))
        params["gcn.out_b"] = Tensor(np.zeros((1, D)), True)
    if cfg.task in ("span-only", "joint"):
        put("span", SpanParams.init(D, rng).tensors())
    if cfg.task in ("sup-only", "joint"):
        put("sup", NodeHeadParams.init(D, rng).tensors())
    if cfg.task == "graph-class":
        put("cls", ReadoutParams.init(D, cfg.num_classes, rng).tensors())
    for name, t in params.items():
        t.name = name
    return params


@dataclass
class ModelOutput:
    states: list[Tensor]
    span: object = None
    nodes: object = None
    graph: object = None


class Model:
    """GSN (or early-summarization GCN) encoder plus the task's heads."""

    def __init__(self, cfg: TrainConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        p = params

        def coattn(prefix):
            return CoattnParams(p[f"{prefix}.proj_i_w"], p[f"{prefix}.proj_i_b"],
                                p[f"{prefix}.proj_o_w"], p[f"{prefix}.proj_o_b"], cfg.activation)

        self.reader = coattn("reader")
        if cfg.baseline == "none":
            self.gsn_layers = [
                GsnLayerParams([coattn(f"gsn.{k}.rel{r}") for r in range(cfg.relations)], cfg.combiner)
                for k in range(cfg.layers)]
        else:
            self.gcn_pool = (AttentivePoolParams(p["gcn.pool.W"], p["gcn.pool.u"])
                             if cfg.summarizer == "attentive" else None)
            self.gcn_layers = [
                GcnLayerParams([p[f"gcn.{k}.rel{r}.w"] for r in range(cfg.relations)],
                               [p[f"gcn.{k}.rel{r}.b"] for r in range(cfg.relations)],
                               cfg.activation, cfg.self_inclusive)
                for k in range(cfg.layers)]
        if "span.start_w" in p:
            self.span = SpanParams(p["span.start_w"], p["span.start_b"], p["span.end_w"], p["span.end_b"])
        if "sup.w" in p:
            self.sup = NodeHeadParams(AttentivePoolParams(p["sup.pool.W"], p["sup.pool.u"]),
                                      p["sup.w"], p["sup.b"])
        if "cls.w" in p:
            self.cls = ReadoutParams(AttentivePoolParams(p["cls.pool1.W"], p["cls.pool1.u"]),
                                     AttentivePoolParams(p["cls.pool2.W"], p["cls.pool2.u"]),
                                     p["cls.w"], p["cls.b"])

    @classmethod
    def create(cls, cfg: TrainConfig) -> "Model":
        return cls(cfg, init_params(cfg))

    def weight_count(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self.params.items()
                   if n.startswith(prefix) and not n.endswith(("_b", ".b", "in_b", "out_b")))

    # --------------------------------------------------------------- forward

    def encode(self, g: RelationalGraph) -> list[Tensor]:
        embed = self.params["embed"]
        xs = []
        for n in g.nodes:
            if n.features is not None:
                xs.append(Tensor(n.features))
            else:
                xs.append(take_rows(embed, n.tokens))
        if g.question is None:
            return xs
        q = take_rows(embed, g.question)
        return [coattn_group(x, [q], self.reader, "mean") for x in xs]

    def forward(self, g: RelationalGraph) -> ModelOutput:
        if g.num_relations != self.cfg.relations:
            raise ConfigError(f"config expects {self.cfg.relations} relations, "
                              f"graph has {g.num_relations}")
        V0 = self.encode(g)
        if self.cfg.baseline == "none":
            states, _ = gsn_stack_forward(g, V0, self.gsn_layers)
            token_states = node_states = states
        else:
            H = concat_rows([summarize_node(v, self.cfg.summarizer, self.gcn_pool) for v in V0])
            X = add_row(matmul(H, self.params["gcn.in_w"]), self.params["gcn.in_b"])
            for layer in self.gcn_layers:
                X = gcn_layer_matrix(g, X, layer)
            U = add_row(matmul(X, self.params["gcn.out_w"]), self.params["gcn.out_b"])
            node_states = [slice_rows(U, i, i + 1) for i in range(g.num_nodes)] if g.num_nodes > 1 else [U]
            token_states = [add(v, repeat_rows(u, v.rows)) for v, u in zip(V0, node_states)]
        out = ModelOutput(token_states)
        task = self.cfg.task
        if task in ("span-only", "joint"):
            out.span = span_head(token_states, range(g.num_nodes), self.span, self.cfg.window)
        if task in ("sup-only", "joint"):
            out.nodes = node_head(node_states, self.sup)
        if task == "graph-class":
            out.graph = graph_head(node_states, self.cls)
        return out

    def loss(self, g: RelationalGraph, out: ModelOutput | None = None) -> Tensor:
        out = out or self.forward(g)
        task = self.cfg.task
        if task == "span-only":
            return span_loss(out.span, g.answer_global())
        if task == "sup-only":
            return node_loss(out.nodes, [n.sup for n in g.nodes])
        if task == "joint":
            return joint_loss(span_loss(out.span, g.answer_global()),
                              node_loss(out.nodes, [n.sup for n in g.nodes]), self.cfg.lam)
        return graph_loss(out.graph, g.label)

    def predict(self, g: RelationalGraph) -> Prediction:
        out = self.forward(g)
        return Prediction(
            span=out.span.decoded if out.span is not None else None,
            support=out.nodes.predicted() if out.nodes is not None else None,
            label=out.graph.predicted if out.graph is not None else None,
        )


def gold_of(g: RelationalGraph, task: str) -> Prediction:
    return Prediction(
        span=g.answer_global() if task in ("span-only", "joint") else None,
        support=g.supporting() if task in ("sup-only", "joint") else None,
        label=g.label if task == "graph-class" else None,
    )


def check_labels(cfg: TrainConfig, graphs: Sequence[RelationalGraph], what: str = "dataset") -> None:
    for k, g in enumerate(graphs):
        if g.num_relations != cfg.relations:
            raise ConfigError(f"{what}[{k}]: {g.num_relations} relations, config says {cfg.relations}")
        if cfg.task in ("span-only", "joint") and g.answer is None:
            raise ConfigError(f"{what}[{k}]: task {cfg.task} needs an answer span")
        if cfg.task in ("sup-only", "joint") and g.supporting() is None:
            raise ConfigError(f"{what}[{k}]: task {cfg.task} needs supporting labels on every node")
        if cfg.task == "graph-class" and (g.label is None or not 0 <= g.label < cfg.num_classes):
            raise ConfigError(f"{what}[{k}]: task graph-class needs a class in [0, {cfg.num_classes})")
        if any(n.tokens is None and n.dim != cfg.dim for n in g.nodes):
            raise ConfigError(f"{what}[{k}]: feature dimension differs from dim={cfg.dim}")
        for n in g.nodes:
            if n.features is None and max(n.tokens) >= cfg.vocab_size:
                raise ConfigError(f"{what}[{k}]: token id beyond vocab_size={cfg.vocab_size}")


def evaluate(model: Model, graphs: Sequence[RelationalGraph]) -> dict[str, float]:
    preds = [model.predict(g) for g in graphs]
    golds = [gold_of(g, model.cfg.task) for g in graphs]
    return metrics(preds, golds)


# --------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            new = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new.flags.writeable = False
            p.data = new
            p.grad = None


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, Tensor]
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def model(self) -> Model:
        return Model(self.config, self.params)


def train(cfg: TrainConfig, train_set: Sequence[RelationalGraph],
          dev_set: Sequence[RelationalGraph] | None = None, log=None) -> Checkpoint:
    """Full-dataset passes in fixed order, one Adam step per graph."""
    if not train_set:
        raise ConfigError("training set is empty")
    check_labels(cfg, train_set, "train")
    if dev_set:
        check_labels(cfg, dev_set, "dev")
    model = Model.create(cfg)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for k, g in enumerate(train_set):
            try:
                with Tape() as tape:
                    loss = model.loss(g)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError("loss is not finite")
                tape.backward(loss)
                with np.errstate(over="ignore", invalid="ignore"):
                    opt.step()
            except NumericError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, example {k}: {exc}") from exc
            total += value
        record = {"epoch": epoch, "train_loss": total / len(train_set)}
        if dev_set:
            record.update({f"dev_{k}": v for k, v in evaluate(model, dev_set).items()})
        history.append(record)
        if log is not None:
            log(record)
    return Checkpoint(cfg, model.params, cfg.epochs, history)


# -------------------------------------------------------------- checkpoints

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(ckpt.params))
    for name, t in ckpt.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<II", t.rows, t.cols)
        out += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    text = ckpt.config.to_text() + f"epoch = {ckpt.epoch}\n"
    text += "history = " + json.dumps(ckpt.history, separators=(",", ":")) + "\n"
    raw = text.encode("utf-8")
    out += struct.pack("<I", len(raw)) + raw
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


ARCH_KEYS = ("dim", "layers", "combiner", "relations", "activation", "task", "baseline",
             "self_inclusive", "vocab_size", "num_classes", "summarizer", "gcn_width")


def load_checkpoint(path, expect: TrainConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` given, refuse architecture mismatches."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a GSN checkpoint (bad magic)")
    params = {}
    for _ in range(r.u32("record count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rows, cols = r.u32("rows"), r.u32("cols")
        data = np.frombuffer(r.take(8 * rows * cols, f"tensor {name}"), dtype="<f8")
        params[name] = Tensor(data.reshape(rows, cols).astype(np.float64), True, name=name)
    text = r.take(r.u32("config length"), "config").decode("utf-8")
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after config block")
    kv = parse_kv(text)
    epoch = int(kv.pop("epoch", "0"))
    history = json.loads(kv.pop("history", "[]"))
    cfg = TrainConfig.from_mapping(kv)
    if expect is not None:
        diff = [k for k in ARCH_KEYS if getattr(cfg, k) != getattr(expect, k)]
        if diff:
            detail = ", ".join(f"{k}: checkpoint={getattr(cfg, k)!r} config={getattr(expect, k)!r}"
                               for k in diff)
            raise CheckpointError(f"checkpoint does not fit the config ({detail})")
    want = init_params(cfg, np.random.default_rng(0))
    missing = [n for n in want if n not in params]
    if missing:
        raise CheckpointError("checkpoint is missing tensors: " + ", ".join(missing))
    for n, t in want.items():
        if params[n].shape != t.shape:
            raise CheckpointError(f"tensor {n} has shape {params[n].shape}, expected {t.shape}")
    return Checkpoint(cfg, params, epoch, history)
