"""Genome-built message-passing networks with a mean/variance head.

Layout of a model built from a genome::

    x --input dense--> S0 --stage 1--> S1 --stage 2--> S2 --stage 3--> S3
                       (optional skip from S_{k} or S_{k-1} into stage k+1's output)
    S3 --readout--> dense(32, relu) --> dense(32, relu) --> dense(2)
    mu = out[0], var = softplus(out[1]) + 1e-6

One stage, per head: attention scores over each node's incoming edges, a
message ``A(e_vw) @ h_w`` where ``A`` is a linear edge network producing a
d x d matrix, a neighbourhood aggregate of ``alpha_vw * message``; heads are
averaged and fed to a GRU or dense update, then the stage activation.

The edge network is stored as ``edge.w`` (d, F_e*d) and ``edge.b`` (d, d):
block ``f`` of ``edge.w`` is the transposed matrix contributed by edge
feature ``f``. This is the same linear map as a (F_e -> d*d) dense layer,
laid out so that ``h @ [edge.w | edge.b]`` gives every per-feature product
in one matmul.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .archspace import DEFAULT_SPACE, TAIL_UNITS, Genome, SearchSpace
from .diffcore import Tensor
from .errors import GnnuqError, ShapeMismatch
from .molgraph import EDGE_FEATURES, NODE_FEATURES, GraphBatch, MolGraph, collate
from .rng import SplitMix64, derive_seed

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class StageConfig:
    hidden_dim: int
    attention: str
    heads: int
    aggregate: str
    activation: str
    update: str


@dataclass
class Architecture:
    stages: list[StageConfig]
    skips: list[int | None]  # source index into [S0, S1, ...] per stage, or None
    gather: str

    @classmethod
    def from_genome(cls, space: SearchSpace, genome: Genome) -> "Architecture":
        choices = space.decode(genome)
        stages = [
            StageConfig(*(choices[f"stage{s}.{name}"] for name in
                          ("hidden_dim", "attention", "heads", "aggregate", "activation", "update")))
            for s in range(space.n_stages)
        ]
        skips = []
        for k in range(space.n_stages):
            opt = choices.get(f"skip{k}", "none")
            back = {"none": 0, "from-1-back": 1, "from-2-back": 2}[opt]
            src = k + 1 - back  # stage k writes S_{k+1}; its input is S_k
            skips.append(src if back and src >= 0 else None)
        gather = choices.get("gather", "gather-sum")
        return cls(stages, skips, gather)


@dataclass
class ModelInstance:
    genome: Genome
    arch: Architecture
    params: dict[str, Tensor]
    n_max: int
    e_max: int
    f_n: int = NODE_FEATURES
    f_e: int = EDGE_FEATURES
    init_seed: int = 0
    space: SearchSpace = field(default=DEFAULT_SPACE, repr=False)

    @property
    def dims(self) -> list[int]:
        return [st.hidden_dim for st in self.arch.stages]

    @property
    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> "ModelInstance":
        params = {k: dc.parameter(v.data.copy(), k) for k, v in self.params.items()}
        return ModelInstance(self.genome, self.arch, params, self.n_max, self.e_max,
                             self.f_n, self.f_e, self.init_seed, self.space)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v


def readout_width(gather: str, feat: int, n_max: int) -> int:
    if gather.startswith("pool-"):
        return n_max
    if gather.startswith("gather-") or gather == "attn-sum-pool":
        return feat
    if gather.startswith("attn-pool-"):
        return int(gather.rsplit("-", 1)[1])
    if gather == "flatten":
        return n_max * feat
    raise ValueError(f"unknown gather {gather!r}")


class _Init:
    def __init__(self, seed: int):
        self.seed = seed
        self.count = 0
        self.params: dict[str, Tensor] = {}

    def glorot(self, name, shape, fan_in=None, fan_out=None):
        fan_in = shape[0] if fan_in is None else fan_in
        fan_out = (shape[1] if len(shape) > 1 else 1) if fan_out is None else fan_out
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        rng = SplitMix64(derive_seed(self.seed, self.count))
        self.count += 1
        u = rng.uniform_array(int(np.prod(shape))).reshape(shape)
        self.params[name] = dc.parameter((2.0 * u - 1.0) * limit, name)

    def zeros(self, name, shape):
        self.count += 1
        self.params[name] = dc.parameter(np.zeros(shape), name)

    def dense(self, name, n_in, n_out):
        self.glorot(f"{name}.w", (n_in, n_out))
        self.zeros(f"{name}.b", (n_out,))


def instantiate(space: SearchSpace, genome: Genome, n_max: int, e_max: int = 0,
                f_n: int = NODE_FEATURES, f_e: int = EDGE_FEATURES, init_seed: int = 0) -> ModelInstance:
    """Build a model with Glorot-uniform weights and zero biases."""
    space.validate(genome)
    arch = Architecture.from_genome(space, genome)
    init = _Init(init_seed)
    dims = [st.hidden_dim for st in arch.stages]
    init.dense("input", f_n, dims[0] if dims else f_n)
    out_dims = [dims[0] if dims else f_n]
    for s, st in enumerate(arch.stages):
        d_prev, d = out_dims[-1], st.hidden_dim
        if d_prev != d:
            init.dense(f"s{s}.proj", d_prev, d)
        for h in range(st.heads):
            pre = f"s{s}.h{h}"
            init.glorot(f"{pre}.edge.w", (d, f_e * d), fan_in=f_e, fan_out=d * d)
            init.zeros(f"{pre}.edge.b", (d, d))
            if st.attention in ("gat", "sym-gat", "cos"):
                init.glorot(f"{pre}.att.l", (d, 1))
                init.glorot(f"{pre}.att.r", (d, 1))
            elif st.attention == "linear":
                init.glorot(f"{pre}.att.r", (d, 1))
            elif st.attention == "gen-linear":
                init.glorot(f"{pre}.att.wl", (d, d))
                init.glorot(f"{pre}.att.wr", (d, d))
                init.glorot(f"{pre}.att.g", (d, 1))
        if st.update == "gru":
            init.glorot(f"s{s}.gru.wx", (d, 3 * d))
            init.glorot(f"s{s}.gru.uzr", (d, 2 * d))
            init.glorot(f"s{s}.gru.uh", (d, d))
            init.zeros(f"s{s}.gru.b", (3 * d,))
        else:
            init.dense(f"s{s}.mlp", 2 * d, d)
        src = arch.skips[s]
        if src is not None:
            init.dense(f"skip{s}", out_dims[src], d)
        out_dims.append(d)
    feat = out_dims[-1]
    if arch.gather.startswith("attn-pool-"):
        width = readout_width(arch.gather, feat, n_max)
        init.dense("gather.gate", feat, width)
        init.dense("gather.value", feat, width)
    elif arch.gather == "attn-sum-pool":
        init.glorot("gather.a", (feat, 1))
    n_in = readout_width(arch.gather, feat, n_max)
    for k, units in enumerate(TAIL_UNITS):
        init.dense(f"tail{k}", n_in, units)
        n_in = units
    init.dense("out", n_in, 2)
    return ModelInstance(genome, arch, init.params, n_max, e_max, f_n, f_e, init_seed, space)


def _dense(params, name, x, act="linear"):
    return dc.activation(dc.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"], act)


def _attention_scores(kind, pre, params, h, recv, send):
    if kind == "gat" or kind == "sym-gat":
        el = dc.matmul(h, params[f"{pre}.att.l"])
        er = dc.matmul(h, params[f"{pre}.att.r"])
        s = dc.leaky_relu(dc.take(el, recv) + dc.take(er, send))
        if kind == "sym-gat":
            s = s + dc.leaky_relu(dc.take(el, send) + dc.take(er, recv))
        return s
    if kind == "cos":
        d = h.shape[1]
        hl = h * dc.reshape(params[f"{pre}.att.l"], (1, d))
        hr = h * dc.reshape(params[f"{pre}.att.r"], (1, d))
        return dc.sum(dc.take(hl, recv) * dc.take(hr, send), axis=1, keepdims=True)
    if kind == "linear":
        return dc.tanh(dc.take(dc.matmul(h, params[f"{pre}.att.r"]), send))
    if kind == "gen-linear":
        zl = dc.take(dc.matmul(h, params[f"{pre}.att.wl"]), recv)
        zr = dc.take(dc.matmul(h, params[f"{pre}.att.wr"]), send)
        return dc.matmul(dc.tanh(zl + zr), params[f"{pre}.att.g"])
    raise ValueError(f"unknown attention {kind!r}")


def stage_forward(params: dict, s: int, st: StageConfig, h: Tensor, edge_attr: np.ndarray,
                  recv: np.ndarray, send: np.ndarray) -> Tensor:
    """One message-passing stage on stripped (padding-free) node/edge arrays."""
    n = h.shape[0]
    if f"s{s}.proj.w" in params:
        h = _dense(params, f"s{s}.proj", h)
    d = st.hidden_dim
    if h.shape[1] != d:
        raise ShapeMismatch(f"stage {s}: input width {h.shape[1]} != hidden dim {d}")
    n_edges = recv.shape[0]
    coeff = np.concatenate([edge_attr, np.ones((n_edges, 1))], axis=1)[:, :, None]
    agg = None
    for k in range(st.heads):
        pre = f"s{s}.h{k}"
        kernel = dc.concat([params[f"{pre}.edge.w"], params[f"{pre}.edge.b"]], axis=1)
        per_feature = dc.reshape(dc.matmul(h, kernel), (n, coeff.shape[1], d))
        msg = dc.sum(dc.take(per_feature, send) * coeff, axis=1)
        if st.attention != "constant":
            scores = _attention_scores(st.attention, pre, params, h, recv, send)
            msg = msg * dc.segment_softmax(scores, recv, n)
        head = dc.segment_reduce(msg, recv, n, st.aggregate)
        agg = head if agg is None else agg + head
    if st.heads > 1:
        agg = agg * (1.0 / st.heads)
    if st.update == "gru":
        gru = {k: params[f"s{s}.gru.{k}"] for k in ("wx", "uzr", "uh", "b")}
        out = dc.gru_cell(h, agg, gru)
    else:
        out = dc.matmul(dc.concat([h, agg], axis=1), params[f"s{s}.mlp.w"]) + params[f"s{s}.mlp.b"]
    return dc.activation(out, st.activation)


def readout(kind: str, params: dict, H: Tensor, node_graph: np.ndarray, node_pos: np.ndarray,
            n_graphs: int, n_max: int) -> Tensor:
    """Collapse stacked node features ``H`` to one row per graph."""
    n, feat = H.shape
    if kind.startswith("pool-"):
        red = kind.split("-")[1]
        if red == "max":
            per_node = dc.segment_max(dc.reshape(H, (n * feat,)), np.repeat(np.arange(n), feat), n)
        elif red == "sum":
            per_node = dc.sum(H, axis=1)
        else:
            per_node = dc.mean(H, axis=1)
        # real nodes fill the leading slots in ascending value order, so the
        # readout does not depend on atom order; padded slots stay zero
        order = np.lexsort((per_node.data, node_graph))
        first = np.searchsorted(node_graph[order], np.arange(n_graphs))
        graph = node_graph[order]
        slot = graph * n_max + (np.arange(n) - first[graph])
        ranked = dc.scatter_rows(dc.take(per_node, order), slot, n_graphs * n_max)
        return dc.reshape(ranked, (n_graphs, n_max))
    if kind.startswith("gather-"):
        return dc.segment_reduce(H, node_graph, n_graphs, kind.split("-")[1])
    if kind.startswith("attn-pool-"):
        gate = _dense(params, "gather.gate", H, "sigmoid")
        value = _dense(params, "gather.value", H)
        return dc.segment_sum(gate * value, node_graph, n_graphs)
    if kind == "attn-sum-pool":
        alpha = dc.segment_softmax(dc.matmul(H, params["gather.a"]), node_graph, n_graphs)
        return dc.segment_sum(alpha * H, node_graph, n_graphs)
    if kind == "flatten":
        return dc.reshape(dc.scatter_rows(H, node_pos, n_graphs * n_max), (n_graphs, n_max * feat))
    raise ValueError(f"unknown gather {kind!r}")


def _drop(x: Tensor, rate: float, rng: SplitMix64 | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    return dc.dropout(x, rate, rng.uniform_array(x.data.size))


def forward(model: ModelInstance, batch: GraphBatch, dropout: float = 0.0,
            rng: SplitMix64 | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(mu, var)`` tensors of shape (n_graphs,).

    With ``dropout > 0`` and an ``rng``, inverted dropout is applied to the
    input of every message stage and every dense tail layer.
    """
    if batch.n_max != model.n_max:
        raise ShapeMismatch(f"batch padded to {batch.n_max} nodes, model expects {model.n_max}")
    if batch.x.shape[1] != model.f_n or batch.edge_attr.shape[1] != model.f_e:
        raise ShapeMismatch("feature widths do not match the model")
    p = model.params
    h = _dense(p, "input", Tensor(batch.x))
    outputs = [h]
    for s, st in enumerate(model.arch.stages):
        h_in = _drop(outputs[-1], dropout, rng)
        h = stage_forward(p, s, st, h_in, batch.edge_attr, batch.receiver, batch.sender)
        src = model.arch.skips[s]
        if src is not None:
            h = h + _dense(p, f"skip{s}", outputs[src])
        outputs.append(h)
    g = readout(model.arch.gather, p, outputs[-1], batch.node_graph, batch.node_pos,
                batch.n_graphs, batch.n_max)
    for k in range(len(TAIL_UNITS)):
        g = _dense(p, f"tail{k}", _drop(g, dropout, rng), "relu")
    out = _dense(p, "out", _drop(g, dropout, rng))
    mu = dc.reshape(out[:, 0:1], (batch.n_graphs,))
    var = dc.reshape(dc.softplus(out[:, 1:2]), (batch.n_graphs,)) + VAR_FLOOR
    return mu, var


def predict(model: ModelInstance, batch: GraphBatch, **kw) -> tuple[np.ndarray, np.ndarray]:
    mu, var = forward(model, batch, **kw)
    return mu.data, var.data


# ---------------------------------------------------------------------------
# padded single-graph entry points


def _single(H, E, P, m, e_mask=None) -> GraphBatch:
    H = np.asarray(H, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    P = np.asarray(P, dtype=np.int64)
    m = np.asarray(m, dtype=np.float64)
    if e_mask is None:
        e_mask = ((m[P[:, 0]] > 0) & (m[P[:, 1]] > 0)).astype(np.float64)
    return collate(H[None], E[None], P[None], m[None], np.asarray(e_mask, dtype=np.float64)[None])


def message_stage(H_in, E, P, m, params: dict, stage: StageConfig, index: int = 0, e_mask=None) -> Tensor:
    """Run one stage on a padded graph; masked node rows of the result are zero.

    Edges whose endpoints are not both real nodes are treated as padding
    unless an explicit ``e_mask`` is given.
    """
    batch = _single(H_in, E, P, m, e_mask)
    h = Tensor(batch.x) if not isinstance(H_in, Tensor) else dc.take(H_in, batch.node_pos)
    out = stage_forward(params, index, stage, h, batch.edge_attr, batch.receiver, batch.sender)
    return dc.scatter_rows(out, batch.node_pos, batch.n_max)


def gather(kind: str, H, m, params: dict | None = None) -> Tensor:
    """Readout of a single padded node-feature matrix ``H`` (N_max x F)."""
    H = dc.as_tensor(H)
    m = np.asarray(m)
    pos = np.flatnonzero(m > 0)
    rows = dc.take(H, pos)
    out = readout(kind, params or {}, rows, np.zeros(pos.size, dtype=np.int64), pos, 1, H.shape[0])
    return dc.reshape(out, (out.shape[1],))


def forward_graphs(model: ModelInstance, graphs: list[MolGraph], **kw):
    from .molgraph import collate_graphs

    return forward(model, collate_graphs(graphs), **kw)


# ---------------------------------------------------------------------------
# checkpoint files
#
# magic "GUQW", u32 version, u32 array count, then for each array:
# u16 name length, UTF-8 name, u8 rank, u64 dims, f64 payload (little-endian).

MAGIC = b"GUQW"
CHECKPOINT_VERSION = 1


class CheckpointError(GnnuqError, ValueError):
    pass


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_arrays(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a GUQW checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 8 * size > len(data):
                raise struct.error("payload runs past end of file")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return arrays


def _seed_words(seed: int) -> np.ndarray:
    return np.array([(seed >> (16 * k)) & 0xFFFF for k in range(4)], dtype=np.float64)


def save_model(path, model: ModelInstance, scaler=None) -> None:
    arrays = {
        "meta.genome": np.array(model.genome.genes, dtype=np.float64),
        "meta.dims": np.array([model.n_max, model.e_max, model.f_n, model.f_e,
                               model.genome.space_version], dtype=np.float64),
        "meta.seed": _seed_words(model.init_seed),
    }
    if scaler is not None:
        arrays["meta.scaler"] = np.array([scaler.mean, scaler.std])
    arrays.update(model.state())
    write_arrays(path, arrays)


def load_model(path, space: SearchSpace = DEFAULT_SPACE):
    """Return ``(model, scaler_or_None)`` from a checkpoint."""
    from .molgraph import TargetScaler

    arrays = read_arrays(path)
    try:
        genes = tuple(int(v) for v in arrays.pop("meta.genome"))
        n_max, e_max, f_n, f_e, version = (int(v) for v in arrays.pop("meta.dims"))
        seed = sum(int(w) << (16 * k) for k, w in enumerate(arrays.pop("meta.seed")))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing {exc.args[0]}") from None
    scaler_arr = arrays.pop("meta.scaler", None)
    model = instantiate(space, Genome(genes, version), n_max, e_max, f_n, f_e, seed)
    if set(arrays) != set(model.params):
        raise CheckpointError(f"{path}: parameter names do not match the genome")
    for k, v in arrays.items():
        if v.shape != model.params[k].shape:
            raise CheckpointError(f"{path}: {k} has shape {v.shape}, expected {model.params[k].shape}")
    model.load_state(arrays)
    scaler = None if scaler_arr is None else TargetScaler(float(scaler_arr[0]), float(scaler_arr[1]))
    return model, scaler
