"""Permutation-equivariant graph transformer predicting clean node/edge types.

Parameters live in a flat dict of named float64 tensors whose values are kept
float32-representable, so checkpoints (float32 on disk) reload bit-exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import BadDims, NonFiniteLoss, ShapeMismatch
from .graphs import NO_EDGE, Graph, SoftGraph

DTYPE = torch.float64
N_STRUCT = 4          # degree, 3-, 4-, 5-cycles through the node
# plus, per node, the number of incident edges of each real edge type (d - 1 values)
N_TIME_EMB = 16
N_GLOBAL_IN = 5 + N_TIME_EMB   # plus node- and edge-type histograms (a + d values)
_FEAT_SCALE = 0.25
_HEAD_GAIN = 0.1


@dataclass
class DenoiserModel:
    a: int
    d: int
    h_node: int
    h_edge: int
    h_global: int
    n_layers: int
    max_n: int
    params: dict = field(default_factory=dict)

    @property
    def widths(self) -> tuple[int, int, int]:
        return (self.h_node, self.h_edge, self.h_global)

    def num_params(self) -> int:
        return int(sum(p.numel() for p in self.params.values()))

    def copy(self) -> "DenoiserModel":
        params = {k: v.detach().clone().requires_grad_(True) for k, v in self.params.items()}
        return DenoiserModel(self.a, self.d, self.h_node, self.h_edge, self.h_global,
                             self.n_layers, self.max_n, params)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype

    def to(self, dtype: torch.dtype) -> "DenoiserModel":
        """Copy computing in ``dtype``; exact both ways since values are float32-representable."""
        params = {k: v.detach().to(dtype).requires_grad_(True) for k, v in self.params.items()}
        return DenoiserModel(self.a, self.d, self.h_node, self.h_edge, self.h_global,
                             self.n_layers, self.max_n, params)

    def round_to_float32(self) -> None:
        with torch.no_grad():
            for p in self.params.values():
                p.copy_(p.float().to(p.dtype))

    def arch(self) -> dict:
        return {"a": self.a, "d": self.d, "h_node": self.h_node, "h_edge": self.h_edge,
                "h_global": self.h_global, "n_layers": self.n_layers, "max_n": self.max_n}


def param_shapes(a: int, d: int, h_node: int, h_edge: int, h_global: int, n_layers: int) -> dict:
    """Ordered name -> shape map; weights are stored ``(fan_in, fan_out)``."""
    H, He, Hg = h_node, h_edge, h_global
    shapes = {
        "embed.node.w": (a + N_STRUCT + d - 1, H), "embed.node.b": (H,),
        "embed.edge.w": (d, He), "embed.edge.b": (He,),
        "embed.global.w": (N_GLOBAL_IN + a + d, Hg), "embed.global.b": (Hg,),
    }
    for i in range(n_layers):
        p = f"layer{i}"
        for name in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w{name}"] = (H, H)
            shapes[f"{p}.attn.b{name}"] = (H,)
        shapes[f"{p}.attn.we"] = (He, 1)
        shapes[f"{p}.attn.be"] = (1,)
        shapes[f"{p}.film.wgn"] = (Hg, H)
        shapes[f"{p}.film.bgn"] = (H,)
        shapes[f"{p}.film.wge"] = (Hg, He)
        shapes[f"{p}.film.bge"] = (He,)
        shapes[f"{p}.mlp.w1"] = (H, 2 * H)
        shapes[f"{p}.mlp.b1"] = (2 * H,)
        shapes[f"{p}.mlp.w2"] = (2 * H, H)
        shapes[f"{p}.mlp.b2"] = (H,)
        shapes[f"{p}.edge.w"] = (2 * H, He)
        shapes[f"{p}.edge.b"] = (He,)
        shapes[f"{p}.global.w"] = (H, Hg)
        shapes[f"{p}.global.b"] = (Hg,)
        for norm, width in (("node1", H), ("node2", H), ("edge", He)):
            shapes[f"{p}.norm.{norm}_g"] = (width,)
            shapes[f"{p}.norm.{norm}_b"] = (width,)
    shapes["head.node.w"] = (H, a)
    shapes["head.node.b"] = (a,)
    shapes["head.edge.w"] = (He, d)
    shapes["head.edge.b"] = (d,)
    return shapes


def init_model(a: int, d: int, widths: Sequence[int] = (48, 24, 24), L: int = 3,
               rng_seed: int = 0, max_n: int = 9) -> DenoiserModel:
    """Fan-in scaled uniform weights, zero biases, unit layer-norm scales."""
    h_node, h_edge, h_global = widths
    if min(a, d, h_node, h_edge, h_global, L, max_n) < 1:
        raise BadDims(f"all dimensions must be positive: a={a} d={d} widths={widths} L={L}")
    rng = np.random.default_rng(rng_seed)
    params = {}
    for name, shape in param_shapes(a, d, h_node, h_edge, h_global, L).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.endswith("_g"):
            val = np.ones(shape)
        elif len(shape) == 1:
            val = np.zeros(shape)
        else:
            gain = _HEAD_GAIN if name.startswith("head.") else 1.0
            bound = gain / math.sqrt(shape[0])
            val = rng.uniform(-bound, bound, size=shape)
        t = torch.tensor(val.astype(np.float32), dtype=DTYPE)
        params[name] = t.requires_grad_(True)
    return DenoiserModel(a, d, h_node, h_edge, h_global, L, max_n, params)


# ---------------------------------------------------------------- batching


@dataclass
class GraphBatch:
    X: torch.Tensor      # (B, N, a)
    E: torch.Tensor      # (B, N, N, d)
    mask: torch.Tensor   # (B, N) bool

    @property
    def pair_mask(self) -> torch.Tensor:
        return self.pair_mask_as(self.X.dtype)

    def pair_mask_as(self, dtype: torch.dtype) -> torch.Tensor:
        m = self.mask.to(dtype)
        N = m.shape[1]
        return m[:, :, None] * m[:, None, :] * (1 - torch.eye(N, dtype=dtype))


def batch_arrays(Xs: Sequence[np.ndarray], Es: Sequence[np.ndarray]) -> GraphBatch:
    B = len(Xs)
    N = max((x.shape[0] for x in Xs), default=0)
    a = Xs[0].shape[1]
    d = Es[0].shape[2]
    X = np.zeros((B, N, a))
    E = np.zeros((B, N, N, d))
    mask = np.zeros((B, N), dtype=bool)
    for b, (x, e) in enumerate(zip(Xs, Es)):
        n = x.shape[0]
        X[b, :n] = x
        E[b, :n, :n] = e
        mask[b, :n] = True
    return GraphBatch(torch.from_numpy(X), torch.from_numpy(E), torch.from_numpy(mask))


def batch_graphs(graphs: Sequence[Graph]) -> GraphBatch:
    return batch_arrays([g.X for g in graphs], [g.E for g in graphs])


# ---------------------------------------------------------------- network


def _lin(x: torch.Tensor, p: dict, w: str, b: str) -> torch.Tensor:
    return x @ p[w] + p[b]


def _layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * g + b


def _diag(M: torch.Tensor) -> torch.Tensor:
    return torch.diagonal(M, dim1=-2, dim2=-1)


def structural_features(A: torch.Tensor, mask: torch.Tensor, max_n: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-node degree and 3/4/5-cycle counts plus graph-level counts, from adjacency powers."""
    deg = A.sum(-1)
    A2 = A @ A
    A3 = A2 @ A
    A4 = A3 @ A
    A5 = A4 @ A
    tri = _diag(A3)
    c3 = tri / 2
    c4 = (_diag(A4) - deg * (deg - 1) - (A @ deg[..., None])[..., 0]) / 2
    # closed 5-walks minus those made of a triangle plus one back-and-forth step
    via = ((A * A2) @ deg[..., None])[..., 0]
    c5 = (_diag(A5) - 2 * tri * deg - 2 * via - (A @ tri[..., None])[..., 0] + 5 * tri) / 2
    node = torch.stack([deg, c3, c4, c5], dim=-1) * _FEAT_SCALE
    n = mask.to(A.dtype).sum(-1)
    glob = torch.stack([n / max_n, c3.sum(-1) / 3, c4.sum(-1) / 4, c5.sum(-1) / 5], dim=-1)
    glob = torch.cat([glob[:, :1], glob[:, 1:] * _FEAT_SCALE], dim=-1)
    return node, glob


def time_embedding(tfrac: torch.Tensor) -> torch.Tensor:
    half = N_TIME_EMB // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=tfrac.dtype) / half)
    ang = tfrac[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def forward_logits(model: DenoiserModel, batch: GraphBatch, tfrac: torch.Tensor):
    """Node logits ``(B, N, a)`` and symmetric edge logits ``(B, N, N, d)``."""
    p = model.params
    dt = model.dtype
    X, E, mask = batch.X.to(dt), batch.E.to(dt), batch.mask
    tfrac = tfrac.to(dt)
    if X.shape[-1] != model.a or E.shape[-1] != model.d:
        raise ShapeMismatch(f"model expects a={model.a}, d={model.d}; got {X.shape[-1]}, {E.shape[-1]}")
    maskf = mask.to(dt)[..., None]
    pair = batch.pair_mask_as(dt)
    A = E[..., 1:].sum(-1) * pair
    struct, glob = structural_features(A, mask, model.max_n)
    struct = torch.cat([struct, (E[..., 1:] * pair[..., None]).sum(2) * _FEAT_SCALE], dim=-1)
    n_nodes = maskf.sum(1).clamp(min=1.0)
    n_pairs = pair.sum((1, 2)).clamp(min=1.0)[:, None]
    x_hist = X.sum(1) / n_nodes
    e_hist = (E * pair[..., None]).sum((1, 2)) / n_pairs
    y = torch.cat([tfrac[:, None], glob, time_embedding(tfrac), x_hist, e_hist], dim=-1)

    h = torch.nn.functional.silu(_lin(torch.cat([X, struct], -1), p, "embed.node.w", "embed.node.b")) * maskf
    e = torch.nn.functional.silu(_lin(E, p, "embed.edge.w", "embed.edge.b")) * pair[..., None]
    g = torch.nn.functional.silu(_lin(y, p, "embed.global.w", "embed.global.b"))
    scale = 1.0 / math.sqrt(model.h_node)
    neg = torch.finfo(dt).min
    n_valid = maskf.sum(1).clamp(min=1.0)
    for i in range(model.n_layers):
        k = f"layer{i}"
        h = h + _lin(g, p, f"{k}.film.wgn", f"{k}.film.bgn")[:, None, :]
        e = e + _lin(g, p, f"{k}.film.wge", f"{k}.film.bge")[:, None, None, :]
        q = _lin(h, p, f"{k}.attn.wq", f"{k}.attn.bq")
        kk = _lin(h, p, f"{k}.attn.wk", f"{k}.attn.bk")
        v = _lin(h, p, f"{k}.attn.wv", f"{k}.attn.bv")
        scores = (q @ kk.transpose(1, 2)) * scale + _lin(e, p, f"{k}.attn.we", f"{k}.attn.be")[..., 0]
        scores = scores.masked_fill(~mask[:, None, :], neg)
        attn = torch.softmax(scores, dim=-1)
        h = _layer_norm(h + _lin(attn @ v, p, f"{k}.attn.wo", f"{k}.attn.bo"),
                        p[f"{k}.norm.node1_g"], p[f"{k}.norm.node1_b"])
        mlp = _lin(torch.nn.functional.silu(_lin(h, p, f"{k}.mlp.w1", f"{k}.mlp.b1")), p,
                   f"{k}.mlp.w2", f"{k}.mlp.b2")
        h = _layer_norm(h + mlp, p[f"{k}.norm.node2_g"], p[f"{k}.norm.node2_b"]) * maskf
        hi, hj = h[:, :, None, :], h[:, None, :, :]
        pairs = torch.cat([hi + hj, hi * hj], dim=-1)
        e = _layer_norm(e + _lin(pairs, p, f"{k}.edge.w", f"{k}.edge.b"),
                        p[f"{k}.norm.edge_g"], p[f"{k}.norm.edge_b"]) * pair[..., None]
        pooled = h.sum(1) / n_valid
        g = g + torch.nn.functional.silu(_lin(pooled, p, f"{k}.global.w", f"{k}.global.b"))
    node_logits = _lin(h, p, "head.node.w", "head.node.b")
    edge_logits = _lin(e, p, "head.edge.w", "head.edge.b")
    edge_logits = (edge_logits + edge_logits.transpose(1, 2)) / 2
    return node_logits, edge_logits


def predict_probs(model: DenoiserModel, batch: GraphBatch, tfrac: torch.Tensor):
    """Softmax outputs with padded rows zeroed and the diagonal pinned to no-edge."""
    nl, el = forward_logits(model, batch, tfrac)
    dt = nl.dtype
    px = torch.softmax(nl, -1) * batch.mask.to(dt)[..., None]
    pe = torch.softmax(el, -1) * batch.pair_mask_as(dt)[..., None]
    N = batch.mask.shape[1]
    diag = batch.mask.to(dt)[:, :, None] * torch.nn.functional.one_hot(
        torch.tensor(NO_EDGE), model.d).to(dt)
    idx = torch.arange(N)
    pe = pe.clone()
    pe[:, idx, idx] = diag
    return px, pe


def forward(model: DenoiserModel, g_t: Graph, t: int, T: int) -> SoftGraph:
    """Predicted clean-graph distribution for a single noisy graph."""
    if g_t.a != model.a or g_t.d != model.d:
        raise ShapeMismatch(f"model expects a={model.a}, d={model.d}; graph has {g_t.a}, {g_t.d}")
    with torch.no_grad():
        px, pe = predict_probs(model, batch_graphs([g_t]), torch.tensor([t / T], dtype=DTYPE))
    return SoftGraph(px[0].numpy(), pe[0].numpy())


def cross_entropy_terms(model: DenoiserModel, target: GraphBatch, noisy: GraphBatch,
                        tfrac: torch.Tensor) -> torch.Tensor:
    """Per-graph CE: sum over nodes plus sum over unordered pairs i<j."""
    nl, el = forward_logits(model, noisy, tfrac)
    dt = nl.dtype
    node_ce = -(target.X.to(dt) * torch.log_softmax(nl, -1)).sum(-1)
    node_ce = (node_ce * target.mask.to(dt)).sum(-1)
    N = target.mask.shape[1]
    upper = torch.triu(torch.ones(N, N, dtype=dt), diagonal=1)
    edge_ce = -(target.E.to(dt) * torch.log_softmax(el, -1)).sum(-1)
    edge_ce = (edge_ce * target.pair_mask_as(dt) * upper).sum((-1, -2))
    return node_ce + edge_ce


def loss_and_gradients(model: DenoiserModel, g_target: Graph, g_t: Graph, t: int, T: int):
    """Scalar CE loss and its gradient for every named parameter."""
    for p in model.params.values():
        p.grad = None
    loss = cross_entropy_terms(model, batch_graphs([g_target]), batch_graphs([g_t]),
                               torch.tensor([t / T], dtype=DTYPE)).sum()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")
    names = list(model.params)
    # the final layer's global update feeds nothing downstream; its gradient is zero
    grads = torch.autograd.grad(loss, [model.params[k] for k in names], allow_unused=True)
    return float(loss.item()), {k: (np.zeros(tuple(model.params[k].shape)) if g is None
                                    else g.detach().numpy().copy()) for k, g in zip(names, grads)}


def loss_value(model: DenoiserModel, g_target: Graph, g_t: Graph, t: int, T: int) -> float:
    with torch.no_grad():
        return float(cross_entropy_terms(model, batch_graphs([g_target]), batch_graphs([g_t]),
                                         torch.tensor([t / T], dtype=DTYPE)).sum().item())
