"""Recurrent-attention session scorers.

Both architectures share one bidirectional GRU over the utterance embeddings.
The single-task model has one attention head and a sigmoid MLP predicting the
competence label; the multi-task model has one attention head and one linear
MLP per CTRS code, and the total is their clamped sum.

Weight matrices are stored input-major (``x @ W``), so a layer mapping d
inputs to u units holds a ``d x u`` matrix.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import CODES, COMPETENCE_THRESHOLD
from .numerics import Parameter, ShapeError, Tensor

FORMAT_VERSION = 1
MODES = ("single_task", "multi_task")
GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


class ModelFormatError(ValueError):
    pass


class ModeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "multi_task"
    d: int = 768
    hidden_units: int = 64
    attention_units: int = 10
    mlp_units: int = 20
    meta_width: int = 47
    max_len: int = 256

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("d", "hidden_units", "attention_units", "mlp_units", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.meta_width < 0:
            raise ValueError("meta_width must be >= 0")

    @property
    def heads(self) -> tuple[str, ...]:
        return CODES if self.mode == "multi_task" else ("total",)


@dataclass
class GruCellParams:
    W_z: Parameter
    W_r: Parameter
    W_h: Parameter
    U_z: Parameter
    U_r: Parameter
    U_h: Parameter
    b_z: Parameter
    b_r: Parameter
    b_h: Parameter


@dataclass
class AttentionParams:
    W_a: Parameter
    b_a: Parameter
    v_a: Parameter


@dataclass
class MlpParams:
    W1: Parameter
    b1: Parameter
    W2: Parameter
    b2: Parameter


@dataclass
class ModelParams:
    config: ModelConfig
    gru_fwd: GruCellParams
    gru_bwd: GruCellParams
    attention: dict[str, AttentionParams]
    mlp: dict[str, MlpParams]

    @property
    def mode(self) -> str:
        return self.config.mode

    def named_parameters(self) -> list[Parameter]:
        """All parameters in a fixed order (encoder, then heads in code order)."""
        out = [getattr(self.gru_fwd, n) for n in GRU_NAMES]
        out += [getattr(self.gru_bwd, n) for n in GRU_NAMES]
        for head in self.config.heads:
            a, m = self.attention[head], self.mlp[head]
            out += [a.W_a, a.b_a, a.v_a, m.W1, m.b1, m.W2, m.b2]
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.named_parameters():
            p.data[...] = state[p.name]


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, u, p, q, m = config.d, config.hidden_units, config.attention_units, config.mlp_units, config.meta_width
    shapes: dict[str, tuple[int, ...]] = {}
    for direction in ("gru_fwd", "gru_bwd"):
        for g in "zrh":
            shapes[f"{direction}.W_{g}"] = (d, u)
            shapes[f"{direction}.U_{g}"] = (u, u)
            shapes[f"{direction}.b_{g}"] = (u,)
    for head in config.heads:
        shapes[f"att.{head}.W_a"] = (2 * u, p)
        shapes[f"att.{head}.b_a"] = (p,)
        shapes[f"att.{head}.v_a"] = (p,)
        shapes[f"mlp.{head}.W1"] = (2 * u + m, q)
        shapes[f"mlp.{head}.b1"] = (q,)
        shapes[f"mlp.{head}.W2"] = (q, 1)
        shapes[f"mlp.{head}.b2"] = (1,)
    return shapes


def _assemble(config: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    P = {name: Parameter(arr, name) for name, arr in arrays.items()}

    def gru(prefix):
        return GruCellParams(**{n: P[f"{prefix}.{n}"] for n in GRU_NAMES})

    return ModelParams(
        config=config,
        gru_fwd=gru("gru_fwd"),
        gru_bwd=gru("gru_bwd"),
        attention={h: AttentionParams(P[f"att.{h}.W_a"], P[f"att.{h}.b_a"], P[f"att.{h}.v_a"])
                   for h in config.heads},
        mlp={h: MlpParams(P[f"mlp.{h}.W1"], P[f"mlp.{h}.b1"], P[f"mlp.{h}.W2"], P[f"mlp.{h}.b2"])
             for h in config.heads},
    )


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform matrices, zero biases. ``v_a`` is a 1-column projection
    and is drawn like a ``p x 1`` matrix."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "v_a":
            arrays[name] = nx.glorot_init((shape[0], 1), rng).reshape(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = nx.glorot_init(shape, rng)
    return _assemble(config, arrays)


@dataclass
class ForwardTrace:
    H: np.ndarray  # B x T x 2u
    alphas: dict[str, np.ndarray]  # head -> B x T
    contexts: dict[str, np.ndarray]  # head -> B x 2u
    outputs: np.ndarray = field(default=None)


def gru_step(x_t, h_prev, params: GruCellParams) -> Tensor:
    """One GRU update: h_t = (1 - z) * h_prev + z * candidate."""
    x_t, h_prev = nx._lift(x_t), nx._lift(h_prev)
    if x_t.shape[-1] != params.W_z.shape[0] or h_prev.shape[-1] != params.U_z.shape[0]:
        raise ShapeError(
            f"gru_step got x {x_t.shape} and h {h_prev.shape} for W {params.W_z.shape}, U {params.U_z.shape}"
        )
    squeeze = x_t.data.ndim == 1
    if squeeze:
        x_t = x_t.reshape(1, -1)
        h_prev = h_prev.reshape(1, -1)
    h = _gru_update(x_t, h_prev, params)
    return h.reshape(-1) if squeeze else h


def _gru_update(x: Tensor, h: Tensor, p: GruCellParams) -> Tensor:
    z = nx.sigmoid(x @ p.W_z + h @ p.U_z + p.b_z)
    r = nx.sigmoid(x @ p.W_r + h @ p.U_r + p.b_r)
    cand = nx.tanh(x @ p.W_h + (r * h) @ p.U_h + p.b_h)
    return (1.0 - z) * h + z * cand


def gru_scan(X: np.ndarray, order: np.ndarray, lengths: np.ndarray, params: GruCellParams) -> Tensor:
    """Run one GRU direction as a single tape node.

    Step s of sample b reads time position ``order[b, s]``; steps at or beyond
    ``lengths[b]`` are skipped. The hidden state after each step is written
    back at the position it read, so the result is ``B x T x u`` in time
    order with zeros at unread positions. Matches repeated :func:`gru_step`.
    """
    B, T, d = X.shape
    S = order.shape[1]
    u = params.U_z.shape[0]
    p = params
    Wcat = np.concatenate([p.W_z.data, p.W_r.data, p.W_h.data], axis=1)
    bcat = np.concatenate([p.b_z.data, p.b_r.data, p.b_h.data])
    Uzr = np.concatenate([p.U_z.data, p.U_r.data], axis=1)
    Uh = p.U_h.data
    rows = np.arange(B)
    Xs = X[rows[:, None], order]  # B x S x d, step order
    A = Xs @ Wcat + bcat

    live = np.arange(S)[None, :] < lengths[:, None]
    hs = np.zeros((S + 1, B, u))
    zs = np.empty((S, B, u))
    rs = np.empty((S, B, u))
    cs = np.empty((S, B, u))
    for s in range(S):
        h = hs[s]
        a = A[:, s]
        hu = h @ Uzr
        z = 0.5 * (1.0 + np.tanh(0.5 * (a[:, :u] + hu[:, :u])))
        r = 0.5 * (1.0 + np.tanh(0.5 * (a[:, u:2 * u] + hu[:, u:])))
        c = np.tanh(a[:, 2 * u:] + (r * h) @ Uh)
        h_new = (1.0 - z) * h + z * c
        if not live[:, s].all():
            h_new = np.where(live[:, s, None], h_new, h)
        hs[s + 1], zs[s], rs[s], cs[s] = h_new, z, r, c

    out = np.zeros((B, T, u))
    bi, si = np.nonzero(live)
    out[bi, order[bi, si]] = hs[1:][si, bi]

    def grad_fn(G):
        dA = np.zeros((B, S, 3 * u))
        dUzr = np.zeros_like(Uzr)
        dUh = np.zeros_like(Uh)
        dh = np.zeros((B, u))
        Gs = np.where(live[..., None], G[rows[:, None], order], 0.0)
        for s in range(S - 1, -1, -1):
            dh = dh + Gs[:, s]
            m = live[:, s, None]
            h, z, r, c = hs[s], zs[s], rs[s], cs[s]
            dl = np.where(m, dh, 0.0)
            dc_pre = dl * z * (1.0 - c * c)
            dz_pre = dl * (c - h) * z * (1.0 - z)
            dhp = dl * (1.0 - z)
            rh = r * h
            dUh += rh.T @ dc_pre
            drh = dc_pre @ Uh.T
            dr_pre = drh * h * r * (1.0 - r)
            dhp += drh * r
            dzr = np.concatenate([dz_pre, dr_pre], axis=1)
            dUzr += h.T @ dzr
            dhp += dzr @ Uzr.T
            dA[:, s, :2 * u] = dzr
            dA[:, s, 2 * u:] = dc_pre
            dh = np.where(m, dhp, dh)
        flat = dA.reshape(-1, 3 * u)
        dW = Xs.reshape(-1, d).T @ flat
        db = flat.sum(axis=0)
        return (
            dW[:, :u], dW[:, u:2 * u], dW[:, 2 * u:],
            dUzr[:, :u], dUzr[:, u:], dUh,
            db[:u], db[u:2 * u], db[2 * u:],
        )

    parents = tuple(getattr(p, n) for n in GRU_NAMES)
    return nx._emit(out, parents, grad_fn)


def _as_batch(X, mask):
    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(mask)
    single = X.ndim == 2
    if single:
        X, mask = X[None], mask[None]
    if mask.shape != X.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match sequence shape {X.shape[:2]}")
    return X, mask.astype(bool), single


def bigru_forward(X, mask, fwd_params: GruCellParams, bwd_params: GruCellParams) -> Tensor:
    """Bidirectional encoding over valid positions only; padded rows are zero.

    Accepts ``T x d`` or ``B x T x d`` input and returns matching ``... x 2u``.
    """
    X, mask, single = _as_batch(X, mask)
    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise nx.DegenerateInputError("bigru_forward needs at least one valid position per sequence")
    B, T = mask.shape
    S = int(lengths.max())
    # forward reads valid positions in order, backward in reverse order;
    # slots past a sample's length point at position 0 and are skipped
    fwd_order = np.zeros((B, S), dtype=np.intp)
    bwd_order = np.zeros((B, S), dtype=np.intp)
    for b in range(B):
        valid = np.flatnonzero(mask[b])
        fwd_order[b, : valid.size] = valid
        bwd_order[b, : valid.size] = valid[::-1]
    hf = gru_scan(X, fwd_order, lengths, fwd_params)
    hb = gru_scan(X, bwd_order, lengths, bwd_params)
    H = nx.concat([hf, hb], axis=-1)
    return H[0] if single else H


def attention(H, mask, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Additive self-attention; returns (context, alpha)."""
    H = nx._lift(H)
    single = H.data.ndim == 2
    if single:
        H = H.reshape(1, *H.shape)
        mask = np.asarray(mask)[None]
    B, T, _ = H.shape
    p = params.v_a.shape[0]
    proj = nx.tanh(H @ params.W_a + params.b_a)
    scores = (proj @ params.v_a.reshape(p, 1)).reshape(B, T)
    alpha = nx.masked_softmax(scores, mask)
    context = (alpha.reshape(B, T, 1) * H).sum(axis=1)
    if single:
        return context.reshape(-1), alpha.reshape(-1)
    return context, alpha


def mlp_head(context, meta, params: MlpParams) -> Tensor:
    """ReLU hidden layer over [context ; meta], then a single linear output."""
    context = nx._lift(context)
    meta = np.asarray(meta, dtype=np.float64)
    expected = params.W1.shape[0] - context.shape[-1]
    if meta.shape[-1] != expected:
        raise ShapeError(f"metadata width {meta.shape[-1]} does not match model width {expected}")
    inp = nx.concat([context, Tensor(meta)], axis=-1) if expected else context
    hidden = nx.relu(inp @ params.W1 + params.b1)
    return hidden @ params.W2 + params.b2


def _trim(X: np.ndarray, mask: np.ndarray):
    """Drop trailing all-padding columns so padded calls compute identically."""
    valid_cols = np.flatnonzero(mask.any(axis=0))
    if valid_cols.size == 0:
        raise nx.DegenerateInputError("empty mask")
    t_eff = int(valid_cols[-1]) + 1
    return X[:, :t_eff], mask[:, :t_eff]


def _meta_batch(meta_vec, B: int) -> np.ndarray:
    meta = np.asarray(meta_vec if meta_vec is not None else np.zeros(0), dtype=np.float64)
    if meta.ndim == 1:
        meta = np.broadcast_to(meta, (B, meta.shape[0]))
    return meta


def heads_forward(H, mask, meta, params: ModelParams) -> tuple[Tensor, Tensor, Tensor]:
    """Every attention head and MLP head evaluated together.

    Stacks the per-head parameters so all heads share a few large products.
    Returns ``(outputs B x k, alpha B x k x T, context B x k x 2u)``; each
    head matches :func:`attention` followed by its MLP.
    """
    heads = params.config.heads
    k, p = len(heads), params.config.attention_units
    B, T, width = H.shape
    att = [params.attention[h] for h in heads]
    W_a = nx.concat([a.W_a for a in att], axis=1)
    b_a = nx.concat([a.b_a for a in att], axis=0)
    v_a = nx.stack([a.v_a for a in att])
    proj = nx.tanh(H.reshape(B * T, width) @ W_a + b_a).reshape(B, T, k, p)
    scores = (proj * v_a).sum(axis=-1)
    alpha = nx.masked_softmax(nx.transpose(scores, (0, 2, 1)), mask[:, None, :])
    context = alpha @ H

    m = params.config.meta_width
    if meta.shape[-1] != m:
        raise ShapeError(f"metadata width {meta.shape[-1]} does not match model width {m}")
    mlps = [params.mlp[h] for h in heads]
    inp = nx.transpose(context, (1, 0, 2))
    if m:
        inp = nx.concat([inp, Tensor(np.broadcast_to(meta, (k, B, m)))], axis=-1)
    W1 = nx.stack([q.W1 for q in mlps])
    b1 = nx.stack([q.b1 for q in mlps]).reshape(k, 1, -1)
    W2 = nx.stack([q.W2 for q in mlps])
    b2 = nx.stack([q.b2 for q in mlps]).reshape(k, 1, 1)
    hidden = nx.relu(inp @ W1 + b1)
    out = (hidden @ W2 + b2).reshape(k, B)
    return nx.transpose(out, (1, 0)), alpha, context


def _run(X, mask, meta_vec, params: ModelParams):
    X, mask, single = _as_batch(X, mask)
    T_full = mask.shape[1]
    X, mask = _trim(X, mask)
    if X.shape[2] != params.config.d:
        raise ShapeError(f"embedding dim {X.shape[2]} does not match model d={params.config.d}")
    H = bigru_forward(X, mask, params.gru_fwd, params.gru_bwd)
    out, alpha, context = heads_forward(H, mask, _meta_batch(meta_vec, X.shape[0]), params)

    pad = T_full - H.shape[1]
    a = np.pad(alpha.data, [(0, 0), (0, 0), (0, pad)]) if pad else alpha.data
    trace = ForwardTrace(
        H=np.pad(H.data, [(0, 0), (0, pad), (0, 0)]) if pad else H.data,
        alphas={h: a[:, i] for i, h in enumerate(params.config.heads)},
        contexts={h: context.data[:, i] for i, h in enumerate(params.config.heads)},
    )
    return out, trace, single


def single_task_forward(X, mask, meta_vec, params: ModelParams) -> tuple[Tensor, ForwardTrace]:
    """Probability of competent delivery, shape (B,) or scalar for one session."""
    if params.mode != "single_task":
        raise ModeError(f"single_task_forward called with a {params.mode} model")
    logit, trace, single = _run(X, mask, meta_vec, params)
    p_hat = nx.sigmoid(logit).reshape(-1)
    trace.outputs = p_hat.data
    return (p_hat.reshape(()) if single else p_hat), trace


def multi_task_forward(X, mask, meta_vec, params: ModelParams) -> tuple[Tensor, ForwardTrace]:
    """Unclamped per-code scores, shape (B, 11) or (11,) for one session."""
    if params.mode != "multi_task":
        raise ModeError(f"multi_task_forward called with a {params.mode} model")
    scores, trace, single = _run(X, mask, meta_vec, params)
    trace.outputs = scores.data
    return (scores.reshape(len(CODES)) if single else scores), trace


def forward(X, mask, meta_vec, params: ModelParams):
    if params.mode == "single_task":
        return single_task_forward(X, mask, meta_vec, params)
    return multi_task_forward(X, mask, meta_vec, params)


def predict_total(scores) -> tuple[np.ndarray, float, int]:
    """Clamp per-code scores to [0, 6]; total is their sum, label is total >= 40."""
    clamped = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 6.0)
    total = float(clamped.sum())
    return clamped, total, int(total >= COMPETENCE_THRESHOLD)


def save_model(params: ModelParams, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "mode": params.mode,
        "config": asdict(params.config),
        "tensors": {
            p.name: {"shape": list(p.shape), "values": p.data.ravel().tolist()}
            for p in params.named_parameters()
        },
    }
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(doc))


def load_model(path, expected_mode: str | None = None) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not a valid model file ({e.msg})") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    config = ModelConfig(**doc["config"])
    if doc.get("mode") != config.mode:
        raise ModelFormatError(f"{path}: mode field disagrees with config")
    if expected_mode is not None and config.mode != expected_mode:
        raise ModeError(f"{path}: expected a {expected_mode} model, found {config.mode}")
    shapes = _param_shapes(config)
    tensors = doc["tensors"]
    if set(tensors) != set(shapes):
        raise ModelFormatError(f"{path}: tensor names do not match the configured architecture")
    arrays = {}
    for name, shape in shapes.items():
        t = tensors[name]
        values = np.asarray(t["values"], dtype=np.float64)
        if tuple(t["shape"]) != shape or values.size != int(np.prod(shape)):
            raise ModelFormatError(f"{path}: tensor {name} has inconsistent shape")
        arrays[name] = values.reshape(shape)
    return _assemble(config, arrays)
