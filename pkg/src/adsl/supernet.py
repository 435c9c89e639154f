"""Weight-sharing supernet store, student extraction, and the forward pass.

A parameter store holds one transformer at fixed maximal dimensions. Every
candidate architecture of the store's sub-space is realized as a
``StudentView``: a set of contiguous leading slices (first rows/columns of
each matrix, leftmost heads, a deterministic layer subset). During training
a view aliases the store's buffers, so gradients written through one
subnetwork land in the shared scalars; ``materialize`` deep-copies a view
into a standalone model.

Attention projections are stored at width ``heads_max * head_dim`` rather
than the hidden width, so head slicing stays contiguous and each head keeps
its full dimension in every subnetwork. Layer norm statistics are always
computed over the sliced width, making every view a self-contained model.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import nnkernel as nn
from .costmodel import SEGMENT_TYPES
from .searchspace import ArchConfig, SubspaceSpec, validation_errors

LN_EPS = 1e-5

LAYER_STRATEGIES = ("alternate", "top", "alternate_top")

_LAYER_SUFFIXES = (
    "q_w", "q_b", "k_w", "k_b", "v_w", "v_b",
    "out_w", "out_b",
    "ffn_in_w", "ffn_in_b", "ffn_out_w", "ffn_out_b",
    "ln_attn_g", "ln_attn_b", "ln_ffn_g", "ln_ffn_b",
)


class SupernetError(ValueError):
    pass


def _emb_shapes(vocab: int, max_pos: int, d: int) -> dict[str, tuple[int, ...]]:
    return {
        "tok_emb": (vocab, d),
        "pos_emb": (max_pos, d),
        "seg_emb": (SEGMENT_TYPES, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }


def _layer_shapes(d: int, w: int, f: int) -> dict[str, tuple[int, ...]]:
    return {
        "q_w": (d, w), "q_b": (w,),
        "k_w": (d, w), "k_b": (w,),
        "v_w": (d, w), "v_b": (w,),
        "out_w": (w, d), "out_b": (d,),
        "ffn_in_w": (d, f), "ffn_in_b": (f,),
        "ffn_out_w": (f, d), "ffn_out_b": (d,),
        "ln_attn_g": (d,), "ln_attn_b": (d,),
        "ln_ffn_g": (d,), "ln_ffn_b": (d,),
    }


class ParamStore:
    """Dense weights (and matching gradient buffers) of one transformer."""

    def __init__(self, layers, d_hid, heads, head_dim, ffn_dim, vocab, max_pos,
                 dtype=np.float32):
        if min(layers, d_hid, heads, head_dim, ffn_dim, vocab, max_pos) < 1:
            raise SupernetError("all store dimensions must be >= 1")
        self.layers = layers
        self.d_hid = d_hid
        self.heads = heads
        self.head_dim = head_dim
        self.ffn_dim = ffn_dim
        self.vocab = vocab
        self.max_pos = max_pos
        self.dtype = np.dtype(dtype)
        self._data: dict[str, np.ndarray] = {}
        self._grad: dict[str, np.ndarray] = {}
        for name, shape in _emb_shapes(vocab, max_pos, d_hid).items():
            self._data[name] = np.zeros(shape, self.dtype)
        for i in range(layers):
            for suffix, shape in _layer_shapes(d_hid, self.attn_width, ffn_dim).items():
                self._data[f"layer{i}.{suffix}"] = np.zeros(shape, self.dtype)
        for name, arr in self._data.items():
            self._grad[name] = np.zeros_like(arr)

    @property
    def attn_width(self) -> int:
        return self.heads * self.head_dim

    def param_names(self) -> list[str]:
        return list(self._data)

    def data(self, name: str) -> np.ndarray:
        return self._data[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grad[name]

    def zero_grad(self) -> None:
        for g in self._grad.values():
            g.fill(0.0)

    def scalar_count(self) -> int:
        return sum(a.size for a in self._data.values())

    def init_random(self, seed: int, std: float = 0.02) -> None:
        """BERT-style init: gaussian weights and embeddings, unit gains, zero biases."""
        rng = np.random.default_rng(seed)
        for name, arr in self._data.items():
            if name.endswith(("_g",)):
                arr.fill(1.0)
            elif name.endswith("_b") and "emb" not in name:
                arr.fill(0.0)
            elif name in ("emb_ln_b",):
                arr.fill(0.0)
            else:
                arr[...] = rng.normal(0.0, std, size=arr.shape).astype(self.dtype)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.param_names():
            h.update(name.encode())
            h.update(self._data[name].tobytes())
        return h.hexdigest()

    def copy(self) -> "ParamStore":
        dup = self.__class__.__new__(self.__class__)
        dup.__dict__.update({k: v for k, v in self.__dict__.items()
                             if k not in ("_data", "_grad")})
        dup._data = {k: v.copy() for k, v in self._data.items()}
        dup._grad = {k: np.zeros_like(v) for k, v in self._data.items()}
        return dup


class SupernetParams(ParamStore):
    """Store at the maximal dimensions of one sub-space."""

    def __init__(self, spec: SubspaceSpec, vocab: int, max_pos: int, dtype=np.float32):
        top = spec.max_arch
        super().__init__(
            layers=top.layers, d_hid=top.hidden, heads=top.heads,
            head_dim=spec.head_dim, ffn_dim=top.ffn_dim,
            vocab=vocab, max_pos=max_pos, dtype=dtype,
        )
        self.spec = spec


class TeacherModel(ParamStore):
    """Frozen reference model; ``relation_heads`` drives the distillation re-split."""

    def __init__(self, layers, d_hid, heads, head_dim, ffn_dim, vocab, max_pos,
                 relation_heads=None, dtype=np.float32):
        super().__init__(layers, d_hid, heads, head_dim, ffn_dim, vocab, max_pos, dtype)
        self.relation_heads = relation_heads if relation_heads is not None else heads


class StudentModel(ParamStore):
    """A materialized (standalone) student."""

    def __init__(self, arch: ArchConfig, vocab, max_pos, dtype=np.float32):
        super().__init__(
            layers=arch.layers, d_hid=arch.hidden, heads=arch.heads,
            head_dim=arch.head_dim, ffn_dim=arch.ffn_dim,
            vocab=vocab, max_pos=max_pos, dtype=dtype,
        )
        self.arch = arch


def teacher_for_space(spec: SubspaceSpec, vocab: int, max_pos: int,
                      relation_heads: int | None = None, seed: int = 0,
                      dtype=np.float32) -> TeacherModel:
    """Randomly initialized teacher at the sub-space's maximal dimensions."""
    top = spec.max_arch
    teacher = TeacherModel(
        layers=top.layers, d_hid=top.hidden, heads=top.heads, head_dim=spec.head_dim,
        ffn_dim=top.ffn_dim, vocab=vocab, max_pos=max_pos,
        relation_heads=relation_heads, dtype=dtype,
    )
    teacher.init_random(seed)
    return teacher


def select_layers(total: int, keep: int, strategy: str) -> list[int]:
    """1-based layer positions retained when shrinking ``total`` layers to ``keep``.

    ``alternate`` drops odd positions in ascending order until ``keep``
    remain, repeating over the survivors if more must go; ``top`` keeps the
    first ``keep`` layers. ``alternate_top`` is the composite ablation
    strategy: alternate during supernet training, top at extraction -- this
    function returns the extraction-time (top) selection, and the trainer
    substitutes ``alternate`` on its side.
    """
    if strategy not in LAYER_STRATEGIES:
        raise SupernetError(f"unknown layer strategy {strategy!r}; expected one of {LAYER_STRATEGIES}")
    if not 1 <= keep <= total:
        raise SupernetError(f"cannot keep {keep} of {total} layers")
    if strategy in ("top", "alternate_top"):
        return list(range(1, keep + 1))
    kept = list(range(1, total + 1))
    while len(kept) > keep:
        n_drop = len(kept) - keep
        drop = set(kept[0::2][:n_drop])
        kept = [i for i in kept if i not in drop]
    return kept


def training_strategy(strategy: str) -> str:
    """Layer strategy actually used while the supernet trains."""
    return "alternate" if strategy == "alternate_top" else strategy


def _view_slices(arch: ArchConfig, store: ParamStore) -> dict[str, tuple[slice, ...]]:
    """Slice per embedding/per-layer suffix; leading-prefix on every axis."""
    emb_target = _emb_shapes(store.vocab, store.max_pos, arch.hidden)
    layer_target = _layer_shapes(arch.hidden, arch.attn_width, arch.ffn_dim)
    slices = {name: tuple(slice(0, n) for n in shape) for name, shape in emb_target.items()}
    slices.update({suffix: tuple(slice(0, n) for n in shape) for suffix, shape in layer_target.items()})
    return slices


@dataclass(frozen=True)
class StudentView:
    """Aliased slice set of a supernet realizing one architecture."""

    store: SupernetParams
    arch: ArchConfig
    layer_indices: tuple[int, ...]  # 1-based positions in the supernet stack

    def slice_map(self) -> dict[str, tuple[slice, ...]]:
        """Supernet parameter name -> the slice this view covers."""
        per_kind = _view_slices(self.arch, self.store)
        out = {name: per_kind[name] for name in _emb_shapes(1, 1, 1)}
        for idx in self.layer_indices:
            for suffix in _LAYER_SUFFIXES:
                out[f"layer{idx - 1}.{suffix}"] = per_kind[suffix]
        return out


def extract(supernet: SupernetParams, arch: ArchConfig, strategy: str = "alternate") -> StudentView:
    """Bottom-left view of ``arch`` inside the supernet; no copies."""
    reasons = validation_errors(arch, supernet.spec)
    if reasons:
        raise SupernetError(f"architecture not in sub-space {supernet.spec.name}: {'; '.join(reasons)}")
    indices = select_layers(supernet.layers, arch.layers, strategy)
    return StudentView(store=supernet, arch=arch, layer_indices=tuple(indices))


def materialize(view: StudentView) -> StudentModel:
    """Deep-copy a view into a standalone student; later supernet updates do not leak in."""
    store = view.store
    model = StudentModel(view.arch, vocab=store.vocab, max_pos=store.max_pos, dtype=store.dtype)
    per_kind = _view_slices(view.arch, store)
    for name in _emb_shapes(1, 1, 1):
        model._data[name][...] = store._data[name][per_kind[name]]
    for pos, idx in enumerate(view.layer_indices):
        for suffix in _LAYER_SUFFIXES:
            model._data[f"layer{pos}.{suffix}"][...] = store._data[f"layer{idx - 1}.{suffix}"][per_kind[suffix]]
    return model


@dataclass
class ForwardOutputs:
    """Last-layer pre-attention projections plus final hidden states."""

    q: nn.Tensor
    k: nn.Tensor
    v: nn.Tensor
    hidden: nn.Tensor
    logits: nn.Tensor | None = None

    @property
    def qkv(self) -> tuple[nn.Tensor, nn.Tensor, nn.Tensor]:
        return self.q, self.k, self.v


class _Resolved:
    __slots__ = ("d_hid", "heads", "head_dim", "attn_width", "vocab", "max_pos", "emb", "layers")


def _resolve(model) -> _Resolved:
    rv = _Resolved()
    if isinstance(model, StudentView):
        store, arch = model.store, model.arch
        rv.d_hid, rv.heads, rv.head_dim = arch.hidden, arch.heads, arch.head_dim
        rv.attn_width = arch.attn_width
        layer_ids = [i - 1 for i in model.layer_indices]
        per_kind = _view_slices(arch, store)
    elif isinstance(model, ParamStore):
        store = model
        rv.d_hid, rv.heads, rv.head_dim = store.d_hid, store.heads, store.head_dim
        rv.attn_width = store.attn_width
        layer_ids = list(range(store.layers))
        per_kind = None
    else:
        raise SupernetError(f"cannot run forward on {type(model).__name__}")
    rv.vocab, rv.max_pos = store.vocab, store.max_pos

    def wrap(name, kind):
        data, grad = store._data[name], store._grad[name]
        if per_kind is not None:
            sl = per_kind[kind]
            data, grad = data[sl], grad[sl]
        return nn.Tensor.param(data, grad)

    rv.emb = {name: wrap(name, name) for name in _emb_shapes(1, 1, 1)}
    rv.layers = [
        {suffix: wrap(f"layer{i}.{suffix}", suffix) for suffix in _LAYER_SUFFIXES}
        for i in layer_ids
    ]
    return rv


def forward(model, token_ids, want_logits: bool = False,
            head_count_override: int | None = None) -> ForwardOutputs:
    """Run the transformer; returns last-layer Q/K/V (concatenated heads,
    pre-attention), final hidden states, and optionally tied-embedding logits.
    """
    rv = _resolve(model)
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise SupernetError(f"token batch must be 2-d (batch, seq), got shape {ids.shape}")
    b, s = ids.shape
    if s > rv.max_pos:
        raise SupernetError(f"sequence length {s} exceeds max positions {rv.max_pos}")
    if ids.size and (ids.min() < 0 or ids.max() >= rv.vocab):
        raise SupernetError(f"token id outside [0, {rv.vocab})")
    heads = head_count_override if head_count_override is not None else rv.heads
    if heads < 1 or rv.attn_width % heads:
        raise SupernetError(f"head count {heads} does not divide attention width {rv.attn_width}")
    hd = rv.attn_width // heads

    x = nn.reshape(nn.gather_rows(rv.emb["tok_emb"], ids.reshape(-1)), (b, s, rv.d_hid))
    x = nn.add(x, nn.gather_rows(rv.emb["pos_emb"], np.arange(s)))
    x = nn.add(x, nn.reshape(nn.gather_rows(rv.emb["seg_emb"], np.zeros(1, dtype=np.int64)), (rv.d_hid,)))
    x = nn.layer_norm(x, rv.emb["emb_ln_g"], rv.emb["emb_ln_b"], eps=LN_EPS)

    q = k = v = None
    for lp in rv.layers:
        q = nn.add(nn.matmul(x, lp["q_w"]), lp["q_b"])
        k = nn.add(nn.matmul(x, lp["k_w"]), lp["k_b"])
        v = nn.add(nn.matmul(x, lp["v_w"]), lp["v_b"])
        qh = nn.permute(nn.reshape(q, (b, s, heads, hd)), (0, 2, 1, 3))
        kh = nn.permute(nn.reshape(k, (b, s, heads, hd)), (0, 2, 1, 3))
        vh = nn.permute(nn.reshape(v, (b, s, heads, hd)), (0, 2, 1, 3))
        scores = nn.scale(nn.matmul(qh, nn.swap_last2(kh)), 1.0 / math.sqrt(hd))
        ctx = nn.matmul(nn.softmax_rows(scores), vh)
        ctx = nn.reshape(nn.permute(ctx, (0, 2, 1, 3)), (b, s, rv.attn_width))
        attn_out = nn.add(nn.matmul(ctx, lp["out_w"]), lp["out_b"])
        x = nn.layer_norm(nn.add(x, attn_out), lp["ln_attn_g"], lp["ln_attn_b"], eps=LN_EPS)
        inner = nn.relu(nn.add(nn.matmul(x, lp["ffn_in_w"]), lp["ffn_in_b"]))
        ffn_out = nn.add(nn.matmul(inner, lp["ffn_out_w"]), lp["ffn_out_b"])
        x = nn.layer_norm(nn.add(x, ffn_out), lp["ln_ffn_g"], lp["ln_ffn_b"], eps=LN_EPS)

    logits = nn.matmul(x, nn.swap_last2(rv.emb["tok_emb"])) if want_logits else None
    return ForwardOutputs(q=q, k=k, v=v, hidden=x, logits=logits)


def init_from_teacher(spec: SubspaceSpec, teacher: TeacherModel,
                      dtype=None) -> SupernetParams:
    """Supernet whose every tensor is the leading slice of the teacher's.

    Layers are taken by alternate selection from the teacher stack; rows and
    columns are leading prefixes on every axis. The teacher must dominate
    the supernet on every axis.
    """
    top = spec.max_arch
    checks = [
        ("layer", teacher.layers, top.layers),
        ("hidden", teacher.d_hid, top.hidden),
        ("attention", teacher.attn_width, top.attn_width),
        ("ffn", teacher.ffn_dim, top.ffn_dim),
    ]
    for axis, have, need in checks:
        if have < need:
            raise SupernetError(
                f"teacher too small on {axis} axis: has {have}, supernet needs {need}"
            )
    sup = SupernetParams(spec, vocab=teacher.vocab, max_pos=teacher.max_pos,
                         dtype=dtype or teacher.dtype)
    per_kind = _view_slices(top, teacher)
    for name in _emb_shapes(1, 1, 1):
        sup._data[name][...] = teacher._data[name][per_kind[name]]
    src_layers = select_layers(teacher.layers, sup.layers, "alternate")
    for pos, src in enumerate(src_layers):
        for suffix in _LAYER_SUFFIXES:
            sup._data[f"layer{pos}.{suffix}"][...] = teacher._data[f"layer{src - 1}.{suffix}"][per_kind[suffix]]
    return sup
