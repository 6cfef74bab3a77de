"""Conditioning the sentence LSTM on preceding-sentence context.

Early fusion adds the projected context vector to the word input at every
timestep. Late fusion leaves the cell update untouched and gates the
projected context into the output: r = sigmoid(W_rp q + W_rc c + b_r),
h = o * tanh(c + r * q) with q = W_p p. Attention variants recompute the
context vector at each step, queried by the previous hidden state.

Two evaluation paths exist: a per-window path built from hooks into
``rlm.sentence_nll`` (the reference semantics) and a padded, masked batch
engine used by training and corpus evaluation. Tests hold them equal.
"""

from dataclasses import dataclass

import numpy as np

from . import context as ctx
from . import numeric as nm
from . import rlm
from .corpus import ContextWindow, Vocabulary, bow_vector
from .numeric import Tape, Variable
from .rlm import ContextHook, LstmState


@dataclass(frozen=True)
class Variant:
    tag: str
    context: str | None  # None | "bow" | "seqbow" | "att"
    fusion: str | None   # None | "early" | "late"


VARIANTS = {
    v.tag: v
    for v in (
        Variant("RLM", None, None),
        Variant("RLM-BoW-EF", "bow", "early"),
        Variant("RLM-SeqBoW-EF", "seqbow", "early"),
        Variant("RLM-SeqBoW-ATT-EF", "att", "early"),
        Variant("RLM-BoW-LF", "bow", "late"),
        Variant("RLM-SeqBoW-LF", "seqbow", "late"),
        Variant("RLM-SeqBoW-ATT-LF", "att", "late"),
    )
}


def parse_variant(tag: str) -> Variant:
    try:
        return VARIANTS[tag]
    except KeyError:
        raise ValueError(f"unknown variant {tag!r}; expected one of {sorted(VARIANTS)}")


def context_dim(variant: Variant, d_ctx: int) -> int:
    return 2 * d_ctx if variant.context == "att" else d_ctx


def init_parameters(variant: Variant, vocab_size: int, d_emb: int, d_h: int,
                    d_ctx: int, d_a: int, rng, dtype) -> dict[str, Variable]:
    """All trainable parameters for one model variant, in a stable order."""
    params = rlm.init_rlm_parameters(vocab_size, d_emb, d_h, rng, dtype)
    if variant.context is None:
        return params
    if variant.context == "bow":
        ctx.init_bow(params, vocab_size, d_ctx, rng, dtype)
    else:
        ctx.init_seqbow(params, vocab_size, d_ctx, variant.context == "att", rng, dtype)
    if variant.context == "att":
        ctx.init_attention(params, 2 * d_ctx, d_h, d_a, rng, dtype)
    d_target = d_emb if variant.fusion == "early" else d_h
    params["W_p"] = Variable(nm.uniform_init(rng, (context_dim(variant, d_ctx), d_target), dtype))
    if variant.fusion == "late":
        params["W_rp"] = Variable(nm.uniform_init(rng, (d_h, d_h), dtype))
        params["W_rc"] = Variable(nm.uniform_init(rng, (d_h, d_h), dtype))
        params["b_r"] = Variable(nm.uniform_init(rng, (d_h,), dtype))
    return params


# ---------------------------------------------------------------------------
# single-window operations
# ---------------------------------------------------------------------------


def early_fusion_input(word_id: int, p: Variable, params: dict[str, Variable],
                       tape: Tape | None = None) -> Variable:
    """Input vector for one timestep: embedding row plus projected context."""
    x = nm.embed_rows(tape, params["E"], np.array([word_id], dtype=np.int64))
    return nm.add(tape, x, nm.matmul(tape, p, params["W_p"]))


def _late_output(tape: Tape | None, params: dict[str, Variable], o: Variable,
                 c_new: Variable, q: Variable) -> Variable:
    pre = nm.add(tape, nm.matmul(tape, q, params["W_rp"]), nm.matmul(tape, c_new, params["W_rc"]))
    r = nm.sigmoid_v(tape, nm.add_bias(tape, pre, params["b_r"]))
    return nm.mul(tape, o, nm.tanh_v(tape, nm.add(tape, c_new, nm.mul(tape, r, q))))


def late_fusion_step(x: Variable, state: LstmState, p: Variable,
                     params: dict[str, Variable],
                     tape: Tape | None = None) -> tuple[LstmState, Variable]:
    """One decoder step with late fusion; the cell update is the plain LSTM's."""
    _, o, c_new = rlm.lstm_gates(tape, params, "", x, state)
    q = nm.matmul(tape, p, params["W_p"])
    h_new = _late_output(tape, params, o, c_new, q)
    return LstmState(h_new, c_new), h_new


class _EarlyHook(ContextHook):
    def __init__(self, extra: Variable):
        self.extra = extra

    def input_extra(self, tape, t, h_prev):
        return self.extra


class _LateHook(ContextHook):
    def __init__(self, params, q: Variable):
        self.params = params
        self.q = q

    def output(self, tape, t, o, c_new, h_prev):
        return _late_output(tape, self.params, o, c_new, self.q)


class _AttentionHook(ContextHook):
    """Recomputes the context vector each step, queried by h_{t-1}."""

    def __init__(self, params, annotations, early: bool):
        self.params = params
        self.annotations = annotations
        self.early = early

    def input_extra(self, tape, t, h_prev):
        if not self.early:
            return None
        p_t, _ = ctx.attend(self.annotations, h_prev, self.params, tape)
        return nm.matmul(tape, p_t, self.params["W_p"])

    def output(self, tape, t, o, c_new, h_prev):
        if self.early:
            return super().output(tape, t, o, c_new, h_prev)
        p_t, _ = ctx.attend(self.annotations, h_prev, self.params, tape)
        q = nm.matmul(tape, p_t, self.params["W_p"])
        return _late_output(tape, self.params, o, c_new, q)


def make_hook(variant: Variant, window: ContextWindow, params: dict[str, Variable],
              vocab: Vocabulary, tape: Tape | None) -> ContextHook | None:
    if variant.context is None:
        return None
    if variant.context == "att":
        annotations = ctx.annotate_bidirectional(window.context, vocab, params, tape)
        if not annotations:
            return None  # empty context: exact baseline reduction
        return _AttentionHook(params, annotations, variant.fusion == "early")
    if variant.context == "bow":
        p = ctx.encode_bow(window.context, vocab, params, tape)
    else:
        p = ctx.encode_seqbow(window.context, vocab, params, tape)
    proj = nm.matmul(tape, p, params["W_p"])
    if variant.fusion == "early":
        return _EarlyHook(proj)
    return _LateHook(params, proj)


def conditional_sentence_nll(window: ContextWindow, variant: Variant | str,
                             params: dict[str, Variable], vocab: Vocabulary,
                             tape: Tape | None = None, trace: dict | None = None) -> Variable:
    """Negative log-likelihood of the target sentence given its context window."""
    if isinstance(variant, str):
        variant = parse_variant(variant)
    hook = make_hook(variant, window, params, vocab, tape)
    return rlm.sentence_nll(window.target, params, hook, tape, trace)


# ---------------------------------------------------------------------------
# batched engine
# ---------------------------------------------------------------------------


@dataclass
class WindowBatch:
    inputs: np.ndarray            # (B,T) int64: BOS then content tokens, EOS-padded
    targets: np.ndarray           # (B,T) int64: content tokens then EOS, 0-padded
    mask: np.ndarray              # (B,T) float: 1 at predicted positions
    bow_sum: np.ndarray | None    # (B,V) summed context counts
    bow_seq: np.ndarray | None    # (K,B,V) per-sentence counts, left-padded
    ctx_mask: np.ndarray | None   # (B,K) float: 1 at real context positions

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def predicted_tokens(self) -> float:
        return float(self.mask.sum())


def make_batch(windows: list[ContextWindow], vocab: Vocabulary, variant: Variant,
               dtype) -> WindowBatch:
    B = len(windows)
    if B == 0:
        raise ValueError("empty batch")
    V = len(vocab)
    bos = V  # extra embedding row
    T = max(len(w.target.token_ids) for w in windows)
    inputs = np.full((B, T), 1, dtype=np.int64)  # EOS id as inert padding input
    targets = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=dtype)
    for b, w in enumerate(windows):
        ids = w.target.token_ids
        inputs[b, 0] = bos
        inputs[b, 1 : len(ids)] = ids[:-1]
        targets[b, : len(ids)] = ids
        mask[b, : len(ids)] = 1.0
    bow_sum = bow_seq = ctx_mask = None
    if variant.context == "bow":
        bow_sum = np.stack([bow_vector(w.context, vocab, dtype) for w in windows])
    elif variant.context in ("seqbow", "att"):
        K = max(len(w.context) for w in windows)
        bow_seq = np.zeros((K, B, V), dtype=dtype)
        ctx_mask = np.zeros((B, K), dtype=dtype)
        for b, w in enumerate(windows):
            off = K - len(w.context)
            for j, sent in enumerate(w.context):
                bow_seq[off + j, b] = bow_vector([sent], vocab, dtype)
                ctx_mask[b, off + j] = 1.0
    return WindowBatch(inputs, targets, mask, bow_sum, bow_seq, ctx_mask)


def _ctx_states(tape: Tape | None, params: dict[str, Variable], batch: WindowBatch,
                prefix: str, reverse: bool, dtype) -> list[Variable]:
    """Masked context-LSTM pass over the padded BoW sequence; one state per position."""
    K, B, _ = batch.bow_seq.shape
    d_ctx = params["P"].shape[1]
    states: list[Variable | None] = [None] * K
    state = rlm.zero_state(B, d_ctx, dtype)
    order = range(K - 1, -1, -1) if reverse else range(K)
    for k in order:
        x = nm.matmul(tape, Variable(batch.bow_seq[k]), params["P"])
        new = rlm.lstm_step(x, state, params, tape, prefix)
        m = batch.ctx_mask[:, k : k + 1]
        state = LstmState(
            nm.blend(tape, m, new.h, state.h), nm.blend(tape, m, new.c, state.c)
        )
        states[k] = state.h
    return states


def batch_nll(windows_or_batch, params: dict[str, Variable], variant: Variant | str,
              vocab: Vocabulary | None = None, tape: Tape | None = None,
              want_token_nll: bool = False):
    """Per-window NLL over a padded batch -> ((B,) Variable, (B,T) array | None).

    Padded positions contribute exactly zero to values and gradients; empty
    contexts reduce to the unconditioned model.
    """
    if isinstance(variant, str):
        variant = parse_variant(variant)
    if isinstance(windows_or_batch, WindowBatch):
        batch = windows_or_batch
    else:
        batch = make_batch(windows_or_batch, vocab, variant, params["E"].dtype)
    dtype = params["E"].dtype
    B, T = batch.inputs.shape
    d_h = params["b_i"].shape[0]

    extra = None      # early fusion: fixed projected context
    q = None          # late fusion: projected context entering the output gate
    annots = None     # attention: stacked annotations (K,B,2*d_ctx)
    za = None
    if variant.context == "bow":
        p = nm.matmul(tape, Variable(batch.bow_sum), params["P"])
    elif variant.context in ("seqbow", "att") and batch.bow_seq.shape[0] == 0:
        p = nm.zeros((B, context_dim(variant, params["P"].shape[1])), dtype)
    elif variant.context == "seqbow":
        fwd = _ctx_states(tape, params, batch, ctx.CTX_FWD, False, dtype)
        p = fwd[-1]
    elif variant.context == "att":
        fwd = _ctx_states(tape, params, batch, ctx.CTX_FWD, False, dtype)
        rev = _ctx_states(tape, params, batch, ctx.CTX_REV, True, dtype)
        per_pos = [nm.concat_cols(tape, [f, r]) for f, r in zip(fwd, rev)]
        annots = nm.stack_first(tape, per_pos)
        za = [nm.matmul(tape, z, params["W_a"]) for z in per_pos]
        p = None
    else:
        p = None
    if variant.context is not None and p is not None:
        proj = nm.matmul(tape, p, params["W_p"])
        if variant.fusion == "early":
            extra = proj
        else:
            q = proj

    v_col = nm.reshape(tape, params["v_a"], (-1, 1)) if annots is not None else None
    state = rlm.zero_state(B, d_h, dtype)
    total = nm.zeros((B,), dtype)
    token_nll = np.zeros((B, T), dtype=np.float64) if want_token_nll else None
    for t in range(T):
        x = nm.embed_rows(tape, params["E"], batch.inputs[:, t])
        if annots is not None:
            uq = nm.matmul(tape, state.h, params["U_a"])
            cols = [nm.matmul(tape, nm.tanh_v(tape, nm.add(tape, z, uq)), v_col) for z in za]
            alphas = nm.masked_softmax(tape, nm.concat_cols(tape, cols), batch.ctx_mask)
            p_t = nm.attention_mix(tape, alphas, annots)
            proj_t = nm.matmul(tape, p_t, params["W_p"])
            if variant.fusion == "early":
                x = nm.add(tape, x, proj_t)
            else:
                q = proj_t
        elif extra is not None:
            x = nm.add(tape, x, extra)
        _, o, c_new = rlm.lstm_gates(tape, params, "", x, state)
        if variant.fusion == "late" and q is not None:
            h_new = _late_output(tape, params, o, c_new, q)
        else:
            h_new = nm.mul(tape, o, nm.tanh_v(tape, c_new))
        logits = nm.add_bias(tape, nm.matmul(tape, h_new, params["W_out"]), params["b_out"])
        step = nm.nll_rows(tape, logits, batch.targets[:, t], batch.mask[:, t])
        total = nm.add(tape, total, step)
        if want_token_nll:
            token_nll[:, t] = step.value
        state = LstmState(h_new, c_new)
    return total, token_nll
