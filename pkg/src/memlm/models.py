"""The five model variants over a shared LSTM trunk.

Per step every variant runs embedding -> LSTM -> a variant-specific read of a
sliding memory of recent outputs -> vocabulary softmax:

  lstm       logits straight from the LSTM output (no combiner).
  attention  memory of the previous L full outputs; scores and context both
             use those outputs; combiner mixes the read with the current output.
  kv         output split in half: keys score the memory, values form the
             context and feed the combiner.
  kvp        output split in thirds: keys score, values form the context, the
             predict part feeds the combiner and is never stored.
  ngram      no attention; designated slices of the current and previous N-2
             outputs are concatenated and projected.

Parameters are plain tensors; gradients flow within one unroll window, while
state carried across windows is detached (truncated BPTT).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import LstmParams, Tensor
from .errors import ConfigError

VARIANTS = ("lstm", "attention", "kv", "kvp", "ngram")
ATTENTIVE_VARIANTS = ("attention", "kv", "kvp")


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    vocab_size: int
    embed_dim: int            # w
    hidden_dim: int           # k, the LSTM output size
    window: int = 1           # L, attentive variants only
    order: int = 2            # N, ngram only

    def validate(self):
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"unknown variant {self.variant!r} (choose from {'/'.join(VARIANTS)})")
        if self.vocab_size < 1:
            problems.append("vocab_size must be >= 1")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            problems.append("embed_dim and hidden_dim must be >= 1")
        if self.variant == "kv" and self.hidden_dim % 2:
            problems.append(f"key-value needs an even hidden size, got {self.hidden_dim}")
        if self.variant == "kvp" and self.hidden_dim % 3:
            problems.append(f"key-value-predict needs a hidden size divisible by 3, "
                            f"got {self.hidden_dim}")
        if self.variant == "ngram":
            if self.order < 2:
                problems.append(f"ngram order must be >= 2, got {self.order}")
            elif self.hidden_dim % (self.order - 1):
                problems.append(f"{self.order}-gram needs a hidden size divisible by "
                                f"{self.order - 1}, got {self.hidden_dim}")
        if self.variant in ATTENTIVE_VARIANTS and self.window < 1:
            problems.append(f"attention window must be >= 1, got {self.window}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def attentive(self):
        return self.variant in ATTENTIVE_VARIANTS

    @property
    def part_dim(self):
        """Width of one split part; also the output-head input width."""
        if self.variant == "kv":
            return self.hidden_dim // 2
        if self.variant == "kvp":
            return self.hidden_dim // 3
        if self.variant == "ngram":
            return self.hidden_dim // (self.order - 1)
        return self.hidden_dim


@dataclass
class AttentionParams:
    """Projections of the memory read: score side (wy, wh, w) and combiner (wr, wx)."""
    wy: Tensor
    wh: Tensor
    w: Tensor
    wr: Tensor
    wx: Tensor


@dataclass
class NgramParams:
    wn: Tensor  # (d, (N-1)*d)


@dataclass
class OutputParams:
    w: Tensor   # (V, d)
    b: Tensor   # (V,)


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: Tensor
    lstm: LstmParams
    out: OutputParams
    attn: AttentionParams | None = None
    ngram: NgramParams | None = None

    def named(self) -> dict[str, Tensor]:
        """Stable name -> tensor map; insertion order is the checkpoint order."""
        items = {
            "embedding": self.embedding,
            "lstm.wx": self.lstm.wx,
            "lstm.wh": self.lstm.wh,
            "lstm.b": self.lstm.b,
        }
        if self.attn is not None:
            items.update({"attn.wy": self.attn.wy, "attn.wh": self.attn.wh,
                          "attn.w": self.attn.w, "attn.wr": self.attn.wr,
                          "attn.wx": self.attn.wx})
        if self.ngram is not None:
            items["ngram.wn"] = self.ngram.wn
        items["out.w"] = self.out.w
        items["out.b"] = self.out.b
        return items

    def tensors(self):
        return list(self.named().values())

    @property
    def dtype(self):
        return self.embedding.dtype


INIT_RANGE = (-0.1, 0.1)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Uniform (-0.1, 0.1) draws from one Philox stream, forget-gate bias 1."""
    config.validate()
    draw = ag.uniform_stream(seed)
    lo, hi = INIT_RANGE
    k, w, v, d = config.hidden_dim, config.embed_dim, config.vocab_size, config.part_dim

    embedding = draw((v, w), lo, hi, dtype)
    lstm = LstmParams(draw((4 * k, w), lo, hi, dtype),
                      draw((4 * k, k), lo, hi, dtype),
                      draw((4 * k,), lo, hi, dtype))
    lstm.b.data[k:2 * k] = 1.0
    attn = ngram = None
    if config.attentive:
        attn = AttentionParams(draw((d, d), lo, hi, dtype), draw((d, d), lo, hi, dtype),
                               draw((d,), lo, hi, dtype), draw((d, d), lo, hi, dtype),
                               draw((d, d), lo, hi, dtype))
    elif config.variant == "ngram":
        ngram = NgramParams(draw((d, (config.order - 1) * d), lo, hi, dtype))
    out = OutputParams(draw((v, d), lo, hi, dtype), draw((v,), lo, hi, dtype))
    return ModelParams(config, embedding, lstm, out, attn, ngram)


# ---------------------------------------------------------------------------
# parameter accounting


def count_params(config: ModelConfig) -> tuple[int, int]:
    """(theta_M, theta_WM): trainable scalar counts without / with embeddings."""
    k, w, v, d = config.hidden_dim, config.embed_dim, config.vocab_size, config.part_dim
    theta = 4 * k * (w + k + 1)          # LSTM gates
    if config.attentive:
        theta += 4 * d * d + d           # wy, wh, wr, wx, w
    elif config.variant == "ngram":
        theta += d * (config.order - 1) * d
    theta += v * d + v                   # output matrix and bias
    return theta, theta + v * w


def match_hidden_size(variant: str, embed_dim: int, vocab_size: int, budget: float,
                      order: int = 2, window: int = 1) -> tuple[int, int]:
    """Hidden size whose theta_M lands nearest the budget, plus that count.

    Scans multiples of the variant's divisibility step; theta_M is strictly
    increasing in k, so the scan stops one step past the budget.
    """
    step = {"lstm": 1, "attention": 1, "kv": 2, "kvp": 3,
            "ngram": max(order - 1, 1)}.get(variant)
    if step is None:
        raise ConfigError(f"unknown variant {variant!r}")

    def theta(k):
        cfg = ModelConfig(variant, vocab_size, embed_dim, k, window=window, order=order)
        return count_params(cfg)[0]

    if theta(step) > budget:
        raise ConfigError(
            f"budget {budget:.3g} is below the minimum feasible {variant} model "
            f"(theta_M={theta(step)} at hidden size {step})")
    k = step
    best_k, best_diff = step, abs(theta(step) - budget)
    while True:
        k += step
        t = theta(k)
        diff = abs(t - budget)
        if diff < best_diff:
            best_k, best_diff = k, diff
        if t > budget:
            break
    return best_k, theta(best_k)


# ---------------------------------------------------------------------------
# sliding memory


class SlidingMemory:
    """Ring of the most recent per-step (key, value) pairs, oldest first.

    Entries carry a per-stream validity mask; an article reset invalidates a
    stream's slots rather than shifting them, so attention simply masks them
    out. Key projections through wy are cached per entry because wy is fixed
    within an unroll window.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"memory capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.keys: list[Tensor] = []
        self.values: list[Tensor] = []
        self.valid: list[np.ndarray] = []
        self.projected: list[Tensor | None] = []

    def __len__(self):
        return len(self.keys)

    def append(self, key: Tensor, value: Tensor | None = None,
               projected: Tensor | None = None):
        if value is None:
            value = key
        if key.data.ndim == 1:
            key = _lift_row(key)
            value = _lift_row(value) if value is not key else key
        if len(self.keys) == self.capacity:
            self.keys.pop(0)
            self.values.pop(0)
            self.valid.pop(0)
            self.projected.pop(0)
        self.keys.append(key)
        self.values.append(value)
        self.valid.append(np.ones(key.shape[0], dtype=bool))
        self.projected.append(projected)

    def invalidate(self, rows: np.ndarray):
        """Clear the memory of every stream flagged in rows."""
        for mask in self.valid:
            mask[rows] = False

    def valid_matrix(self) -> np.ndarray:
        return np.stack(self.valid, axis=1) if self.keys else np.zeros((0, 0), dtype=bool)

    def copy(self) -> "SlidingMemory":
        dup = SlidingMemory(self.capacity)
        dup.keys = list(self.keys)
        dup.values = list(self.values)
        dup.valid = [v.copy() for v in self.valid]
        dup.projected = list(self.projected)
        return dup

    def detached(self) -> "SlidingMemory":
        """Entries become constants; cached projections are dropped so they
        are rebuilt against the post-update parameters."""
        dup = SlidingMemory(self.capacity)
        for key, value, valid in zip(self.keys, self.values, self.valid):
            kd = key.detach()
            dup.keys.append(kd)
            dup.values.append(kd if value is key else value.detach())
            dup.valid.append(valid.copy())
            dup.projected.append(None)
        return dup


def _lift_row(v: Tensor) -> Tensor:
    return ag._result(v.data[None, :], (v,), lambda g: ag._accum(v, g[0]))


def _squeeze_row(m: Tensor) -> Tensor:
    return ag._result(m.data[0], (m,), lambda g: ag._accum(m, g[None, :]))


@dataclass
class AttentionTrace:
    """Per-step attention rows, left-padded to the window size.

    alphas[t] is (batch, L) with column L-1 the most recent slot; mask[t]
    flags slots that were real, valid memory entries at that step.
    """
    window: int
    alphas: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)

    def record(self, alpha: np.ndarray | None, valid: np.ndarray | None, batch: int):
        full_a = np.zeros((batch, self.window), dtype=np.float64)
        full_m = np.zeros((batch, self.window), dtype=bool)
        if alpha is not None and alpha.shape[1]:
            width = alpha.shape[1]
            full_a[:, self.window - width:] = alpha
            full_m[:, self.window - width:] = valid
        self.alphas.append(full_a)
        self.masks.append(full_m)


# ---------------------------------------------------------------------------
# carried state


@dataclass
class CarriedState:
    h: Tensor
    c: Tensor
    memory: SlidingMemory | None = None
    recent: list[Tensor] = field(default_factory=list)  # ngram output queue

    def copy(self):
        return CarriedState(self.h, self.c,
                            self.memory.copy() if self.memory is not None else None,
                            list(self.recent))

    def detached(self):
        return CarriedState(self.h.detach(), self.c.detach(),
                            self.memory.detached() if self.memory is not None else None,
                            [t.detach() for t in self.recent])


def init_state(config: ModelConfig, batch_size: int, dtype=np.float32) -> CarriedState:
    k = config.hidden_dim
    state = CarriedState(ag.zeros((batch_size, k), dtype), ag.zeros((batch_size, k), dtype))
    if config.attentive:
        state.memory = SlidingMemory(config.window)
    return state


# ---------------------------------------------------------------------------
# variant steps


def _attentive_read(query, combine, memory: SlidingMemory, attn: AttentionParams):
    """Shared score/read/combine path behind all three attentive variants.

    Returns (h_star, alpha, valid) where alpha is (B, len(memory)) oldest
    first, or None when the memory holds no entries at all.
    """
    if len(memory) == 0:
        return ag.tanh(ag.matmul(combine, attn.wx, transpose_b=True)), None, None
    q = ag.matmul(query, attn.wh, transpose_b=True)
    scores = []
    for j in range(len(memory)):
        if memory.projected[j] is None:
            memory.projected[j] = ag.matmul(memory.keys[j], attn.wy, transpose_b=True)
        scores.append(ag.matvec(ag.tanh(ag.add(memory.projected[j], q)), attn.w))
    valid = memory.valid_matrix()
    alpha = ag.masked_softmax(ag.stack_cols(scores), valid, allow_empty=True)
    read = None
    for j in range(len(memory)):
        part = ag.mul(memory.values[j], ag.slice_cols(alpha, j, j + 1))
        read = part if read is None else ag.add(read, part)
    h_star = ag.tanh(ag.add(ag.matmul(read, attn.wr, transpose_b=True),
                            ag.matmul(combine, attn.wx, transpose_b=True)))
    return h_star, alpha, valid


def _step_parts(variant: str, h: Tensor):
    """(query, combine, store_key, store_value) for one variant's step."""
    if variant == "attention":
        return h, h, h, h
    if variant == "kv":
        if h.shape[-1] % 2:
            raise ValueError(f"key-value step needs an even vector, got {h.shape[-1]}")
        key, value = ag.split_cols(h, 2)
        return key, value, key, value
    if variant == "kvp":
        if h.shape[-1] % 3:
            raise ValueError(f"key-value-predict step needs a length divisible by 3, "
                             f"got {h.shape[-1]}")
        key, value, predict = ag.split_cols(h, 3)
        return key, predict, key, value
    raise ValueError(f"variant {variant!r} has no attention step")


def _single(fn):
    """Lift a vector instance to batch 1, run, and squeeze back."""
    def wrapper(h, memory, attn):
        squeeze = h.data.ndim == 1
        if squeeze:
            h = _lift_row(h)
        h_star, alpha, _ = fn(h, memory, attn)
        if squeeze:
            h_star = _squeeze_row(h_star)
            alpha = _squeeze_row(alpha) if alpha is not None else None
        return h_star, alpha
    return wrapper


@_single
def attention_step(h, memory, attn):
    """Plain attention over the previous outputs; empty memory skips the read."""
    query, combine, _, _ = _step_parts("attention", h)
    return _attentive_read(query, combine, memory, attn)


@_single
def key_value_step(h, memory, attn):
    """Scores from stored keys, context from stored values."""
    query, combine, _, _ = _step_parts("kv", h)
    return _attentive_read(query, combine, memory, attn)


@_single
def key_value_predict_step(h, memory, attn):
    """Like key-value, but the combiner sees only the predict part."""
    query, combine, _, _ = _step_parts("kvp", h)
    return _attentive_read(query, combine, memory, attn)


def ngram_step(outputs: list[Tensor], params: NgramParams) -> Tensor:
    """Project the concatenation of designated slices of recent outputs.

    outputs lists LSTM outputs most recent first (current step at index 0);
    part i comes from the output i-1 steps back. Missing history is zero.
    The order is implied by the projection shape: wn is (d, (N-1)*d).
    """
    d, cols = params.wn.shape
    if cols % d:
        raise ValueError(f"ngram projection shape {params.wn.shape} is not (d, parts*d)")
    parts = cols // d
    k = parts * d
    squeeze = outputs and outputs[0].data.ndim == 1
    lifted = [_lift_row(t) if t.data.ndim == 1 else t for t in outputs]
    for t in lifted:
        if t.shape[-1] != k:
            raise ValueError(f"ngram output width {t.shape[-1]} does not match "
                             f"{parts} parts of {d}")
    batch = lifted[0].shape[0] if lifted else 1
    dtype = params.wn.dtype
    pieces = []
    for i in range(parts):
        if i < len(lifted):
            pieces.append(ag.slice_cols(lifted[i], i * d, (i + 1) * d))
        else:
            pieces.append(Tensor(np.zeros((batch, d), dtype=dtype)))
    h_star = ag.tanh(ag.matmul(ag.concat_cols(pieces), params.wn, transpose_b=True))
    return _squeeze_row(h_star) if squeeze else h_star


def predict_distribution(h_star: Tensor, out: OutputParams) -> Tensor:
    """Vocabulary distribution softmax(W* h + b)."""
    squeeze = h_star.data.ndim == 1
    if squeeze:
        h_star = _lift_row(h_star)
    probs = ag.softmax_rows(ag.add_rowvec(ag.matmul(h_star, out.w, transpose_b=True), out.b))
    return _squeeze_row(probs) if squeeze else probs


# ---------------------------------------------------------------------------
# sequence engine


@dataclass
class ForwardResult:
    logits: list[Tensor]          # one (B, V) tensor per step
    state: CarriedState
    trace: AttentionTrace | None = None


def forward_sequence(params: ModelParams, inputs: np.ndarray,
                     state: CarriedState | None = None,
                     resets: np.ndarray | None = None,
                     collect_trace: bool = False) -> ForwardResult:
    """Run one window: embed, recur, read memory, and emit per-step logits.

    The incoming state is not mutated; sliding memory is copied on entry.
    Resets flag input positions where an article begins: the affected
    streams' hidden state, memory, and output queue are cleared before the
    token is consumed.
    """
    config = params.config
    inputs = np.asarray(inputs)
    if inputs.ndim != 2:
        raise ValueError(f"inputs must be (batch, steps), got shape {inputs.shape}")
    batch, steps = inputs.shape
    if inputs.size and (inputs.min() < 0 or inputs.max() >= config.vocab_size):
        raise ValueError(f"input id out of range for vocabulary of {config.vocab_size}")
    if resets is None:
        resets = np.zeros_like(inputs, dtype=bool)

    dtype = params.dtype
    if state is None:
        state = init_state(config, batch, dtype)
    h, c = state.h, state.c
    memory = state.memory.copy() if state.memory is not None else None
    recent = list(state.recent)
    trace = AttentionTrace(config.window) if (collect_trace and config.attentive) else None

    logits_steps = []
    for t in range(steps):
        flags = resets[:, t]
        if flags.any():
            keep = Tensor((~flags).astype(dtype)[:, None])
            h = ag.mul(h, keep)
            c = ag.mul(c, keep)
            if memory is not None:
                memory.invalidate(flags)
            if recent:
                recent = [ag.mul(r, keep) for r in recent]

        x = ag.gather_rows(params.embedding, inputs[:, t])
        h, c = ag.lstm_cell(x, h, c, params.lstm)

        if config.attentive:
            query, combine, store_k, store_v = _step_parts(config.variant, h)
            h_star, alpha, valid = _attentive_read(query, combine, memory, params.attn)
            if trace is not None:
                trace.record(None if alpha is None else alpha.data, valid, batch)
            proj = ag.matmul(store_k, params.attn.wy, transpose_b=True)
            memory.append(store_k, store_v, projected=proj)
        elif config.variant == "ngram":
            h_star = ngram_step([h] + recent[::-1], params.ngram)
            if config.order > 2:
                recent.append(h)
                if len(recent) > config.order - 2:
                    recent.pop(0)
        else:
            h_star = h

        logits_steps.append(ag.add_rowvec(
            ag.matmul(h_star, params.out.w, transpose_b=True), params.out.b))

    return ForwardResult(logits_steps, CarriedState(h, c, memory, recent), trace)
