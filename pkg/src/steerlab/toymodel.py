"""Deterministic multi-layer recurrent toy language model with per-layer hooks.

State update per token t and layer l (layer 0 also receives the input embedding)::

    h[l, t] = tanh(A[l] @ h[l-1, t] + B[l] @ h[l, t-1] + b[l] + x_t * [l == 0])

with h[-1, t] = x_t, the token embedding (or the projected image features for
the image pseudo-token). Logits are W @ h[L-1, t].
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import container
from .errors import (
    BadDims,
    DidNotConverge,
    HookOutOfRange,
    MaxLenExceeded,
    NoGateOpenExamples,
    NumericalFailure,
    VersionMismatch,
)
from .steer import GateDecision, SteeringPolicy, decide_gate, gate_score, steering_energy, update_operator
from .trace import ActivationTrace, SpanAnnotation

CHECKPOINT_VERSION = "toymodel/1"
A_SPECTRAL = 0.95

# reserved token ids
PAD, BOS, EOS, REASON, ANSWER, IMG = range(6)
N_RESERVED = 6

Hook = Callable[[int, int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int = 256
    d: int = 64
    n_layers: int = 6
    image_dim: int = 16
    recurrent_scale: float = 0.8
    embed_scale: float = 1.0


@dataclass
class ToyModel:
    dims: ModelDims
    seed: int
    embed: np.ndarray  # V x d
    A: np.ndarray  # L x d x d
    B: np.ndarray  # L x d x d
    bias: np.ndarray  # L x d
    W: np.ndarray  # V x d
    image_adapter: np.ndarray  # d x image_dim

    @property
    def d(self) -> int:
        return self.dims.d

    @property
    def n_layers(self) -> int:
        return self.dims.n_layers

    @property
    def vocab_size(self) -> int:
        return self.dims.vocab_size

    def copy(self) -> "ToyModel":
        return replace(
            self,
            embed=self.embed.copy(),
            A=self.A.copy(),
            B=self.B.copy(),
            bias=self.bias.copy(),
            W=self.W.copy(),
            image_adapter=self.image_adapter.copy(),
        )


def _scaled_orthogonal(rng: np.random.Generator, d: int, scale: float) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    return scale * q


def init_model(seed: int = 0, dims: ModelDims | None = None) -> ToyModel:
    dims = dims or ModelDims()
    if dims.d < 1 or dims.n_layers < 1 or dims.image_dim < 1:
        raise BadDims(f"dimensions must be positive: {dims}")
    if dims.vocab_size < 16:
        raise BadDims(f"vocab_size must be at least 16, got {dims.vocab_size}")
    if not 0.0 <= dims.recurrent_scale < 1.0:
        raise BadDims("recurrent_scale must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    d, L = dims.d, dims.n_layers
    embed = dims.embed_scale * rng.standard_normal((dims.vocab_size, d)) / np.sqrt(d) * 2.0
    A = np.stack([_scaled_orthogonal(rng, d, A_SPECTRAL) for _ in range(L)])
    B = np.stack([_scaled_orthogonal(rng, d, dims.recurrent_scale) for _ in range(L)])
    bias = 0.05 * rng.standard_normal((L, d))
    W = 0.01 * rng.standard_normal((dims.vocab_size, d))
    adapter = rng.standard_normal((d, dims.image_dim)) * 2.0 / np.sqrt(dims.image_dim * d) * np.sqrt(d)
    return ToyModel(dims=dims, seed=seed, embed=embed, A=A, B=B, bias=bias, W=W, image_adapter=adapter)


def _input_vectors(model: ToyModel, tokens, image) -> np.ndarray:
    x = model.embed[np.asarray(tokens, dtype=np.int64)].copy()
    img_pos = [i for i, t in enumerate(tokens) if t == IMG]
    if img_pos:
        if image is None:
            raise BadDims("IMG token present without image features")
        feat = model.image_adapter @ np.asarray(image, dtype=np.float64)
        for i in img_pos:
            x[i] = feat
    return x


def step_layers(model: ToyModel, x_t: np.ndarray, prev: np.ndarray, t: int, hook: Hook | None) -> np.ndarray:
    """Advance every layer by one token; `prev` is L x d from the previous position."""
    out = np.empty_like(prev)
    below = x_t
    for layer in range(model.n_layers):
        pre = model.A[layer] @ below + model.B[layer] @ prev[layer] + model.bias[layer]
        if layer == 0:
            pre = pre + x_t
        h = np.tanh(pre)
        if hook is not None:
            h = np.asarray(hook(layer, t, h), dtype=np.float64)
        out[layer] = h
        below = h
    return out


def _interventions_hook(model: ToyModel, interventions: dict, n_tokens: int) -> Hook | None:
    if not interventions:
        return None
    for layer, step in interventions:
        if not (0 <= layer < model.n_layers and 0 <= step < n_tokens):
            raise HookOutOfRange(f"hook at layer {layer}, step {step} is outside the model/sequence")

    def hook(layer, t, h):
        rule = interventions.get((layer, t))
        if rule is None:
            return h
        if callable(rule):
            return rule(h)
        return np.asarray(rule, dtype=np.float64)

    return hook


def forward(model: ToyModel, tokens, image=None, hook: Hook | None = None, spans: SpanAnnotation | None = None) -> tuple[ActivationTrace, np.ndarray]:
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        raise BadDims("empty token sequence")
    x = _input_vectors(model, tokens, image)
    states = np.empty((model.n_layers, len(tokens), model.d))
    prev = np.zeros((model.n_layers, model.d))
    for t in range(len(tokens)):
        prev = step_layers(model, x[t], prev, t, hook)
        states[:, t] = prev
    logits = states[-1] @ model.W.T
    if not np.all(np.isfinite(states)):
        raise NumericalFailure("non-finite hidden state")
    return ActivationTrace(states=states, tokens=tokens, spans=spans), logits


def forward_with_hooks(model: ToyModel, tokens, interventions: dict | None = None, image=None, spans=None):
    """Forward pass where interventions map (layer, step) to a replacement vector or a transform."""
    hook = _interventions_hook(model, interventions or {}, len(tokens))
    return forward(model, tokens, image=image, hook=hook, spans=spans)


@dataclass
class Generation:
    tokens: tuple[int, ...]  # prompt + generated
    prompt_len: int
    spans: SpanAnnotation
    finished: bool
    trace: ActivationTrace | None = None
    end_state: np.ndarray | None = field(default=None, repr=False)

    @property
    def generated(self) -> tuple[int, ...]:
        return self.tokens[self.prompt_len:]

    def answer_tokens(self) -> tuple[int, ...]:
        return self.tokens[slice(*self.spans.ans)]

    def cot_tokens(self) -> tuple[int, ...]:
        return self.tokens[slice(*self.spans.cot)] if self.spans.has_cot else ()


def parse_structure(tokens, prompt_len: int) -> SpanAnnotation:
    """Locate Reasoning/Answer fields in the generated part; sentinels are excluded from spans."""
    gen = list(tokens[prompt_len:])
    end = gen.index(EOS) if EOS in gen else len(gen)
    body = gen[:end]
    if ANSWER in body:
        a = body.index(ANSWER)
        ans = (prompt_len + a + 1, prompt_len + end)
    else:
        a = end
        ans = (prompt_len + end, prompt_len + end)
    cot = None
    if REASON in body[:a]:
        r = body.index(REASON)
        cot = (prompt_len + r + 1, prompt_len + a)
    return SpanAnnotation(ans=ans, cot=cot)


def greedy_generate(
    model: ToyModel,
    prompt,
    max_len: int = 24,
    image=None,
    hook: Hook | None = None,
    capture_layer: int | None = None,
    on_prompt_end: Callable[[np.ndarray], None] | None = None,
    keep_trace: bool = False,
) -> Generation:
    """Greedy decoding. `hook` sees (layer, position, state) for the last prompt token
    and every generated token; `on_prompt_end` receives the unhooked L x d state
    stack of the final prompt token before any hook runs at that position."""
    prompt = tuple(int(t) for t in prompt)
    if not prompt:
        raise BadDims("empty prompt")
    x = _input_vectors(model, prompt, image)
    prev = np.zeros((model.n_layers, model.d))
    rows = []
    for t in range(len(prompt) - 1):
        prev = step_layers(model, x[t], prev, t, None)
        rows.append(prev)
    t = len(prompt) - 1
    if on_prompt_end is not None:
        plain = step_layers(model, x[t], prev, t, None)
        on_prompt_end(plain)
    prev = step_layers(model, x[t], prev, t, hook)
    rows.append(prev)
    tokens = list(prompt)
    finished = False
    for _ in range(max_len):
        nxt = int(np.argmax(model.W @ prev[-1]))
        tokens.append(nxt)
        if nxt == EOS:
            finished = True
            break
        t += 1
        prev = step_layers(model, model.embed[nxt], prev, t, hook)
        rows.append(prev)
    spans = parse_structure(tokens, len(prompt))
    trace = None
    if keep_trace:
        states = np.stack(rows, axis=1)
        # the final EOS token has no state of its own; trace covers tokens[:-1] when finished
        trace = ActivationTrace(states=states, tokens=tuple(tokens[: states.shape[1]]))
    return Generation(tokens=tuple(tokens), prompt_len=len(prompt), spans=spans, finished=finished, trace=trace)


def generate_structured(model: ToyModel, prompt, max_len: int = 24, image=None, hook: Hook | None = None) -> Generation:
    gen = greedy_generate(model, prompt, max_len=max_len, image=image, hook=hook)
    if not gen.finished:
        raise MaxLenExceeded(f"no end-of-sequence token within {max_len} steps")
    return gen


@dataclass(frozen=True)
class TrainingExample:
    """Teacher-forced sequence; `loss_from` is the first position whose next token is supervised.

    `weight` scales every supervised position of the example in the loss.
    """

    tokens: tuple[int, ...]
    loss_from: int
    image: np.ndarray | None = None
    weight: float = 1.0


def readout_features(model: ToyModel, examples: list[TrainingExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-layer states, next-token targets, and per-position weights of every supervised position."""
    feats, targets, weights = [], [], []
    for ex in examples:
        trace, _ = forward(model, ex.tokens, image=ex.image)
        top = trace.states[-1]
        for t in range(ex.loss_from, len(ex.tokens) - 1):
            feats.append(top[t])
            targets.append(ex.tokens[t + 1])
            weights.append(ex.weight)
    return np.array(feats), np.array(targets, dtype=np.int64), np.array(weights)


def fit_readout(model: ToyModel, examples: list[TrainingExample], steps: int, lr: float) -> ToyModel:
    """Full-batch gradient descent with momentum on the readout only (layers frozen)."""
    out = model.copy()
    if steps <= 0 or not examples:
        return out
    X, y, w = readout_features(model, examples)
    n = X.shape[0]
    W = out.W
    target = np.zeros((n, model.vocab_size))
    target[np.arange(n), y] = 1.0
    scale = (w / w.sum())[:, None]
    velocity = np.zeros_like(W)
    for _ in range(steps):
        logits = X @ W.T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = ((p - target) * scale).T @ X
        velocity = 0.9 * velocity - lr * grad
        W = W + velocity
    out.W = W
    return out


def plant_facts(
    model: ToyModel,
    examples: list[TrainingExample],
    steps: int = 500,
    lr: float = 0.05,
    check: Callable[[ToyModel], float] | None = None,
    min_accuracy: float = 0.95,
) -> ToyModel:
    """Fit the readout to reproduce the supplied sequences.

    `check` returns the fraction of planted records whose greedy answer span is
    reproduced; falling short of `min_accuracy` raises DidNotConverge.
    """
    planted = fit_readout(model, examples, steps, lr)
    if steps > 0 and check is not None:
        acc = check(planted)
        if acc < min_accuracy:
            raise DidNotConverge(f"answer reproduction {acc:.3f} < {min_accuracy} after {steps} steps")
    return planted


@dataclass(frozen=True)
class LossProbe:
    layer: int
    gradient: np.ndarray
    loss: float
    hidden: np.ndarray


def answer_loss(model: ToyModel, tokens, target: int, image=None, interventions=None) -> float:
    _, logits = forward_with_hooks(model, tokens, interventions, image=image)
    z = logits[-1]
    m = z.max()
    return float(np.log(np.exp(z - m).sum()) + m - z[target])


def hidden_loss_gradient(model: ToyModel, tokens, target: int, layer: int, image=None) -> LossProbe:
    """Gradient of the last-position cross-entropy w.r.t. the layer-`layer` last-token state."""
    trace, logits = forward(model, tokens, image=image)
    z = logits[-1]
    p = np.exp(z - z.max())
    p /= p.sum()
    loss = float(-np.log(p[target]))
    onehot = np.zeros_like(p)
    onehot[target] = 1.0
    g = model.W.T @ (p - onehot)
    for m in range(model.n_layers - 1, layer, -1):
        h = trace.states[m, -1]
        g = model.A[m].T @ (g * (1.0 - h * h))
    if not np.all(np.isfinite(g)):
        raise NumericalFailure("non-finite gradient")
    return LossProbe(layer=layer, gradient=g, loss=loss, hidden=trace.states[layer, -1].copy())


def loss_from_layer(model: ToyModel, trace: ActivationTrace, h: np.ndarray, layer: int, target: int) -> float:
    """Last-position loss when the layer-`layer` state at the final token is replaced by `h`.

    Only the final position above `layer` depends on that state, so the rest of
    the trace is reused as-is.
    """
    t = trace.states.shape[1] - 1
    below = np.asarray(h, dtype=np.float64)
    for m in range(layer + 1, model.n_layers):
        prev = trace.states[m, t - 1] if t > 0 else np.zeros(model.d)
        below = np.tanh(model.A[m] @ below + model.B[m] @ prev + model.bias[m])
    z = model.W @ below
    mx = z.max()
    return float(np.log(np.exp(z - mx).sum()) + mx - z[target])


def finite_difference_gradient(model: ToyModel, tokens, target: int, layer: int, image=None, eps: float = 1e-4) -> np.ndarray:
    """Central differences of the last-position loss w.r.t. the layer-`layer` last-token state."""
    base, _ = forward(model, tokens, image=image)
    h = base.states[layer, -1]
    g = np.empty(model.d)
    for i in range(model.d):
        e = np.zeros(model.d)
        e[i] = eps
        g[i] = (loss_from_layer(model, base, h + e, layer, target) - loss_from_layer(model, base, h - e, layer, target)) / (2 * eps)
    return g


@dataclass(frozen=True)
class LossExample:
    """Teacher-forced context whose next token is `target`; the gate reads position prompt_len - 1."""

    tokens: tuple[int, ...]
    target: int
    prompt_len: int
    image: np.ndarray | None = None

    @property
    def modality(self) -> str:
        return "qa" if self.image is None else "vqa"


@dataclass(frozen=True)
class TheoryCheckReport:
    layer: int
    gate_open_forget: np.ndarray
    gate_open_retain: np.ndarray
    s_forget: np.ndarray
    dl_forget: np.ndarray
    s_retain: np.ndarray
    dl_retain: np.ndarray
    mean_dl_forget: float
    mean_s_forget: float
    alpha_f: float
    mean_dl_retain: float
    eps_r: float

    def to_dict(self) -> dict:
        """Summary with undefined (NaN) statistics reported as None."""

        def num(x):
            return float(x) if np.isfinite(x) else None

        return {
            "layer": self.layer,
            "n_gate_open_forget": int(self.gate_open_forget.sum()),
            "n_gate_open_retain": int(self.gate_open_retain.sum()),
            "mean_dl_forget": num(self.mean_dl_forget),
            "mean_s_forget": num(self.mean_s_forget),
            "alpha_f": num(self.alpha_f),
            "mean_dl_retain": num(self.mean_dl_retain),
            "eps_r": num(self.eps_r),
        }


def _side(model, examples, artifacts, policy, layer, step_scale):
    opened, s_vals, dl_vals = [], [], []
    for ex in examples:
        trace, _ = forward(model, ex.tokens, image=ex.image)
        unlearn = artifacts[("unlearn_vqa" if ex.modality == "vqa" else "unlearn_qa", layer)]
        rrs = artifacts.get(("retain", layer)) if policy.use_rrs else None
        if policy.mode == "off":
            gate_open = False
        elif policy.use_rrs:
            h_end = trace.states[policy.scoring_layer, ex.prompt_len - 1]
            gate_open = decide_gate(gate_score(h_end, artifacts[("retain", policy.scoring_layer)]), policy.tau).open
        else:
            gate_open = True
        h = trace.states[layer, -1]
        dh = update_operator(h, GateDecision(score=0.0, open=gate_open), rrs, unlearn)
        n = np.linalg.norm(dh)
        if step_scale is not None and n > 0:
            dh = dh * (step_scale * np.linalg.norm(h) / n)
        base = loss_from_layer(model, trace, h, layer, ex.target)
        opened.append(gate_open)
        s_vals.append(steering_energy(h, rrs, unlearn))
        dl_vals.append(loss_from_layer(model, trace, h + dh, layer, ex.target) - base if gate_open else 0.0)
    return np.array(opened, dtype=bool), np.array(s_vals), np.array(dl_vals)


def run_theory_check(
    model: ToyModel,
    artifacts: dict,
    policy: SteeringPolicy,
    forget: list[LossExample],
    retain: list[LossExample],
    layer: int | None = None,
    step_scale: float | None = None,
) -> TheoryCheckReport:
    """Apply the first-order update at `layer` (default: the scoring layer) and measure exact loss changes.

    Forget examples carry the refusal target, retain examples the true target.
    `step_scale`, when given, rescales each update to step_scale * ||h||.
    Means, the fitted slope alpha_f, and eps_r = max |dL_R| / s use gate-open
    examples only.
    """
    layer = policy.scoring_layer if layer is None else layer
    fo, fs, fd = _side(model, forget, artifacts, policy, layer, step_scale)
    ro, rs, rd = _side(model, retain, artifacts, policy, layer, step_scale)
    if (forget and not fo.any()) or (retain and not ro.any()) or not (fo.any() or ro.any()):
        raise NoGateOpenExamples("the gate is closed on every example of a supplied set")
    nan = float("nan")
    mean_dl_f = float(fd[fo].mean()) if fo.any() else nan
    mean_s_f = float(fs[fo].mean()) if fo.any() else nan
    alpha_f = float(-(fs[fo] @ fd[fo]) / (fs[fo] @ fs[fo])) if fo.any() and fs[fo].any() else nan
    mean_dl_r = float(rd[ro].mean()) if ro.any() else nan
    pos = ro & (rs > 0)
    eps_r = float(np.max(np.abs(rd[pos]) / rs[pos])) if pos.any() else nan
    return TheoryCheckReport(
        layer=layer,
        gate_open_forget=fo,
        gate_open_retain=ro,
        s_forget=fs,
        dl_forget=fd,
        s_retain=rs,
        dl_retain=rd,
        mean_dl_forget=mean_dl_f,
        mean_s_forget=mean_s_f,
        alpha_f=alpha_f,
        mean_dl_retain=mean_dl_r,
        eps_r=eps_r,
    )


def save_model(path, model: ToyModel) -> None:
    meta = {"type": "toymodel", "version": CHECKPOINT_VERSION, "seed": model.seed, **model.dims.__dict__}
    blocks = {"embed": model.embed, "A": model.A, "B": model.B, "bias": model.bias, "W": model.W, "image_adapter": model.image_adapter}
    container.write(path, [{"meta": meta, "blocks": blocks}])


def load_model(path) -> ToyModel:
    (entry,) = container.read(path)
    meta, b = entry["meta"], entry["blocks"]
    if meta.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"unknown checkpoint version {meta.get('version')!r}")
    dims = ModelDims(**{k: meta[k] for k in ModelDims.__dataclass_fields__})
    return ToyModel(dims=dims, seed=meta["seed"], embed=b["embed"], A=b["A"], B=b["B"], bias=b["bias"], W=b["W"], image_adapter=b["image_adapter"])
