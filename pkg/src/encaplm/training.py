"""Gradient-descent training loop with constraint projection and decay.

One step: (optionally) refresh the module weights from curvature estimates,
run the forward pass, assemble

    total = cross_entropy + mix_consensus * consensus + mix_laplacian * laplacian,

backpropagate once, take a vanilla gradient step on every parameter
(including the per-layer alpha vectors), clamp-and-renormalize each alpha
back onto the simplex, and shrink the remaining parameters by
``1 - lambda_decay``.  Alpha decay is omitted by default because a uniform
rescale followed by renormalization is the identity; ``decay_alpha`` turns
it on in the scale-before-project form for anyone who wants the knob.

Checkpoints are canonical JSON (sorted keys, shortest-roundtrip floats), so
a fixed (seed, corpus, configs) triple reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor
from .encapsulation import (
    consensus_loss,
    curvature_estimate,
    curvature_weights,
    divergence_diagnostic,
    laplacian_loss,
    project_simplex,
)
from .model import (
    ModelConfig,
    Vocabulary,
    encapsulation_layer,
    forward_batch,
    init_params,
    layer_inputs,
    param_shapes,
    tokenizer_build,
)

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, version-mismatched, or config-inconsistent checkpoint."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    lambda_penalty: float = 1e-3
    lambda_decay: float = 1e-4
    lambda_laplacian: float = 0.0
    beta: float = 1.0
    curvature_probes: int = 4
    curvature_refresh_every: int = 50
    mix_consensus: float = 0.1
    mix_laplacian: float = 0.0
    eval_every: int = 100
    laplacian_coord_sample: int = 64
    decay_alpha: bool = False

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lambda_penalty", "lambda_decay", "lambda_laplacian",
                     "mix_consensus", "mix_laplacian", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.curvature_probes < 1:
            raise ValueError(f"curvature_probes must be >= 1, got {self.curvature_probes}")
        if self.curvature_refresh_every < 0:
            raise ValueError("curvature_refresh_every must be >= 0 (0 disables refresh)")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        return self


@dataclass
class TrainState:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, Tensor]
    vocab: Vocabulary
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


@dataclass
class StepReport:
    step: int
    total: float
    ce: float
    consensus: float
    laplacian: float
    alpha: list
    curvature: list | None
    wall_ms: float


def _alpha_names(config: ModelConfig) -> list[str]:
    return [f"layer{k}.alpha" for k in range(config.layers)] if config.encapsulation else []


def refresh_alpha_from_curvature(state: TrainState, batch_x: np.ndarray) -> list:
    """Reset every layer's alpha to the curvature softmax computed on the
    current batch's layer inputs; returns the per-layer estimates."""
    cfg, tc = state.model_config, state.train_config
    xs = layer_inputs(cfg, state.params, batch_x)
    estimates = []
    chunk = batch_x.shape[1]
    for k in range(cfg.layers):
        view = encapsulation_layer(cfg, state.params, k, chunk)
        est = curvature_estimate(view, Tensor(xs[k]), probes=tc.curvature_probes, seed=tc.seed)
        state.params[f"layer{k}.alpha"].data[:] = curvature_weights(est, tc.beta)
        estimates.append(est.per_module.tolist())
    return estimates


def step(state: TrainState, batch_x: np.ndarray, batch_y: np.ndarray) -> StepReport:
    """One training step; mutates parameters in place and advances the
    step counter."""
    cfg = state.model_config
    tc = state.train_config
    t0 = time.perf_counter()

    curvature = None
    if (cfg.encapsulation and tc.curvature_refresh_every > 0
            and state.step % tc.curvature_refresh_every == 0):
        curvature = refresh_alpha_from_curvature(state, batch_x)

    want_records = cfg.encapsulation and (tc.mix_consensus > 0 or tc.mix_laplacian > 0)
    tape = Tape()
    logits2d, _, records = forward_batch(
        tape, cfg, state.params, batch_x, collect_records=want_records)
    ce = tape.cross_entropy_mean(logits2d, np.asarray(batch_y).reshape(-1))
    total = ce
    consensus_val = 0.0
    laplacian_val = 0.0
    chunk = batch_x.shape[1]
    if want_records:
        if tc.mix_consensus > 0:
            acc = None
            for k, rec in enumerate(records):
                view = encapsulation_layer(cfg, state.params, k, chunk)
                term = consensus_loss(tape, view, rec.x, rec.h, tc.lambda_penalty,
                                      h_list=rec.h_list)
                acc = term if acc is None else tape.add(acc, term)
            consensus_val = acc.item()
            total = tape.add(total, tape.scale(acc, tc.mix_consensus))
        if tc.mix_laplacian > 0:
            acc = None
            for k, rec in enumerate(records):
                view = encapsulation_layer(cfg, state.params, k, chunk,
                                           lambda_laplacian=tc.lambda_laplacian)
                term = laplacian_loss(tape, view, Tensor(rec.x.data),
                                      coord_sample=tc.laplacian_coord_sample, seed=tc.seed)
                acc = term if acc is None else tape.add(acc, term)
            laplacian_val = acc.item()
            total = tape.add(total, tape.scale(acc, tc.mix_laplacian))

    try:
        tape.backward(total)
    except NonFiniteError as exc:
        raise NonFiniteError(f"step {state.step}: {exc}") from exc

    alpha_names = set(_alpha_names(cfg))
    lr = tc.learning_rate
    for name in sorted(state.params):
        p = state.params[name]
        if p.grad is not None:
            p.data -= lr * p.grad
    for name in alpha_names:
        a = state.params[name]
        if tc.decay_alpha:
            a.data *= 1.0 - tc.lambda_decay
        a.data[:] = project_simplex(a.data)
    decay = 1.0 - tc.lambda_decay
    if decay != 1.0:
        for name in sorted(state.params):
            if name not in alpha_names:
                state.params[name].data *= decay
    for name in sorted(state.params):
        if not np.isfinite(state.params[name].data).all():
            raise NonFiniteError(
                f"parameter '{name}' became non-finite after step {state.step}")

    report = StepReport(
        step=state.step,
        total=total.item(),
        ce=ce.item(),
        consensus=consensus_val,
        laplacian=laplacian_val,
        alpha=[state.params[n].data.tolist() for n in _alpha_names(cfg)],
        curvature=curvature,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    state.step += 1
    return report


def split_corpus_tokens(tokens: np.ndarray, holdout_fraction: float = 0.1):
    """Deterministic split: the last ``holdout_fraction`` of the token stream
    is held out for evaluation."""
    n_eval = int(len(tokens) * holdout_fraction)
    return tokens[: len(tokens) - n_eval], tokens[len(tokens) - n_eval:]


def sample_batch(rng: np.random.Generator, tokens: np.ndarray, batch_size: int, seq_len: int):
    """Uniformly random window starts; returns (x, y) with y shifted one."""
    max_start = len(tokens) - seq_len - 1
    starts = rng.integers(0, max_start + 1, size=batch_size)
    x = np.stack([tokens[s: s + seq_len] for s in starts])
    y = np.stack([tokens[s + 1: s + seq_len + 1] for s in starts])
    return x, y


def mean_divergence_diagnostic(state: TrainState, batch_x: np.ndarray) -> float:
    """Layer-averaged weighted-gradient diagnostic on the current inputs."""
    cfg = state.model_config
    xs = layer_inputs(cfg, state.params, batch_x)
    chunk = batch_x.shape[1]
    values = []
    for k in range(cfg.layers):
        view = encapsulation_layer(cfg, state.params, k, chunk)
        values.append(divergence_diagnostic(view, Tensor(xs[k])))
    return float(np.mean(values))


def train(model_config: ModelConfig, train_config: TrainConfig, corpus: str,
          diagnostics: bool = True):
    """Full training run over a character corpus.

    Returns ``(state, log_rows)``: the trained state plus one metrics row
    per ``eval_every`` steps (and the final step), each carrying the loss
    terms, the weighted-gradient diagnostic, the alpha trajectory, and the
    wall-clock time of the measured step.
    """
    model_config.validate()
    train_config.validate()
    vocab = tokenizer_build(corpus)
    if model_config.vocab_size == 0:
        model_config.vocab_size = vocab.size
    elif model_config.vocab_size != vocab.size:
        raise ValueError(
            f"config vocab_size {model_config.vocab_size} != corpus vocabulary {vocab.size}")
    tokens = np.asarray(vocab.encode(corpus), dtype=np.int64)
    if len(tokens) < train_config.batch_size * model_config.seq_len:
        raise ValueError(
            f"corpus too small: {len(tokens)} tokens < batch_size*seq_len = "
            f"{train_config.batch_size * model_config.seq_len}")
    train_tokens, _ = split_corpus_tokens(tokens)
    if len(train_tokens) < model_config.seq_len + 1:
        raise ValueError("corpus too small after holdout split")

    state = TrainState(
        model_config=model_config,
        train_config=train_config,
        params=init_params(model_config, train_config.seed),
        vocab=vocab,
        rng=np.random.default_rng(train_config.seed),
    )
    rows = []
    for i in range(train_config.steps):
        x, y = sample_batch(state.rng, train_tokens, train_config.batch_size,
                            model_config.seq_len)
        report = step(state, x, y)
        if i % train_config.eval_every == 0 or i == train_config.steps - 1:
            row = {
                "step": i,
                "ce": report.ce,
                "consensus": report.consensus,
                "laplacian": report.laplacian,
                "divergence": mean_divergence_diagnostic(state, x) if diagnostics else 0.0,
                "alpha": report.alpha,
                "wall_ms": report.wall_ms,
            }
            rows.append(row)
    return state, rows


# -- checkpoint serialization ----------------------------------------------------


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def checkpoint_payload(state: TrainState) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(state.model_config),
        "train_config": asdict(state.train_config),
        "vocabulary": state.vocab.id_to_char,
        "tensors": {
            name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in state.params.items()
        },
        "step": state.step,
        "rng_state": _encode_rng(state.rng.bit_generator.state),
    }


def _encode_rng(rng_state: dict) -> dict:
    # PCG64 state holds >64-bit ints; JSON carries them fine as-is.
    return json.loads(json.dumps(rng_state))


def save_checkpoint(state: TrainState, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(_canonical_json(checkpoint_payload(state)))
        fh.write("\n")


def load_checkpoint(path) -> TrainState:
    try:
        with open(path, "r", encoding="ascii") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError("malformed checkpoint: missing format_version")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {payload['format_version']}, "
            f"expected {CHECKPOINT_VERSION}")
    try:
        model_config = ModelConfig(**payload["model_config"]).validate()
        train_config = TrainConfig(**payload["train_config"]).validate()
        vocab = Vocabulary(id_to_char=list(payload["vocabulary"]))
        tensors = payload["tensors"]
        step_no = int(payload["step"])
        rng_state = payload["rng_state"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc

    expected = param_shapes(model_config)
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(
            f"tensor set disagrees with config (missing {missing}, unexpected {extra})")
    params = {}
    for name, spec in tensors.items():
        shape = tuple(spec["shape"])
        if shape != expected[name]:
            raise CheckpointError(
                f"tensor '{name}' has shape {shape}, config requires {expected[name]}")
        data = np.asarray(spec["data"], dtype=np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True)

    rng = np.random.default_rng(0)
    rng.bit_generator.state = rng_state
    return TrainState(model_config=model_config, train_config=train_config,
                      params=params, vocab=vocab, step=step_no, rng=rng)
