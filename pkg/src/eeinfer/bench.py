"""Fidelity and latency comparison of plaintext vs ciphertext inference.

Fidelity compares per-prompt confidence scores (probability of the argmax
next token) between the plaintext pipeline and the full ciphertext pipeline
after decryption: 1 - mean relative gap. Latency times both full pipelines
over the same prompts (token encryption and decryption included on the
ciphertext arm) and reports median seconds plus the overhead percentage.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encryption import EEKey, check_pairing, decrypt_logits, decrypt_tokens, encrypt_tokens
from .errors import ConfigError, DomainError, FormatError, RangeError, ShapeError
from .model import (
    CIPHERTEXT,
    PLAINTEXT,
    ModelBundle,
    ModelConfig,
    TokenSeq,
    first_token_confidence,
    forward,
    greedy_decode,
)
from .tensor_ops import softmax_rows

_CONSISTENCY_TOL = 1e-12


def _score_arrays(scores_vi, scores_ee) -> tuple[np.ndarray, np.ndarray]:
    vi = np.asarray(scores_vi, dtype=np.float64)
    ee = np.asarray(scores_ee, dtype=np.float64)
    if vi.ndim != 1 or ee.ndim != 1:
        raise ShapeError("score lists must be one-dimensional")
    if vi.shape != ee.shape:
        raise ShapeError(f"score lists differ in length: {vi.shape[0]} vs {ee.shape[0]}")
    if vi.shape[0] == 0:
        raise DomainError("fidelity of empty score lists is undefined")
    for name, arr in (("scores_vi", vi), ("scores_ee", ee)):
        if (arr < 0).any() or (arr > 1).any():
            raise RangeError(f"{name} has entries outside [0, 1]")
    return vi, ee


def _fidelity_parts(scores_vi, scores_ee) -> tuple[float, int]:
    vi, ee = _score_arrays(scores_vi, scores_ee)
    peak = np.maximum(vi, ee)
    both_zero = peak == 0.0
    # a 0/0 pair means both arms agree exactly; it contributes no gap
    gaps = np.where(both_zero, 0.0, np.abs(ee - vi) / np.where(both_zero, 1.0, peak))
    return float(1.0 - gaps.mean()), int(both_zero.sum())


def fidelity(scores_vi, scores_ee) -> float:
    """1 - mean(|ee - vi| / max(ee, vi)) over paired confidence scores."""
    return _fidelity_parts(scores_vi, scores_ee)[0]


@dataclass(frozen=True)
class FidelityReport:
    """Paired confidence scores and the fidelity they imply."""

    n: int
    scores_vi: tuple[float, ...]
    scores_ee: tuple[float, ...]
    fidelity: float
    skipped_zero_pairs: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores_vi", tuple(float(s) for s in self.scores_vi))
        object.__setattr__(self, "scores_ee", tuple(float(s) for s in self.scores_ee))
        if len(self.scores_vi) != self.n or len(self.scores_ee) != self.n:
            raise ShapeError("stored score lists must both have length n")
        value, skipped = _fidelity_parts(self.scores_vi, self.scores_ee)
        if abs(value - self.fidelity) > _CONSISTENCY_TOL or skipped != self.skipped_zero_pairs:
            raise ConfigError("stored fidelity is inconsistent with the stored scores")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "scores_vi": list(self.scores_vi),
            "scores_ee": list(self.scores_ee),
            "fidelity": self.fidelity,
            "skipped_zero_pairs": self.skipped_zero_pairs,
        }


@dataclass(frozen=True)
class LatencyReport:
    """Median pipeline seconds per arm plus the overhead percentage."""

    vi_seconds: float
    ee_seconds: float
    delta_t_pct: float
    delta_t_std_pct: float
    repeats: int
    batch_size: int
    vi_samples: tuple[float, ...] = ()
    ee_samples: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        implied = (self.ee_seconds - self.vi_seconds) / self.vi_seconds * 100.0
        if abs(implied - self.delta_t_pct) > 1e-9:
            raise ConfigError("delta_t_pct is inconsistent with the stored medians")

    def to_dict(self) -> dict:
        return {
            "vi_seconds": self.vi_seconds,
            "ee_seconds": self.ee_seconds,
            "delta_t_pct": self.delta_t_pct,
            "delta_t_std_pct": self.delta_t_std_pct,
            "repeats": self.repeats,
            "batch_size": self.batch_size,
            "vi_samples": list(self.vi_samples),
            "ee_samples": list(self.ee_samples),
        }


def ee_first_token_confidence(model_ee: ModelBundle, key: EEKey, prompt: TokenSeq) -> float:
    """Ciphertext-arm analogue of first_token_confidence.

    Encrypts the prompt, runs the encrypted model, decrypts the final-row
    logits, and reads the argmax probability.
    """
    enc = encrypt_tokens(key, prompt)
    logits = forward(model_ee, enc)
    dec = decrypt_logits(key, logits[-1:, :])
    return float(softmax_rows(dec)[0].max())


def _check_arms(model_vi: ModelBundle, model_ee: ModelBundle, key: EEKey) -> None:
    if model_vi.domain != PLAINTEXT:
        raise DomainError("the VI arm needs a plaintext model")
    if model_ee.domain != CIPHERTEXT:
        raise DomainError("the EE arm needs a ciphertext model")
    check_pairing(key, model_vi.config)
    check_pairing(key, model_ee.config)


def run_fidelity_suite(
    model_vi: ModelBundle,
    model_ee: ModelBundle,
    key: EEKey,
    corpus: Sequence[TokenSeq],
) -> FidelityReport:
    """Confidence fidelity between the two arms over a prompt corpus."""
    _check_arms(model_vi, model_ee, key)
    if not corpus:
        raise DomainError("fidelity needs at least one prompt")
    scores_vi = [first_token_confidence(model_vi, p) for p in corpus]
    scores_ee = [ee_first_token_confidence(model_ee, key, p) for p in corpus]
    value, skipped = _fidelity_parts(scores_vi, scores_ee)
    return FidelityReport(
        n=len(corpus),
        scores_vi=tuple(scores_vi),
        scores_ee=tuple(scores_ee),
        fidelity=value,
        skipped_zero_pairs=skipped,
    )


def measure_latency(
    model_vi: ModelBundle,
    model_ee: ModelBundle,
    key: EEKey,
    prompts: Sequence[TokenSeq],
    n_new: int,
    repeats: int,
) -> LatencyReport:
    """Median wall-clock seconds per arm over the same prompts and length.

    The EE arm is the full pipeline: encrypt tokens, decode on the encrypted
    model, decrypt tokens. One untimed warmup pass precedes measurement; each
    repeat runs one arm to completion before the other.
    """
    if repeats < 3:
        raise ConfigError(f"repeats must be >= 3 for a stable median, got {repeats}")
    if not prompts:
        raise DomainError("latency measurement needs at least one prompt")
    _check_arms(model_vi, model_ee, key)

    def vi_arm() -> None:
        for p in prompts:
            greedy_decode(model_vi, p, n_new)

    def ee_arm() -> None:
        for p in prompts:
            decrypt_tokens(key, greedy_decode(model_ee, encrypt_tokens(key, p), n_new))

    vi_arm()
    ee_arm()

    vi_samples: list[float] = []
    ee_samples: list[float] = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        vi_arm()
        t1 = time.perf_counter()
        ee_arm()
        t2 = time.perf_counter()
        vi_samples.append(t1 - t0)
        ee_samples.append(t2 - t1)

    vi_med = statistics.median(vi_samples)
    ee_med = statistics.median(ee_samples)
    per_repeat_delta = [
        (ee - vi) / vi * 100.0 for vi, ee in zip(vi_samples, ee_samples)
    ]
    return LatencyReport(
        vi_seconds=vi_med,
        ee_seconds=ee_med,
        delta_t_pct=(ee_med - vi_med) / vi_med * 100.0,
        delta_t_std_pct=float(np.std(per_repeat_delta)),
        repeats=repeats,
        batch_size=1,
        vi_samples=tuple(vi_samples),
        ee_samples=tuple(ee_samples),
    )


def emit_report(
    fid: FidelityReport,
    lat: LatencyReport,
    path: str | Path,
    model_name: str = "toy-decoder",
) -> tuple[Path, Path]:
    """Write <path>.report.json and <path>.report.md; returns both paths."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path = base.with_name(base.name + ".report.json")
    md_path = base.with_name(base.name + ".report.md")

    doc = {"model": model_name, "fidelity": fid.to_dict(), "latency": lat.to_dict()}
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")

    row = (
        f"| {model_name} | {lat.vi_seconds:.6f} | {lat.ee_seconds:.6f} "
        f"| {lat.delta_t_pct:.2f} | {fid.fidelity * 100.0:.2f} "
        f"| {lat.delta_t_std_pct:.2f} |"
    )
    lines = [
        "# Inference benchmark",
        "",
        f"Prompts: {fid.n}; repeats: {lat.repeats}; batch size: {lat.batch_size}.",
        "",
        "| Model | VI(s) | EE(s) | dT(%) | Fid(%) | dT Std(%) |",
        "| --- | --- | --- | --- | --- | --- |",
        row,
        "",
    ]
    md_path.write_text("\n".join(lines), encoding="utf-8")
    return json_path, md_path


def random_prompts(config: ModelConfig, n: int, length: int, seed: int) -> list[TokenSeq]:
    """n uniform plaintext prompts of the given length."""
    if n < 1 or length < 1:
        raise ConfigError("n and length must be >= 1")
    if length > config.max_seq_len:
        raise ShapeError(f"prompt length {length} exceeds max_seq_len {config.max_seq_len}")
    rng = np.random.default_rng(seed)
    return [
        TokenSeq(tuple(int(t) for t in rng.integers(0, config.vocab_size, size=length)), PLAINTEXT)
        for _ in range(n)
    ]


def save_prompts(prompts: Sequence[TokenSeq], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in prompts:
            f.write(json.dumps({"input_ids": list(p.ids)}))
            f.write("\n")


def load_prompts(path: str | Path, domain: str = PLAINTEXT) -> list[TokenSeq]:
    prompts = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                prompts.append(TokenSeq(tuple(obj["input_ids"]), domain))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"prompt line {lineno} is malformed: {exc}") from exc
    return prompts
