"""Recovery attacks against the vocabulary permutation.

An eavesdropper sees ciphertext (input, output) pairs and tries to find the
mapping ciphertext -> plaintext. Losses score a candidate mapping:

* unigram_loss / bigram_loss: L1 distance between the decrypted corpus
  statistics and reference statistics (frequency cues).
* consistency_penalty: fraction of pairs where replaying the decrypted input
  through a plaintext oracle model does not reproduce the decrypted output.
  The true mapping scores 0 on a greedy-generated corpus.
* judge_loss: mean (10 - rating)/10 from a 0..10 coherence judge, either a
  deterministic local stub or a chat-completion-style HTTP endpoint.

Optimizers search permutation space: exhaustive enumeration (tiny
vocabularies only), best-of-M random draws, and 2-swap hill climbing with
random restarts. All three report an AttackState whose trace records every
improvement of the running best.

Oracle continuations are memoized by decrypted input; the oracle is a pure
function, so memoization never changes a loss value, only the cost of
computing it. Candidate evaluations may stop early once a partial lower bound
proves the candidate cannot beat the incumbent; such evaluations never
produce accepted states, so reported losses are always fully evaluated.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import requests

from .errors import (
    ConfigError,
    FormatError,
    ProtocolError,
    RangeError,
    RefusalError,
    RemoteError,
    ShapeError,
)
from .model import CIPHERTEXT, PLAINTEXT, ModelBundle, TokenSeq, greedy_decode
from .tensor_ops import PermTable

BRUTE_FORCE_MAX_VOCAB = 9

JUDGE_ENV_VAR = "EE_JUDGE_URL"

JUDGE_RUBRIC = (
    "Rate the coherence and correctness of the response for the given input "
    "on an integer scale from 0 to 10. Reply with the integer only."
)


@dataclass(frozen=True)
class TranscriptCorpus:
    """Ciphertext (input_ids, output_ids) pairs captured off the wire."""

    pairs: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    vocab_size: int

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ConfigError("corpus must contain at least one pair")
        norm = []
        for pair_in, pair_out in self.pairs:
            pi = tuple(int(t) for t in pair_in)
            po = tuple(int(t) for t in pair_out)
            if not pi or not po:
                raise ConfigError("corpus pairs need a non-empty input and output")
            for t in pi + po:
                if not (0 <= t < self.vocab_size):
                    raise RangeError(
                        f"token id {t} out of range for vocab_size {self.vocab_size}"
                    )
            norm.append((pi, po))
        object.__setattr__(self, "pairs", tuple(norm))

    def all_tokens(self) -> np.ndarray:
        flat = [t for pi, po in self.pairs for t in pi + po]
        return np.asarray(flat, dtype=np.int64)


def save_corpus(corpus: TranscriptCorpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pair_in, pair_out in corpus.pairs:
            f.write(json.dumps({"input_ids": list(pair_in), "output_ids": list(pair_out)}))
            f.write("\n")


def load_corpus(path: str | Path, vocab_size: int) -> TranscriptCorpus:
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                pairs.append((tuple(obj["input_ids"]), tuple(obj["output_ids"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"corpus line {lineno} is malformed: {exc}") from exc
    return TranscriptCorpus(pairs=tuple(pairs), vocab_size=vocab_size)


def generate_corpus(
    model: ModelBundle,
    key,
    n_pairs: int,
    prompt_len: int,
    n_new: int,
    seed: int,
) -> TranscriptCorpus:
    """Greedy-generate plaintext pairs and publish them encrypted."""
    from .encryption import encrypt_tokens  # local import to avoid a cycle

    if n_pairs < 1 or prompt_len < 1 or n_new < 1:
        raise ConfigError("n_pairs, prompt_len, and n_new must all be >= 1")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        prompt = TokenSeq(
            tuple(int(t) for t in rng.integers(0, model.config.vocab_size, size=prompt_len)),
            PLAINTEXT,
        )
        full = greedy_decode(model, prompt, n_new)
        out = TokenSeq(full.ids[prompt_len:], PLAINTEXT)
        pairs.append((encrypt_tokens(key, prompt).ids, encrypt_tokens(key, out).ids))
    return TranscriptCorpus(pairs=tuple(pairs), vocab_size=model.config.vocab_size)


def empirical_unigram(corpus: TranscriptCorpus, perm: PermTable) -> np.ndarray:
    """Distribution of perm-decrypted corpus tokens (inputs and outputs)."""
    _check_perm(perm, corpus.vocab_size)
    counts = np.bincount(perm.map[corpus.all_tokens()], minlength=corpus.vocab_size)
    return counts / counts.sum()


def empirical_bigram(corpus: TranscriptCorpus, perm: PermTable) -> dict[int, dict[int, float]]:
    """Sparse conditional next-token distributions of the decrypted corpus.

    Adjacency runs across each pair's input->output boundary: the output is
    the continuation of the input, so that bigram is real.
    """
    _check_perm(perm, corpus.vocab_size)
    counts: dict[int, dict[int, int]] = {}
    for pair_in, pair_out in corpus.pairs:
        seq = [int(perm.map[t]) for t in pair_in + pair_out]
        for a, b in zip(seq, seq[1:]):
            counts.setdefault(a, {}).setdefault(b, 0)
            counts[a][b] += 1
    table: dict[int, dict[int, float]] = {}
    for ctx, row in counts.items():
        total = sum(row.values())
        table[ctx] = {nxt: c / total for nxt, c in row.items()}
    return table


class GreedyOracle:
    """Plaintext greedy-continuation oracle with exact memoization."""

    def __init__(self, model: ModelBundle) -> None:
        if model.domain != PLAINTEXT:
            raise ConfigError("the oracle needs the plaintext model")
        self.model = model
        self._memo: dict[tuple[bytes, int], np.ndarray] = {}

    @property
    def vocab_size(self) -> int:
        return self.model.config.vocab_size

    @property
    def max_seq_len(self) -> int:
        return self.model.config.max_seq_len

    def continuation(self, ids: Sequence[int], n_new: int) -> tuple[int, ...]:
        arr = self._continuation_array(np.asarray(ids, dtype=np.int64), n_new)
        return tuple(int(t) for t in arr)

    def _continuation_array(self, ids: np.ndarray, n_new: int) -> np.ndarray:
        key = (ids.tobytes(), n_new)
        hit = self._memo.get(key)
        if hit is None:
            out = greedy_decode(
                self.model, TokenSeq(tuple(int(t) for t in ids), PLAINTEXT), n_new
            )
            hit = np.asarray(out.ids[len(ids) :], dtype=np.int64)
            self._memo[key] = hit
        return hit


def _check_perm(perm: PermTable, vocab_size: int) -> None:
    if perm.n != vocab_size:
        raise ShapeError(f"permutation size {perm.n} does not match vocab_size {vocab_size}")


def unigram_loss(perm: PermTable, corpus: TranscriptCorpus, ref_unigram) -> float:
    """L1 distance between decrypted token frequencies and the reference."""
    if ref_unigram is None:
        raise ConfigError("unigram loss needs a reference distribution")
    _check_perm(perm, corpus.vocab_size)
    ref = np.asarray(ref_unigram, dtype=np.float64)
    if ref.shape != (corpus.vocab_size,):
        raise ShapeError(
            f"reference unigram has shape {ref.shape}, expected ({corpus.vocab_size},)"
        )
    return float(np.abs(empirical_unigram(corpus, perm) - ref).sum())


def bigram_loss(
    perm: PermTable,
    corpus: TranscriptCorpus,
    ref_bigram: Mapping[int, Mapping[int, float]] | None,
) -> float:
    """Frequency-weighted mean L1 between decrypted and reference bigram rows.

    Weighted over contexts observed in the decrypted corpus; a context the
    reference has never seen counts as maximally wrong (L1 = 2).
    """
    if ref_bigram is None:
        raise ConfigError("bigram loss needs a reference table")
    _check_perm(perm, corpus.vocab_size)
    ctx_counts: dict[int, int] = {}
    pair_counts: dict[int, dict[int, int]] = {}
    for pair_in, pair_out in corpus.pairs:
        seq = [int(perm.map[t]) for t in pair_in + pair_out]
        for a, b in zip(seq, seq[1:]):
            ctx_counts[a] = ctx_counts.get(a, 0) + 1
            pair_counts.setdefault(a, {}).setdefault(b, 0)
            pair_counts[a][b] += 1
    total = sum(ctx_counts.values())
    loss = 0.0
    for ctx, n_ctx in ctx_counts.items():
        ref_row = ref_bigram.get(ctx)
        if ref_row is None:
            l1 = 2.0
        else:
            emp = {nxt: c / n_ctx for nxt, c in pair_counts[ctx].items()}
            keys = set(emp) | set(ref_row)
            l1 = sum(abs(emp.get(k, 0.0) - float(ref_row.get(k, 0.0))) for k in keys)
        loss += (n_ctx / total) * l1
    return loss


def consistency_penalty(
    perm: PermTable, corpus: TranscriptCorpus, oracle: GreedyOracle | None
) -> float:
    """Fraction of pairs where the oracle's continuation of the decrypted
    input is not the decrypted output."""
    if oracle is None:
        raise ConfigError("consistency penalty needs a plaintext oracle model")
    _check_perm(perm, corpus.vocab_size)
    mismatches = 0
    for pair_in, pair_out in corpus.pairs:
        dec_in = perm.map[np.asarray(pair_in, dtype=np.int64)]
        dec_out = perm.map[np.asarray(pair_out, dtype=np.int64)]
        got = oracle._continuation_array(dec_in, len(pair_out))
        if not np.array_equal(got, dec_out):
            mismatches += 1
    return mismatches / len(corpus.pairs)


class JudgeStub:
    """Deterministic local judge: a rating in 0..10 derived from a hash."""

    def __init__(self, seed: int = 0) -> None:
        self.seed = int(seed)

    def rate(self, input_ids: Sequence[int], output_ids: Sequence[int]) -> int:
        blob = f"{self.seed}:{list(map(int, input_ids))}:{list(map(int, output_ids))}"
        digest = hashlib.sha256(blob.encode("utf-8")).digest()
        return digest[0] % 11


class RemoteJudge:
    """Chat-completion-style HTTP judge client.

    Sends the decrypted pair with a fixed rubric; expects choices[0].message.
    content to parse as an integer 0..10. Connection problems retry and then
    raise a remote error carrying the retry count; a reachable endpoint that
    answers off-protocol raises a protocol error immediately.
    """

    def __init__(self, url: str, timeout: float = 10.0, max_retries: int = 3) -> None:
        self.url = url
        self.timeout = timeout
        self.max_retries = int(max_retries)

    def rate(self, input_ids: Sequence[int], output_ids: Sequence[int]) -> int:
        payload = {
            "model": "ee-judge",
            "temperature": 0,
            "messages": [
                {"role": "system", "content": JUDGE_RUBRIC},
                {
                    "role": "user",
                    "content": json.dumps(
                        {
                            "input_ids": list(map(int, input_ids)),
                            "output_ids": list(map(int, output_ids)),
                        }
                    ),
                },
            ],
        }
        response = None
        for _ in range(self.max_retries + 1):
            try:
                response = requests.post(self.url, json=payload, timeout=self.timeout)
                break
            except requests.RequestException:
                response = None
        if response is None:
            raise RemoteError(
                f"judge endpoint {self.url} unreachable", retries=self.max_retries
            )
        if response.status_code != 200:
            raise ProtocolError(f"judge endpoint returned HTTP {response.status_code}")
        try:
            content = response.json()["choices"][0]["message"]["content"]
            rating = int(str(content).strip())
        except (ValueError, KeyError, IndexError, TypeError, requests.JSONDecodeError) as exc:
            raise ProtocolError(f"judge response is not a 0..10 integer rating: {exc}") from exc
        if not (0 <= rating <= 10):
            raise ProtocolError(f"judge rating {rating} outside 0..10")
        return rating


def make_judge(seed: int = 0, env: Mapping[str, str] | None = None):
    """Remote judge when EE_JUDGE_URL is set, the deterministic stub otherwise."""
    env = os.environ if env is None else env
    url = env.get(JUDGE_ENV_VAR)
    return RemoteJudge(url) if url else JudgeStub(seed)


def judge_loss(perm: PermTable, corpus: TranscriptCorpus, judge) -> float:
    """Mean (10 - rating)/10 over all decrypted pairs."""
    if judge is None:
        raise ConfigError("judge loss needs a judge")
    _check_perm(perm, corpus.vocab_size)
    total = 0.0
    for pair_in, pair_out in corpus.pairs:
        dec_in = [int(perm.map[t]) for t in pair_in]
        dec_out = [int(perm.map[t]) for t in pair_out]
        total += (10 - judge.rate(dec_in, dec_out)) / 10.0
    return total / len(corpus.pairs)


@dataclass
class AttackConfig:
    """Loss landscape definition plus the optimizer budget and seed."""

    corpus: TranscriptCorpus
    lambda_uni: float = 0.0
    lambda_bi: float = 0.0
    lambda_cons: float = 0.0
    ref_unigram: np.ndarray | None = None
    ref_bigram: Mapping[int, Mapping[int, float]] | None = None
    oracle: GreedyOracle | None = None
    seed: int = 0
    budget: int = 1000

    def __post_init__(self) -> None:
        for name in ("lambda_uni", "lambda_bi", "lambda_cons"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lambda_uni == 0 and self.lambda_bi == 0 and self.lambda_cons == 0:
            raise ConfigError("at least one loss component must have positive weight")
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        v = self.corpus.vocab_size
        if self.lambda_uni > 0:
            if self.ref_unigram is None:
                raise ConfigError("lambda_uni > 0 requires ref_unigram")
            ref = np.asarray(self.ref_unigram, dtype=np.float64)
            if ref.shape != (v,):
                raise ShapeError(f"ref_unigram shape {ref.shape} does not match vocab {v}")
            if (ref < 0).any() or abs(float(ref.sum()) - 1.0) > 1e-9:
                raise ConfigError("ref_unigram must be a probability vector summing to 1")
            self.ref_unigram = ref
        if self.lambda_bi > 0:
            if self.ref_bigram is None:
                raise ConfigError("lambda_bi > 0 requires ref_bigram")
            for ctx, row in self.ref_bigram.items():
                if not (0 <= int(ctx) < v) or not row:
                    raise ConfigError(f"ref_bigram context {ctx!r} invalid")
                if abs(sum(float(p) for p in row.values()) - 1.0) > 1e-9:
                    raise ConfigError(f"ref_bigram row for context {ctx} does not sum to 1")
        if self.lambda_cons > 0:
            if self.oracle is None:
                raise ConfigError("lambda_cons > 0 requires an oracle model")
            if self.oracle.vocab_size != v:
                raise ConfigError(
                    f"oracle vocab {self.oracle.vocab_size} does not match corpus vocab {v}"
                )
            longest = max(len(pi) + len(po) for pi, po in self.corpus.pairs)
            if longest > self.oracle.max_seq_len:
                raise ConfigError(
                    f"corpus pair of total length {longest} exceeds the oracle's "
                    f"max_seq_len {self.oracle.max_seq_len}"
                )


@dataclass(frozen=True)
class AttackState:
    """Optimizer result: best candidate, its loss, and the improvement trace."""

    perm: PermTable
    loss: float
    component_breakdown: Mapping[str, float]
    evals_used: int
    trace: tuple[tuple[int, float], ...]
    terminated: str


def save_attack_result(state: AttackState, cfg: AttackConfig, path: str | Path) -> None:
    doc = {
        "perm_map": state.perm.map.tolist(),
        "loss": state.loss,
        "component_breakdown": dict(state.component_breakdown),
        "weights": {
            "lambda_uni": cfg.lambda_uni,
            "lambda_bi": cfg.lambda_bi,
            "lambda_cons": cfg.lambda_cons,
        },
        "evals_used": state.evals_used,
        "budget": cfg.budget,
        "seed": cfg.seed,
        "trace": [[i, loss] for i, loss in state.trace],
        "terminated": state.terminated,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


class _Evaluator:
    """Shared precomputation for repeated loss evaluations on one landscape."""

    def __init__(self, cfg: AttackConfig) -> None:
        self.cfg = cfg
        self.n = cfg.corpus.vocab_size
        counts = np.bincount(cfg.corpus.all_tokens(), minlength=self.n)
        self._enc_freq = counts / counts.sum()
        self._pairs = [
            (
                np.asarray(pi, dtype=np.int64),
                np.asarray(po, dtype=np.int64),
                len(po),
            )
            for pi, po in cfg.corpus.pairs
        ]
        if cfg.lambda_bi > 0:
            ctx: dict[int, int] = {}
            big: dict[int, dict[int, int]] = {}
            for pi, po in cfg.corpus.pairs:
                seq = pi + po
                for a, b in zip(seq, seq[1:]):
                    ctx[a] = ctx.get(a, 0) + 1
                    big.setdefault(a, {}).setdefault(b, 0)
                    big[a][b] += 1
            self._enc_ctx = ctx
            self._enc_big = big
            self._big_total = sum(ctx.values())

    def loss(
        self, perm_map: np.ndarray, bound: float | None = None
    ) -> tuple[float, dict[str, float] | None, bool]:
        """(loss, breakdown, complete). With a bound, evaluation may stop as
        soon as the running lower bound reaches it; then breakdown is None,
        complete is False, and the returned value is only a lower bound."""
        cfg = self.cfg
        total = 0.0
        breakdown: dict[str, float] = {}
        if cfg.lambda_uni > 0:
            # decrypted distribution is the encrypted one rescattered
            dec = np.empty(self.n, dtype=np.float64)
            dec[perm_map] = self._enc_freq
            l_uni = float(np.abs(dec - cfg.ref_unigram).sum())
            breakdown["unigram"] = l_uni
            total += cfg.lambda_uni * l_uni
        if cfg.lambda_bi > 0:
            l_bi = self._bigram(perm_map)
            breakdown["bigram"] = l_bi
            total += cfg.lambda_bi * l_bi
        if bound is not None and total >= bound:
            return total, None, False
        if cfg.lambda_cons > 0:
            oracle = cfg.oracle
            n_pairs = len(self._pairs)
            mismatches = 0
            for idx, (pi, po, n_new) in enumerate(self._pairs):
                got = oracle._continuation_array(perm_map[pi], n_new)
                if not np.array_equal(got, perm_map[po]):
                    mismatches += 1
                    if bound is not None:
                        lower = total + cfg.lambda_cons * (mismatches / n_pairs)
                        if lower >= bound and idx + 1 < n_pairs:
                            return lower, None, False
            l_cons = mismatches / n_pairs
            breakdown["consistency"] = l_cons
            total += cfg.lambda_cons * l_cons
        return total, breakdown, True

    def _bigram(self, perm_map: np.ndarray) -> float:
        ref = self.cfg.ref_bigram
        loss = 0.0
        for enc_ctx, n_ctx in self._enc_ctx.items():
            dec_ctx = int(perm_map[enc_ctx])
            ref_row = ref.get(dec_ctx)
            if ref_row is None:
                l1 = 2.0
            else:
                emp = {int(perm_map[b]): c / n_ctx for b, c in self._enc_big[enc_ctx].items()}
                keys = set(emp) | set(ref_row)
                l1 = sum(abs(emp.get(k, 0.0) - float(ref_row.get(k, 0.0))) for k in keys)
            loss += (n_ctx / self._big_total) * l1
        return loss


def total_loss(perm: PermTable, cfg: AttackConfig) -> tuple[float, dict[str, float]]:
    """Weighted sum of the enabled components plus the raw breakdown."""
    _check_perm(perm, cfg.corpus.vocab_size)
    value, breakdown, _ = _Evaluator(cfg).loss(perm.map)
    return value, breakdown


def brute_force(cfg: AttackConfig) -> AttackState:
    """Exact minimizer by lexicographic enumeration of all n! candidates.

    Ties keep the first (lexicographically smallest) map. Refuses vocabularies
    above 9 tokens: the candidate count grows factorially.
    """
    n = cfg.corpus.vocab_size
    if n > BRUTE_FORCE_MAX_VOCAB:
        raise RefusalError(
            f"brute force over a {n}-token vocabulary means {n}! candidate "
            f"permutations; enumeration is capped at {BRUTE_FORCE_MAX_VOCAB}"
        )
    ev = _Evaluator(cfg)
    best_loss = float("inf")
    best_map: np.ndarray | None = None
    best_breakdown: dict[str, float] = {}
    trace: list[tuple[int, float]] = []
    evals = 0
    buf = np.empty(n, dtype=np.int64)
    for cand in itertools.permutations(range(n)):
        evals += 1
        buf[:] = cand
        value, breakdown, _ = ev.loss(buf)
        if value < best_loss:
            best_loss = value
            best_map = buf.copy()
            best_breakdown = breakdown
            trace.append((evals, value))
    return AttackState(
        perm=PermTable(best_map),
        loss=best_loss,
        component_breakdown=best_breakdown,
        evals_used=evals,
        trace=tuple(trace),
        terminated="exhaustive",
    )


def random_sampling(cfg: AttackConfig, M: int) -> AttackState:
    """Best of M seeded uniform permutation draws; evals_used = M."""
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    n = cfg.corpus.vocab_size
    ev = _Evaluator(cfg)
    rng = np.random.default_rng(cfg.seed)
    best_loss = float("inf")
    best_map: np.ndarray | None = None
    best_breakdown: dict[str, float] = {}
    trace: list[tuple[int, float]] = []
    for i in range(1, M + 1):
        cand = rng.permutation(n).astype(np.int64)
        bound = best_loss if best_map is not None else None
        value, breakdown, complete = ev.loss(cand, bound=bound)
        if complete and value < best_loss:
            best_loss = value
            best_map = cand
            best_breakdown = breakdown
            trace.append((i, value))
    return AttackState(
        perm=PermTable(best_map),
        loss=best_loss,
        component_breakdown=best_breakdown,
        evals_used=M,
        trace=tuple(trace),
        terminated="completed",
    )


def hill_climb(
    cfg: AttackConfig, restarts: int = 1, initial: PermTable | None = None
) -> AttackState:
    """2-swap local search: random-order sweeps over all n(n-1)/2
    transpositions, accepting strict improvements only.

    An accept starts a fresh sweep; a completed sweep with no accept certifies
    a 2-swap local optimum (a loss of exactly 0 certifies immediately, it is
    the global minimum). The budget is shared sequentially across restarts;
    restart 0 may start from ``initial``, later restarts from seeded uniform
    draws. Result is the best restart, ties broken by lexicographic map.
    """
    if restarts < 1:
        raise ConfigError(f"restarts must be >= 1, got {restarts}")
    if initial is not None:
        _check_perm(initial, cfg.corpus.vocab_size)
    n = cfg.corpus.vocab_size
    ev = _Evaluator(cfg)
    swaps = [(i, j) for i in range(n) for j in range(i + 1, n)]
    seeds = np.random.SeedSequence(cfg.seed).spawn(restarts)
    budget = cfg.budget

    evals = 0
    global_best = float("inf")
    trace: list[tuple[int, float]] = []
    results: list[tuple[float, tuple[int, ...], dict[str, float], bool]] = []

    for r in range(restarts):
        if evals >= budget:
            break
        rng = np.random.default_rng(seeds[r])
        if r == 0 and initial is not None:
            cur = initial.map.astype(np.int64).copy()
        else:
            cur = rng.permutation(n).astype(np.int64)
        evals += 1
        cur_loss, cur_breakdown, _ = ev.loss(cur)
        if cur_loss < global_best:
            global_best = cur_loss
            trace.append((evals, cur_loss))
        certified = cur_loss == 0.0

        while not certified and evals < budget:
            improved = False
            budget_cut = False
            for si in rng.permutation(len(swaps)):
                if evals >= budget:
                    budget_cut = True
                    break
                i, j = swaps[si]
                cand = cur.copy()
                cand[i], cand[j] = cand[j], cand[i]
                evals += 1
                value, breakdown, complete = ev.loss(cand, bound=cur_loss)
                if complete and value < cur_loss:
                    cur, cur_loss, cur_breakdown = cand, value, breakdown
                    improved = True
                    if value < global_best:
                        global_best = value
                        trace.append((evals, value))
                    break
            if cur_loss == 0.0:
                certified = True
            elif not improved:
                if not budget_cut:
                    certified = True  # full clean sweep
                break

        results.append((cur_loss, tuple(int(t) for t in cur), cur_breakdown, certified))

    best = min(results, key=lambda item: (item[0], item[1]))
    return AttackState(
        perm=PermTable(np.asarray(best[1], dtype=np.int64)),
        loss=best[0],
        component_breakdown=best[2],
        evals_used=evals,
        trace=tuple(trace),
        terminated="certified" if best[3] else "budget_exhausted",
    )


def recovery_rate(perm: PermTable, true_perm: PermTable, corpus: TranscriptCorpus) -> float:
    """Frequency-weighted fraction of corpus tokens mapped like the truth."""
    _check_perm(perm, corpus.vocab_size)
    _check_perm(true_perm, corpus.vocab_size)
    tokens = corpus.all_tokens()
    return float(np.mean(perm.map[tokens] == true_perm.map[tokens]))
