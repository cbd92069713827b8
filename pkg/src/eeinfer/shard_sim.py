"""Deterministic simulator for sharded ciphertext inference.

The encrypted model is split into contiguous layer ranges hosted on simulated
worker nodes. Per generated token the client sends ciphertext token ids to
the first shard; encrypted residual activations travel shard to shard as
checksummed binary frames; the last shard computes logits and returns the
argmax token id, still in ciphertext. A seeded virtual clock assigns each
delivery a latency draw, so a run is a pure function of (model, plan, broker
config, prompt) and replays bit-for-bit.

Failure injection marks a node crashed once the global delivery counter
reaches the configured step; the next message bound for it triggers
reassignment of its shard to the lowest-numbered idle spare, or a pipeline
error when no spare is left.

The transcript records every exchange (token fields verbatim, activation
payloads as SHA-256 hashes) and is the input to the blindness audit, which
verifies that no plaintext token sequence or plaintext boundary activation
ever appeared on the wire.
"""
from __future__ import annotations

import hashlib
import json
import socket
import struct
import zlib
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    IntegrityError,
    PipelineError,
    RangeError,
    ShapeError,
    VersionError,
)
from .model import (
    CIPHERTEXT,
    ModelBundle,
    ModelConfig,
    TokenSeq,
    _validate_prompt,
    apply_layer_range,
    embed_positions,
    final_logits,
)

FRAME_MAGIC = b"EEFR"
FRAME_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sBQHII")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class ShardPlan:
    """Contiguous layer ranges and the node hosting each shard."""

    ranges: tuple[tuple[int, int], ...]
    placement: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.ranges:
            raise ConfigError("a shard plan needs at least one range")
        ranges = tuple((int(a), int(b)) for a, b in self.ranges)
        for first, last in ranges:
            if first < 0 or last < first:
                raise ConfigError(f"invalid layer range ({first}, {last})")
        for (_, prev_last), (nxt_first, _) in zip(ranges, ranges[1:]):
            if nxt_first != prev_last + 1:
                raise ConfigError("shard ranges must be contiguous and ordered")
        placement = tuple(int(n) for n in self.placement)
        if len(placement) != len(ranges):
            raise ConfigError("placement must assign exactly one node per shard")
        if len(set(placement)) != len(placement) or any(n < 0 for n in placement):
            raise ConfigError("placement nodes must be distinct non-negative ids")
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "placement", placement)

    @property
    def n_shards(self) -> int:
        return len(self.ranges)


def plan_shards(config: ModelConfig, n: int) -> ShardPlan:
    """Balanced contiguous split; earlier shards absorb the remainder."""
    if n < 1 or n > config.n_layers:
        raise ConfigError(f"cannot split {config.n_layers} layers into {n} shards")
    base, rem = divmod(config.n_layers, n)
    ranges = []
    first = 0
    for s in range(n):
        size = base + (1 if s < rem else 0)
        ranges.append((first, first + size - 1))
        first += size
    return ShardPlan(ranges=tuple(ranges), placement=tuple(range(n)))


def _plan_matches(plan: ShardPlan, config: ModelConfig) -> None:
    if plan.ranges[0][0] != 0 or plan.ranges[-1][1] != config.n_layers - 1:
        raise ConfigError(
            f"plan covers layers {plan.ranges[0][0]}..{plan.ranges[-1][1]}, "
            f"model has layers 0..{config.n_layers - 1}"
        )


@dataclass(frozen=True, eq=False)
class ActivationFrame:
    """One hop's encrypted residual activations (seq_len x d_model, f64)."""

    request_id: int
    shard_index: int
    payload: np.ndarray

    def __post_init__(self) -> None:
        if not (0 <= self.request_id < 2**64):
            raise RangeError(f"request_id {self.request_id} does not fit in u64")
        if not (0 <= self.shard_index < 2**16):
            raise RangeError(f"shard_index {self.shard_index} does not fit in u16")
        payload = np.asarray(self.payload, dtype=np.float64)
        if payload.ndim != 2 or payload.shape[0] < 1 or payload.shape[1] < 1:
            raise ShapeError(f"payload must be 2D and non-empty, got shape {payload.shape}")
        payload = payload.copy()
        payload.flags.writeable = False
        object.__setattr__(self, "payload", payload)

    @property
    def seq_len(self) -> int:
        return self.payload.shape[0]

    @property
    def d_model(self) -> int:
        return self.payload.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ActivationFrame):
            return NotImplemented
        return (
            self.request_id == other.request_id
            and self.shard_index == other.shard_index
            and self.payload.shape == other.payload.shape
            and self.payload.tobytes() == other.payload.tobytes()
        )


def encode_frame(frame: ActivationFrame) -> bytes:
    header = _FRAME_HEADER.pack(
        FRAME_MAGIC,
        FRAME_VERSION,
        frame.request_id,
        frame.shard_index,
        frame.seq_len,
        frame.d_model,
    )
    payload = frame.payload.astype("<f8", copy=False).tobytes()
    body = header + payload
    return body + _CRC.pack(zlib.crc32(body))


def decode_frame(data: bytes) -> ActivationFrame:
    if len(data) < _FRAME_HEADER.size:
        raise FormatError("frame truncated before the header ends", offset=len(data))
    magic, version, request_id, shard_index, seq_len, d_model = _FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise FormatError(f"bad frame magic {magic!r}", offset=0)
    if version != FRAME_VERSION:
        raise VersionError(f"unsupported frame version {version}")
    if seq_len == 0 or d_model == 0:
        raise FormatError("frame declares an empty payload")
    expected = _FRAME_HEADER.size + seq_len * d_model * 8 + _CRC.size
    if len(data) < expected:
        raise FormatError(
            f"frame truncated: expected {expected} bytes, got {len(data)}", offset=len(data)
        )
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after frame", offset=expected)
    (stored_crc,) = _CRC.unpack_from(data, expected - _CRC.size)
    actual_crc = zlib.crc32(data[: expected - _CRC.size])
    if stored_crc != actual_crc:
        raise IntegrityError(
            f"frame checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    payload = np.frombuffer(
        data, dtype="<f8", count=seq_len * d_model, offset=_FRAME_HEADER.size
    ).reshape(seq_len, d_model)
    return ActivationFrame(request_id=request_id, shard_index=shard_index, payload=payload)


class InProcessTransport:
    """Default binding: an ordered, reliable in-process byte queue."""

    def __init__(self) -> None:
        self._queue: deque[bytes] = deque()

    def send(self, data: bytes) -> None:
        self._queue.append(bytes(data))

    def recv(self) -> bytes:
        if not self._queue:
            raise PipelineError("transport queue is empty")
        return self._queue.popleft()

    def close(self) -> None:
        self._queue.clear()


class SocketTransport:
    """Optional binding: the same length-prefixed frames over a local socket pair."""

    def __init__(self) -> None:
        self._tx, self._rx = socket.socketpair()

    def send(self, data: bytes) -> None:
        self._tx.sendall(struct.pack("<I", len(data)) + data)

    def recv(self) -> bytes:
        length = struct.unpack("<I", self._read_exact(4))[0]
        return self._read_exact(length)

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._rx.recv(remaining)
            if not chunk:
                raise PipelineError("socket transport closed mid-message")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        self._tx.close()
        self._rx.close()


@dataclass(frozen=True)
class BrokerConfig:
    """Seeded latency model, crash injections, and the spare-node pool."""

    seed: int = 0
    latency_lo: float = 0.0
    latency_hi: float = 0.0
    failures: tuple[tuple[int, int], ...] = ()
    spares: int = 0

    def __post_init__(self) -> None:
        if self.latency_lo < 0 or self.latency_hi < self.latency_lo:
            raise ConfigError("latency bounds need 0 <= lo <= hi")
        if self.spares < 0:
            raise ConfigError("spares must be >= 0")
        failures = tuple((int(n), int(s)) for n, s in self.failures)
        for node, step in failures:
            if node < 0 or step < 0:
                raise ConfigError(f"failure injection ({node}, {step}) invalid")
        object.__setattr__(self, "failures", failures)


class Transcript:
    """Ordered record of every simulated exchange."""

    def __init__(self, entries: list[dict] | None = None) -> None:
        self.entries: list[dict] = list(entries or [])

    def add(self, **entry) -> None:
        self.entries.append(entry)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Transcript):
            return NotImplemented
        return self.entries == other.entries

    def __len__(self) -> int:
        return len(self.entries)

    def to_jsonl(self) -> str:
        if not self.entries:
            return ""
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.entries) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()


def save_transcript(transcript: Transcript, path: str | Path) -> None:
    Path(path).write_text(transcript.to_jsonl(), encoding="utf-8")


def load_transcript(path: str | Path) -> Transcript:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise TypeError("entry is not an object")
                entries.append(obj)
            except (json.JSONDecodeError, TypeError) as exc:
                raise FormatError(f"transcript line {lineno} is malformed: {exc}") from exc
    return Transcript(entries)


def _payload_hash(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).hexdigest()


def run_pipeline(
    enc_model: ModelBundle,
    plan: ShardPlan,
    broker: BrokerConfig,
    prompt: TokenSeq,
    n_new: int,
    request_id: int = 0,
    transport=None,
) -> tuple[TokenSeq, Transcript]:
    """Greedy-decode n_new tokens through the shard pipeline.

    Bit-identical to monolithic ciphertext-domain decoding: shards apply the
    same layer loop in the same order, and frame serialization round-trips
    f64 activations exactly.
    """
    if enc_model.domain != CIPHERTEXT:
        raise DomainError("the shard pipeline runs the encrypted model only")
    _plan_matches(plan, enc_model.config)
    if n_new < 0:
        raise RangeError(f"n_new must be >= 0, got {n_new}")
    _validate_prompt(enc_model, prompt, extra=n_new)

    rng = np.random.default_rng(broker.seed)
    transport = transport if transport is not None else InProcessTransport()
    transcript = Transcript()
    n_shards = plan.n_shards
    n_nodes = max(plan.placement) + 1 + broker.spares
    assignment = list(plan.placement)
    clock = 0.0
    deliveries = 0
    failed_logged: set[int] = set()

    def is_dead(node: int) -> bool:
        return any(node == fn and deliveries >= fs for fn, fs in broker.failures)

    def deliver_to_shard(shard: int) -> int:
        nonlocal clock, deliveries
        while is_dead(assignment[shard]):
            node = assignment[shard]
            if node not in failed_logged:
                failed_logged.add(node)
                transcript.add(kind="failure", node=node, time=clock)
            candidates = [
                n for n in range(n_nodes) if n not in assignment and not is_dead(n)
            ]
            if not candidates:
                raise PipelineError(
                    f"node {node} failed and no spare node can host shard {shard}"
                )
            transcript.add(
                kind="reassign", shard=shard, from_node=node, to_node=candidates[0], time=clock
            )
            assignment[shard] = candidates[0]
        deliveries += 1
        clock += float(rng.uniform(broker.latency_lo, broker.latency_hi))
        return assignment[shard]

    def tick() -> None:
        nonlocal clock, deliveries
        deliveries += 1
        clock += float(rng.uniform(broker.latency_lo, broker.latency_hi))

    ids = list(prompt.ids)
    for token_index in range(n_new):
        node = deliver_to_shard(0)
        transport.send(json.dumps({"request_id": request_id, "token_ids": ids}).encode())
        msg = json.loads(transport.recv())
        transcript.add(
            kind="tokens_in",
            step=deliveries,
            time=clock,
            to_node=node,
            shard=0,
            token_index=token_index,
            token_ids=list(msg["token_ids"]),
        )
        x = embed_positions(enc_model, msg["token_ids"])
        first, last = plan.ranges[0]
        x = apply_layer_range(enc_model, x, first, last)
        prev_node = node
        for s in range(1, n_shards):
            node = deliver_to_shard(s)
            transport.send(encode_frame(ActivationFrame(request_id, s, x)))
            frame = decode_frame(transport.recv())
            transcript.add(
                kind="frame",
                step=deliveries,
                time=clock,
                from_node=prev_node,
                to_node=node,
                shard=s,
                token_index=token_index,
                seq_len=frame.seq_len,
                payload_sha256=_payload_hash(frame.payload),
            )
            first, last = plan.ranges[s]
            x = apply_layer_range(enc_model, frame.payload, first, last)
            prev_node = node
        logits = final_logits(enc_model, x)
        next_id = int(np.argmax(logits[-1]))
        tick()
        transport.send(json.dumps({"request_id": request_id, "token_id": next_id}).encode())
        out_msg = json.loads(transport.recv())
        transcript.add(
            kind="token_out",
            step=deliveries,
            time=clock,
            from_node=prev_node,
            token_index=token_index,
            token_id=int(out_msg["token_id"]),
        )
        ids.append(int(out_msg["token_id"]))
    return TokenSeq(tuple(ids), CIPHERTEXT), transcript


@dataclass(frozen=True)
class PlaintextContext:
    """What the client knows in plaintext; the auditor checks none of it leaked."""

    prompt: TokenSeq
    output: TokenSeq
    model: ModelBundle | None = None
    plan: ShardPlan | None = None


@dataclass(frozen=True)
class AuditResult:
    passed: bool
    failures: tuple[str, ...]
    warnings: tuple[str, ...]
    checked_entries: int


def _contains(haystack: list[int], needle: tuple[int, ...]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    k = len(needle)
    return any(tuple(haystack[i : i + k]) == needle for i in range(len(haystack) - k + 1))


def audit_blindness(transcript: Transcript, ctx: PlaintextContext) -> AuditResult:
    """Scan a transcript for plaintext leakage.

    Checks: (a) neither the plaintext prompt nor the plaintext continuation
    appears as a contiguous subsequence in any token-bearing field; (b) the
    first shard's first input differs from the plaintext prompt; (c) when the
    plaintext model and plan are provided, no frame payload hash equals the
    hash of the corresponding plaintext boundary activation.
    """
    if not transcript.entries:
        return AuditResult(
            passed=True,
            failures=(),
            warnings=("transcript is empty; blindness holds vacuously",),
            checked_entries=0,
        )
    prompt_ids = ctx.prompt.ids
    full_out = ctx.output.ids
    gen_ids = full_out[len(prompt_ids) :] if full_out[: len(prompt_ids)] == prompt_ids else full_out

    failures: list[str] = []
    token_out_stream: list[int] = []
    first_tokens_in: list[int] | None = None
    checked = 0
    for idx, entry in enumerate(transcript.entries):
        kind = entry.get("kind")
        if kind == "tokens_in":
            checked += 1
            ids = [int(t) for t in entry["token_ids"]]
            if first_tokens_in is None:
                first_tokens_in = ids
            for name, needle in (("prompt", prompt_ids), ("output", gen_ids)):
                if _contains(ids, needle):
                    failures.append(
                        f"entry {idx}: plaintext {name} appears in a tokens_in field"
                    )
        elif kind == "token_out":
            checked += 1
            token_out_stream.append(int(entry["token_id"]))
        elif kind == "frame":
            checked += 1

    for name, needle in (("prompt", prompt_ids), ("output", gen_ids)):
        if _contains(token_out_stream, needle):
            failures.append(f"plaintext {name} appears in the token_out stream")

    if first_tokens_in is not None and tuple(first_tokens_in) == prompt_ids:
        failures.append("first-shard input token ids equal the plaintext prompt")

    warnings: list[str] = []
    if ctx.model is not None and ctx.plan is not None:
        plain_hashes = _plaintext_boundary_hashes(ctx)
        for idx, entry in enumerate(transcript.entries):
            if entry.get("kind") == "frame" and entry.get("payload_sha256") in plain_hashes:
                failures.append(
                    f"entry {idx}: frame payload equals a plaintext boundary activation"
                )
    elif ctx.model is not None or ctx.plan is not None:
        warnings.append("need both model and plan to check boundary activations; skipped")

    return AuditResult(
        passed=not failures,
        failures=tuple(failures),
        warnings=tuple(warnings),
        checked_entries=checked,
    )


def _plaintext_boundary_hashes(ctx: PlaintextContext) -> set[str]:
    """Hashes of activations a plaintext run would put on the wire."""
    hashes: set[str] = set()
    n_gen = len(ctx.output.ids) - len(ctx.prompt.ids)
    for token_index in range(max(n_gen, 1)):
        ids = list(ctx.output.ids[: len(ctx.prompt.ids) + token_index])
        if not ids:
            continue
        x = embed_positions(ctx.model, ids)
        for s, (first, last) in enumerate(ctx.plan.ranges):
            x = apply_layer_range(ctx.model, x, first, last)
            if s + 1 < ctx.plan.n_shards:
                hashes.add(_payload_hash(x))
    return hashes
