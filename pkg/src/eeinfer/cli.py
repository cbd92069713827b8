"""Command-line entry point.

One executable with subcommands covering the full workflow: build a toy
model, generate a key, encrypt the model offline, run plaintext or blind
inference, benchmark fidelity and latency, mount recovery attacks, and
simulate the sharded pipeline with a blindness audit.

Every subcommand accepts --config pointing at a JSON object of flag values
(underscored names); explicit command-line flags win. Each run that writes
an output also records its fully resolved parameters next to that output as
<out>.resolved_config.json so the run can be replayed exactly.

Exit codes: 0 success; 2 usage; 3 format; 4 integrity; 5 pairing; 6 domain;
7 configuration or shape; 8 version; 9 refusal; 10 range; 11 remote;
12 protocol; 13 pipeline; 14 numerics; 1 anything unexpected.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import bench as bench_mod
from . import shard_sim as shard_mod
from .encryption import (
    check_pairing,
    decrypt_tokens,
    encrypt_model,
    encrypt_tokens,
    keygen,
    load_key,
    save_key,
)
from .errors import (
    ConfigError,
    DomainError,
    EEError,
    FormatError,
    IntegrityError,
    NumericsError,
    PairingError,
    PipelineError,
    ProtocolError,
    RangeError,
    RefusalError,
    RemoteError,
    ShapeError,
    VersionError,
)
from .model import (
    CIPHERTEXT,
    PLAINTEXT,
    ModelConfig,
    TokenSeq,
    greedy_decode,
    init_model,
    load_model,
    make_config,
    save_model,
)

EXIT_CODES: tuple[tuple[type, int], ...] = (
    (FormatError, 3),
    (IntegrityError, 4),
    (PairingError, 5),
    (DomainError, 6),
    (VersionError, 8),
    (RefusalError, 9),
    (RangeError, 10),
    (RemoteError, 11),
    (ProtocolError, 12),
    (PipelineError, 13),
    (NumericsError, 14),
    (ConfigError, 7),
    (ShapeError, 7),
)


class _Usage(Exception):
    """Missing or contradictory arguments; maps to exit code 2."""


def _exit_code(exc: EEError) -> int:
    for klass, code in EXIT_CODES:
        if isinstance(exc, klass):
            return code
    return 1


def _parse_ids(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise _Usage(f"token ids must be integers: {exc}") from exc


def _record_resolved(out: str | Path, command: str, resolved: dict) -> None:
    path = Path(str(out) + ".resolved_config.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": {k: resolved[k] for k in sorted(resolved)}}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _load_model_config(path: str) -> ModelConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"model config {path} must be a JSON object")
    return ModelConfig.from_dict(doc)


def _require(resolved: dict, *names: str) -> None:
    missing = [n for n in names if resolved.get(n) is None]
    if missing:
        raise _Usage("missing required arguments: " + ", ".join(sorted(missing)))


# ---------------------------------------------------------------- subcommands


def cmd_init_model(resolved: dict) -> int:
    _require(resolved, "vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
             "max_seq_len", "seed", "out")
    kinds = {"norm_kind": resolved["norm_kind"], "act_kind": resolved["act_kind"]}
    if resolved["d_head"] is None:
        config = make_config(
            resolved["vocab_size"], resolved["d_model"], resolved["n_layers"],
            resolved["n_heads"], resolved["d_ff"], resolved["max_seq_len"], **kinds,
        )
    else:
        config = ModelConfig(
            vocab_size=resolved["vocab_size"], d_model=resolved["d_model"],
            n_layers=resolved["n_layers"], n_heads=resolved["n_heads"],
            d_head=resolved["d_head"], d_ff=resolved["d_ff"],
            max_seq_len=resolved["max_seq_len"], **kinds,
        )
    model = init_model(config, resolved["seed"])
    Path(resolved["out"]).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, resolved["out"])
    if resolved["config_out"]:
        Path(resolved["config_out"]).write_text(
            json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    _record_resolved(resolved["out"], "init-model", resolved)
    print(f"wrote plaintext model to {resolved['out']}")
    return 0


def cmd_keygen(resolved: dict) -> int:
    _require(resolved, "model_config", "seed", "out")
    config = _load_model_config(resolved["model_config"])
    key = keygen(config, resolved["seed"], identity=resolved["identity"])
    Path(resolved["out"]).parent.mkdir(parents=True, exist_ok=True)
    save_key(key, resolved["out"])
    _record_resolved(resolved["out"], "keygen", resolved)
    kind = "identity" if key.is_identity else "random"
    print(f"wrote {kind} key to {resolved['out']}")
    return 0


def cmd_encrypt_model(resolved: dict) -> int:
    _require(resolved, "model", "key", "out")
    model = load_model(resolved["model"])
    key = load_key(resolved["key"])
    encrypted = encrypt_model(key, model)
    Path(resolved["out"]).parent.mkdir(parents=True, exist_ok=True)
    save_model(encrypted, resolved["out"])
    _record_resolved(resolved["out"], "encrypt-model", resolved)
    print(f"wrote ciphertext model to {resolved['out']}")
    return 0


def cmd_infer(resolved: dict) -> int:
    _require(resolved, "model", "prompt", "n_new")
    model = load_model(resolved["model"])
    prompt_ids = _parse_ids(resolved["prompt"])
    if resolved["key"] is None:
        if model.domain == CIPHERTEXT:
            raise DomainError(
                "a ciphertext model needs --key to encrypt the prompt and "
                "decrypt the output"
            )
        out = greedy_decode(model, TokenSeq(prompt_ids, PLAINTEXT), resolved["n_new"])
    else:
        key = load_key(resolved["key"])
        check_pairing(key, model.config)
        if model.domain != CIPHERTEXT:
            raise DomainError("--key is for ciphertext models; this one is plaintext")
        enc_prompt = encrypt_tokens(key, TokenSeq(prompt_ids, PLAINTEXT))
        enc_out = greedy_decode(model, enc_prompt, resolved["n_new"])
        out = decrypt_tokens(key, enc_out)
    print(" ".join(str(t) for t in out.ids))
    return 0


def cmd_fidelity(resolved: dict) -> int:
    _require(resolved, "vi_model", "ee_model", "key", "prompts", "out")
    vi = load_model(resolved["vi_model"])
    ee = load_model(resolved["ee_model"])
    key = load_key(resolved["key"])
    prompts = bench_mod.load_prompts(resolved["prompts"])
    fid = bench_mod.run_fidelity_suite(vi, ee, key, prompts)
    lat = bench_mod.measure_latency(
        vi, ee, key, prompts, n_new=resolved["n_new"], repeats=resolved["repeats"]
    )
    json_path, md_path = bench_mod.emit_report(
        fid, lat, resolved["out"], model_name=resolved["model_name"]
    )
    _record_resolved(resolved["out"], "fidelity", resolved)
    print(f"fidelity {fid.fidelity:.8f} over {fid.n} prompts")
    print(f"delta_t {lat.delta_t_pct:+.2f}% (std {lat.delta_t_std_pct:.2f}%)")
    print(f"wrote {json_path} and {md_path}")
    return 0


def _load_ref_unigram(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, list):
        raise FormatError(f"unigram reference {path} must be a JSON list")
    return np.asarray(doc, dtype=np.float64)


def _load_ref_bigram(path: str) -> dict[int, dict[int, float]]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise FormatError(f"bigram reference {path} must be a JSON object")
    try:
        return {
            int(ctx): {int(nxt): float(p) for nxt, p in row.items()}
            for ctx, row in doc.items()
        }
    except (ValueError, AttributeError) as exc:
        raise FormatError(f"bigram reference {path} is malformed: {exc}") from exc


def cmd_attack(resolved: dict) -> int:
    _require(resolved, "method", "corpus", "vocab_size", "out")
    corpus = attack_mod.load_corpus(resolved["corpus"], resolved["vocab_size"])
    ref_unigram = (
        _load_ref_unigram(resolved["ref_unigram"]) if resolved["ref_unigram"] else None
    )
    ref_bigram = (
        _load_ref_bigram(resolved["ref_bigram"]) if resolved["ref_bigram"] else None
    )
    oracle = None
    if resolved["oracle_model"]:
        oracle = attack_mod.GreedyOracle(load_model(resolved["oracle_model"]))
    cfg = attack_mod.AttackConfig(
        corpus=corpus,
        lambda_uni=resolved["lambda_uni"],
        lambda_bi=resolved["lambda_bi"],
        lambda_cons=resolved["lambda_cons"],
        ref_unigram=ref_unigram,
        ref_bigram=ref_bigram,
        oracle=oracle,
        seed=resolved["seed"],
        budget=resolved["budget"],
    )
    method = resolved["method"]
    if method == "brute":
        state = attack_mod.brute_force(cfg)
    elif method == "random":
        samples = resolved["samples"] if resolved["samples"] is not None else cfg.budget
        state = attack_mod.random_sampling(cfg, M=samples)
    elif method == "hill":
        state = attack_mod.hill_climb(cfg, restarts=resolved["restarts"])
    else:
        raise _Usage(f"unknown attack method {method!r}")
    Path(resolved["out"]).parent.mkdir(parents=True, exist_ok=True)
    attack_mod.save_attack_result(state, cfg, resolved["out"])
    _record_resolved(resolved["out"], "attack", resolved)
    print(
        f"{method}: loss {state.loss:.6f} after {state.evals_used} evaluations "
        f"({state.terminated})"
    )
    print(f"wrote {resolved['out']}")
    return 0


def _parse_failures(raw) -> tuple[tuple[int, int], ...]:
    pairs = []
    for item in raw:
        if isinstance(item, str):
            parts = item.split(":")
            if len(parts) != 2:
                raise _Usage(f"--fail takes node:step, got {item!r}")
            pairs.append((int(parts[0]), int(parts[1])))
        else:
            node, step = item
            pairs.append((int(node), int(step)))
    return tuple(pairs)


def cmd_shard_sim(resolved: dict) -> int:
    _require(resolved, "model", "prompt", "shards", "out")
    model = load_model(resolved["model"])
    if model.domain != CIPHERTEXT:
        raise DomainError("shard-sim runs the encrypted model; encrypt it first")
    plan = shard_mod.plan_shards(model.config, resolved["shards"])
    broker = shard_mod.BrokerConfig(
        seed=resolved["seed"],
        latency_lo=resolved["latency_lo"],
        latency_hi=resolved["latency_hi"],
        failures=_parse_failures(resolved["fail"]),
        spares=resolved["spares"],
    )
    prompt_ids = _parse_ids(resolved["prompt"])
    key = load_key(resolved["key"]) if resolved["key"] else None
    if key is not None:
        check_pairing(key, model.config)
        enc_prompt = encrypt_tokens(key, TokenSeq(prompt_ids, PLAINTEXT))
    else:
        enc_prompt = TokenSeq(prompt_ids, CIPHERTEXT)
    out, transcript = shard_mod.run_pipeline(
        model, plan, broker, enc_prompt, resolved["n_new"]
    )
    base = Path(resolved["out"])
    base.parent.mkdir(parents=True, exist_ok=True)
    transcript_path = base.with_name(base.name + ".transcript.jsonl")
    shard_mod.save_transcript(transcript, transcript_path)
    print(f"transcript hash {transcript.hash()}")
    if key is not None:
        plain_out = decrypt_tokens(key, out)
        ctx = shard_mod.PlaintextContext(
            prompt=TokenSeq(prompt_ids, PLAINTEXT), output=plain_out
        )
        audit = shard_mod.audit_blindness(transcript, ctx)
        audit_path = base.with_name(base.name + ".audit.json")
        audit_path.write_text(
            json.dumps(
                {
                    "passed": audit.passed,
                    "failures": list(audit.failures),
                    "warnings": list(audit.warnings),
                    "checked_entries": audit.checked_entries,
                },
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
        print(f"audit {'passed' if audit.passed else 'FAILED'}; wrote {audit_path}")
        print(" ".join(str(t) for t in plain_out.ids))
    else:
        print(" ".join(str(t) for t in out.ids))
    _record_resolved(resolved["out"], "shard-sim", resolved)
    return 0


def cmd_make_corpus(resolved: dict) -> int:
    _require(resolved, "model", "key", "n_pairs", "prompt_len", "n_new", "seed", "out")
    model = load_model(resolved["model"])
    key = load_key(resolved["key"])
    check_pairing(key, model.config)
    corpus = attack_mod.generate_corpus(
        model,
        key,
        n_pairs=resolved["n_pairs"],
        prompt_len=resolved["prompt_len"],
        n_new=resolved["n_new"],
        seed=resolved["seed"],
    )
    Path(resolved["out"]).parent.mkdir(parents=True, exist_ok=True)
    attack_mod.save_corpus(corpus, resolved["out"])
    if resolved["refs_out"]:
        truth = key.vocab_perm.inverse()
        uni = attack_mod.empirical_unigram(corpus, truth)
        bi = attack_mod.empirical_bigram(corpus, truth)
        refs_base = Path(resolved["refs_out"])
        refs_base.parent.mkdir(parents=True, exist_ok=True)
        uni_path = refs_base.with_name(refs_base.name + ".unigram.json")
        bi_path = refs_base.with_name(refs_base.name + ".bigram.json")
        uni_path.write_text(json.dumps(uni.tolist()) + "\n", encoding="utf-8")
        bi_path.write_text(
            json.dumps({str(c): {str(n): p for n, p in row.items()} for c, row in bi.items()})
            + "\n",
            encoding="utf-8",
        )
        print(f"wrote references {uni_path} and {bi_path}")
    _record_resolved(resolved["out"], "make-corpus", resolved)
    print(f"wrote {len(corpus.pairs)} ciphertext pairs to {resolved['out']}")
    return 0


def cmd_make_prompts(resolved: dict) -> int:
    _require(resolved, "model", "n", "length", "seed", "out")
    model = load_model(resolved["model"])
    prompts = bench_mod.random_prompts(
        model.config, resolved["n"], resolved["length"], resolved["seed"]
    )
    Path(resolved["out"]).parent.mkdir(parents=True, exist_ok=True)
    bench_mod.save_prompts(prompts, resolved["out"])
    _record_resolved(resolved["out"], "make-prompts", resolved)
    print(f"wrote {len(prompts)} prompts to {resolved['out']}")
    return 0


# ------------------------------------------------------------------ plumbing

_S = argparse.SUPPRESS


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eeinfer",
        description="Blind transformer inference with equivariant encryption.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, defaults: dict, flags):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON file of flag values")
        for flag, kwargs in flags:
            p.add_argument(flag, default=_S, **kwargs)
        p.set_defaults(_func=func, _defaults=defaults)
        return p

    add(
        "init-model",
        cmd_init_model,
        {
            "vocab_size": None, "d_model": None, "n_layers": None, "n_heads": None,
            "d_ff": None, "max_seq_len": None, "d_head": None,
            "norm_kind": "layernorm", "act_kind": "gelu", "seed": None,
            "out": None, "config_out": None,
        },
        [
            ("--vocab-size", dict(type=int)), ("--d-model", dict(type=int)),
            ("--n-layers", dict(type=int)), ("--n-heads", dict(type=int)),
            ("--d-ff", dict(type=int)), ("--max-seq-len", dict(type=int)),
            ("--d-head", dict(type=int)), ("--norm-kind", dict()),
            ("--act-kind", dict()), ("--seed", dict(type=int)),
            ("--out", dict()), ("--config-out", dict()),
        ],
    )
    add(
        "keygen",
        cmd_keygen,
        {"model_config": None, "seed": None, "out": None, "identity": False},
        [
            ("--model-config", dict()), ("--seed", dict(type=int)),
            ("--out", dict()), ("--identity", dict(action="store_true")),
        ],
    )
    add(
        "encrypt-model",
        cmd_encrypt_model,
        {"model": None, "key": None, "out": None},
        [("--model", dict()), ("--key", dict()), ("--out", dict())],
    )
    add(
        "infer",
        cmd_infer,
        {"model": None, "key": None, "prompt": None, "n_new": None},
        [
            ("--model", dict()), ("--key", dict()),
            ("--prompt", dict()), ("--n-new", dict(type=int)),
        ],
    )
    add(
        "fidelity",
        cmd_fidelity,
        {
            "vi_model": None, "ee_model": None, "key": None, "prompts": None,
            "out": None, "n_new": 8, "repeats": 5, "model_name": "toy-decoder",
        },
        [
            ("--vi-model", dict()), ("--ee-model", dict()), ("--key", dict()),
            ("--prompts", dict()), ("--out", dict()),
            ("--n-new", dict(type=int)), ("--repeats", dict(type=int)),
            ("--model-name", dict()),
        ],
    )
    add(
        "attack",
        cmd_attack,
        {
            "method": None, "corpus": None, "vocab_size": None, "out": None,
            "lambda_uni": 0.0, "lambda_bi": 0.0, "lambda_cons": 0.0,
            "ref_unigram": None, "ref_bigram": None, "oracle_model": None,
            "seed": 0, "budget": 1000, "restarts": 1, "samples": None,
        },
        [
            ("--method", dict(choices=["brute", "random", "hill"])),
            ("--corpus", dict()), ("--vocab-size", dict(type=int)),
            ("--out", dict()), ("--lambda-uni", dict(type=float)),
            ("--lambda-bi", dict(type=float)), ("--lambda-cons", dict(type=float)),
            ("--ref-unigram", dict()), ("--ref-bigram", dict()),
            ("--oracle-model", dict()), ("--seed", dict(type=int)),
            ("--budget", dict(type=int)), ("--restarts", dict(type=int)),
            ("--samples", dict(type=int)),
        ],
    )
    add(
        "shard-sim",
        cmd_shard_sim,
        {
            "model": None, "key": None, "prompt": None, "shards": None,
            "n_new": 8, "seed": 0, "latency_lo": 0.0, "latency_hi": 0.0,
            "fail": (), "spares": 0, "out": None,
        },
        [
            ("--model", dict()), ("--key", dict()), ("--prompt", dict()),
            ("--shards", dict(type=int)), ("--n-new", dict(type=int)),
            ("--seed", dict(type=int)), ("--latency-lo", dict(type=float)),
            ("--latency-hi", dict(type=float)),
            ("--fail", dict(action="append", metavar="NODE:STEP")),
            ("--spares", dict(type=int)), ("--out", dict()),
        ],
    )
    add(
        "make-corpus",
        cmd_make_corpus,
        {
            "model": None, "key": None, "n_pairs": None, "prompt_len": None,
            "n_new": None, "seed": None, "out": None, "refs_out": None,
        },
        [
            ("--model", dict()), ("--key", dict()), ("--n-pairs", dict(type=int)),
            ("--prompt-len", dict(type=int)), ("--n-new", dict(type=int)),
            ("--seed", dict(type=int)), ("--out", dict()), ("--refs-out", dict()),
        ],
    )
    add(
        "make-prompts",
        cmd_make_prompts,
        {"model": None, "n": None, "length": None, "seed": None, "out": None},
        [
            ("--model", dict()), ("--n", dict(type=int)),
            ("--length", dict(type=int)), ("--seed", dict(type=int)),
            ("--out", dict()),
        ],
    )
    return parser


def _resolve(args: argparse.Namespace) -> tuple:
    ns = vars(args).copy()
    func = ns.pop("_func")
    defaults = ns.pop("_defaults")
    command = ns.pop("command")
    config_path = ns.pop("config", None)
    file_values = {}
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                file_values = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config file {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(file_values, dict):
            raise FormatError(f"config file {config_path} must be a JSON object")
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ConfigError(
                f"config file has unknown keys for {command}: {', '.join(sorted(unknown))}"
            )
    resolved = {**defaults, **file_values, **ns}
    return func, command, resolved


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        func, _, resolved = _resolve(args)
        return func(resolved)
    except _Usage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EEError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
