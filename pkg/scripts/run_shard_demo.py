#!/usr/bin/env python3
"""Sharded blind-inference demo with a mid-run node failure.

Splits an encrypted 4 layer decoder across 4 nodes plus one spare, kills a
node partway through decoding, and shows that the pipeline output still
matches monolithic decoding exactly. Audits the wire transcript for
plaintext leakage twice: once under a random key (should pass) and once
under the identity key (should fail, the traffic is the plaintext).
"""
from __future__ import annotations

import argparse
from pathlib import Path

from eeinfer.encryption import decrypt_tokens, encrypt_model, encrypt_tokens, keygen
from eeinfer.model import PLAINTEXT, TokenSeq, greedy_decode, init_model, make_config
from eeinfer.shard_sim import (
    BrokerConfig,
    PlaintextContext,
    audit_blindness,
    plan_shards,
    run_pipeline,
    save_transcript,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="results/shard")
    ap.add_argument("--n-shards", type=int, default=4)
    ap.add_argument("--n-new", type=int, default=8)
    ap.add_argument("--fail-step", type=int, default=10)
    args = ap.parse_args()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    config = make_config(32, 16, 4, 2, 32, 16)
    model = init_model(config, seed=21)
    prompt = TokenSeq((3, 14, 15, 9, 2, 6), PLAINTEXT)
    plan = plan_shards(config, args.n_shards)
    broker = BrokerConfig(
        seed=17,
        latency_lo=0.001,
        latency_hi=0.01,
        failures=((2, args.fail_step),),
        spares=1,
    )
    plain_out = greedy_decode(model, prompt, args.n_new)

    for name, key in (
        ("random-key", keygen(config, seed=55)),
        ("identity-key", keygen(config, seed=0, identity=True)),
    ):
        enc_model = encrypt_model(key, model)
        enc_prompt = encrypt_tokens(key, prompt)
        out, transcript = run_pipeline(enc_model, plan, broker, enc_prompt, args.n_new)
        mono = greedy_decode(enc_model, enc_prompt, args.n_new)
        save_transcript(transcript, out_dir / f"{name}.transcript.jsonl")

        kinds = [e["kind"] for e in transcript.entries]
        audit = audit_blindness(
            transcript, PlaintextContext(prompt, plain_out, model=model, plan=plan)
        )
        print(f"{name}:")
        print(f"  pipeline == monolithic: {out == mono}")
        print(f"  decrypted == plaintext decode: {decrypt_tokens(key, out) == plain_out}")
        print(
            f"  transcript: {len(transcript)} entries, "
            f"{kinds.count('failure')} failure / {kinds.count('reassign')} reassign, "
            f"hash {transcript.hash()[:16]}"
        )
        verdict = "passed" if audit.passed else "FAILED"
        print(f"  blindness audit: {verdict} ({audit.checked_entries} entries checked)")
        for line in audit.failures:
            print(f"    leak: {line}")


if __name__ == "__main__":
    main()
