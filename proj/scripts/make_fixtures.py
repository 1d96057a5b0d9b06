#!/usr/bin/env python3
"""Regenerate the reference fixtures under fixtures/.

Oracles:
  * tokenizer: the `tokenizers` byte-level BPE loaded from assets/tokenizer, cross-checked
    against a direct port of the original encoder.py (regex + rank-ordered merges).
  * logits: Hugging Face `GPT2LMHeadModel` (eager attention, float32) loaded from
    deterministic random checkpoints written by `workbench make-random-checkpoint`.

Usage: scripts/make_fixtures.py --workbench build/tools/workbench
"""
import argparse
import json
import pathlib
import subprocess
import tempfile

import numpy as np
import regex
import torch
from safetensors import safe_open
from tokenizers import Tokenizer, decoders, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel

ROOT = pathlib.Path(__file__).resolve().parent.parent
ASSETS = ROOT / "assets" / "tokenizer"
OUT = ROOT / "fixtures"

TOKENIZER_CASES = [
    "",
    " Mary",
    "When Mary and John went to the store, John gave a drink to",
    "Then, Sarah and Michael had a long argument. Afterwards Sarah said to",
    "It's what they'll do; we've seen it, haven't we? I'm sure he'd agree.",
    "Numbers: 3.14159, 2,718 and 1000000 -- plus 42nd street.",
    "   leading spaces and trailing   ",
    "tabs\tand\nnew\n\nlines \n here",
    "Café naïve résumé über straße",
    "日本語のテキスト and русский текст",
    "emoji \U0001F600\U0001F680 mixed with symbols @#$%^&*()",
    "The friends Anna and Ben found a ring at the garden. Ben said to",
    "''quoted'' 'single' \"double\" 's 't 're 've 'm 'll 'd 'S",
    "x" * 40 + " supercalifragilisticexpialidocious",
    " non-breaking em-space　ideographic",
]

LOGIT_PROMPTS = [
    "When Mary and John went to the store, John gave a drink to",
    "Then, Sarah and Michael had a long argument.",
    "The capital of France is",
    "After the lunch, Emily and Daniel went to the park. Daniel gave a ring to",
    "Friends separated at birth Lisa and Mark found a bone at the school. Mark gave it to",
    "Numbers 1 2 3 4 5 6 7 8 9 10",
    "It's what they'll do, isn't it?",
    "While Kate and Tom were working at the office, Tom gave a kiss to",
    "A B C D E F G A B C D E F G",
    "The quick brown fox jumps over the lazy dog near the river",
]

# Logits stored at every position for these ids; max and logsumexp cover the rest.
PROBE_IDS = sorted(set(list(range(0, 50257, 811)) + [11, 13, 284, 262, 290, 1757, 5335, 50256]))


def fnv1a64_file(path):
    h = 0xCBF29CE484222325
    data = pathlib.Path(path).read_bytes()
    arr = np.frombuffer(data, dtype=np.uint8)
    for b in arr.tolist():
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def hf_tokenizer():
    bpe = models.BPE.from_file(str(ASSETS / "encoder.json"), str(ASSETS / "vocab.bpe"))
    tok = Tokenizer(bpe)
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    return tok


class ReferenceEncoder:
    """Direct port of the original GPT-2 encoder.py."""

    def __init__(self):
        self.encoder = json.loads((ASSETS / "encoder.json").read_text())
        self.decoder = {v: k for k, v in self.encoder.items()}
        merges = (ASSETS / "vocab.bpe").read_text(encoding="utf-8").split("\n")[1:-1]
        self.ranks = {tuple(m.split()): i for i, m in enumerate(merges)}
        bs = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
        cs = bs[:]
        n = 0
        for b in range(256):
            if b not in bs:
                bs.append(b)
                cs.append(256 + n)
                n += 1
        self.byte_encoder = dict(zip(bs, map(chr, cs)))
        self.byte_decoder = {v: k for k, v in self.byte_encoder.items()}
        self.pat = regex.compile(r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""")

    def bpe(self, token):
        word = tuple(token)
        while len(word) > 1:
            pairs = {(word[i], word[i + 1]) for i in range(len(word) - 1)}
            best = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if best not in self.ranks:
                break
            first, second = best
            new, i = [], 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    new.append(first + second)
                    i += 2
                else:
                    new.append(word[i])
                    i += 1
            word = tuple(new)
        return word

    def encode(self, text):
        ids = []
        for chunk in regex.findall(self.pat, text):
            mapped = "".join(self.byte_encoder[b] for b in chunk.encode("utf-8"))
            ids.extend(self.encoder[p] for p in self.bpe(mapped))
        return ids

    def pretokenize(self, text):
        return regex.findall(self.pat, text)


def tokenizer_fixture():
    hf = hf_tokenizer()
    ref = ReferenceEncoder()
    cases = []
    for text in TOKENIZER_CASES:
        ids = hf.encode(text).ids
        assert ids == ref.encode(text), f"oracles disagree on {text!r}"
        assert hf.decode(ids) == text
        cases.append({"text": text, "ids": ids, "chunks": ref.pretokenize(text)})
    decode_cases = [{"ids": [15496, 995, 0, 220, 50256], "text": hf.decode([15496, 995, 0, 220, 50256])}]
    return {"oracle": "tokenizers BPE (ByteLevel, add_prefix_space=False) + encoder.py port",
            "cases": cases, "decode_cases": decode_cases}


def load_hf(path):
    with safe_open(str(path), "pt") as f:
        meta = f.metadata() or {}
        tensors = {k.removeprefix("transformer."): f.get_tensor(k) for k in f.keys()}
    if "n_layer" not in meta:  # pretrained HF checkpoint: GPT-2 small hyperparameters
        meta = {"vocab_size": 50257, "n_positions": 1024, "n_embd": 768, "n_layer": 12, "n_head": 12,
                "n_inner": 3072, "layer_norm_epsilon": 1e-5}
    cfg = GPT2Config(
        vocab_size=int(meta["vocab_size"]), n_positions=int(meta["n_positions"]),
        n_embd=int(meta["n_embd"]), n_layer=int(meta["n_layer"]), n_head=int(meta["n_head"]),
        n_inner=int(meta["n_inner"]), layer_norm_epsilon=float(meta["layer_norm_epsilon"]),
        activation_function="gelu_new", resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0,
        attn_implementation="eager", tie_word_embeddings=True,
    )
    model = GPT2LMHeadModel(cfg).eval()
    state = {"transformer." + k: v for k, v in tensors.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    missing = [m for m in missing if not m.endswith("attn.bias") and m != "lm_head.weight"]
    assert not missing and not unexpected, (missing, unexpected)
    model.tie_weights()
    assert torch.equal(model.lm_head.weight, tensors["wte.weight"])
    sums = {k: [float(v.double().sum()), float((v.double() ** 2).sum())] for k, v in tensors.items()}
    return model, meta, sums


def logits_fixture(workbench, shape, seed, with_fingerprint):
    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / f"{shape}.safetensors"
        out = subprocess.run([workbench, "make-random-checkpoint", "--out", str(path), "--shape", shape,
                              "--seed", str(seed)], check=True, capture_output=True, text=True)
        reported = out.stdout.strip()
        if with_fingerprint:
            assert f"{fnv1a64_file(path):016x}" == reported, "checkpoint fingerprint mismatch"
        model, meta, sums = load_hf(path)
    return logits_record(model, meta, sums, shape=shape, seed=seed, file_fingerprint=reported)


def logits_record(model, meta, sums, **extra):
    hf_tok = hf_tokenizer()
    prompts = []
    with torch.no_grad():
        for text in LOGIT_PROMPTS:
            ids = hf_tok.encode(text).ids
            logits = model(torch.tensor([ids])).logits[0].double()
            prompts.append({
                "text": text,
                "ids": ids,
                "argmax": logits.argmax(-1).tolist(),
                "max": logits.max(-1).values.tolist(),
                "logsumexp": torch.logsumexp(logits, -1).tolist(),
                "probe_logits": logits[:, PROBE_IDS].tolist(),
            })
    return {
        "oracle": f"transformers {__import__('transformers').__version__} GPT2LMHeadModel, eager, float32",
        **extra,
        "metadata": meta,
        "tensor_sums": sums,
        "probe_ids": PROBE_IDS,
        "prompts": prompts,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workbench", default=str(ROOT / "build" / "tools" / "workbench"))
    ap.add_argument("--skip-small", action="store_true")
    ap.add_argument("--gpt2-dir", help="directory with pretrained model.safetensors; writes logits_gpt2_small.json only")
    args = ap.parse_args()
    if args.gpt2_dir:
        path = pathlib.Path(args.gpt2_dir) / "model.safetensors"
        model, meta, sums = load_hf(path)
        record = logits_record(model, meta, sums, shape="gpt2-small", file_fingerprint=f"{fnv1a64_file(path):016x}")
        (OUT / "logits_gpt2_small.json").write_text(json.dumps(record))
        return
    OUT.mkdir(exist_ok=True)
    (OUT / "tokenizer_cases.json").write_text(json.dumps(tokenizer_fixture(), indent=1, ensure_ascii=False))
    tiny = logits_fixture(args.workbench, "tiny", 7, with_fingerprint=True)
    (OUT / "logits_tiny.json").write_text(json.dumps(tiny))
    if not args.skip_small:
        small = logits_fixture(args.workbench, "gpt2-small", 11, with_fingerprint=False)
        (OUT / "logits_gpt2_small_random.json").write_text(json.dumps(small))


if __name__ == "__main__":
    main()
