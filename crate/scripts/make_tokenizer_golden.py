#!/usr/bin/env python3
"""Write assets/gpt2/tokenizer_golden.jsonl using the reference GPT-2 tokenizer.

Covers every template of the suite and probe banks (rendered with both the
clean and corrupted fillers), a set of hand-picked edge cases, and seeded
random Unicode strings. Runs offline against the checked-in vocabulary.
"""
import json
import random
import re
import shutil
import tempfile
from pathlib import Path

import toml
from transformers import GPT2Tokenizer

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "crates" / "core" / "data"
ASSETS = ROOT / "assets" / "gpt2"


def render(template, pick):
    return re.sub(r"\{(\w+)\}", lambda m: pick(m.group(1)), template)


def template_strings():
    tpl = toml.load(DATA / "templates.toml")
    contexts = tpl.get("contexts", {})
    out = []
    for ph in tpl["phenomenon"]:
        ctx = dict(contexts)
        ctx.update(ph.get("contexts", {}))
        slots = ph.get("slots", {})
        for t_idx, template in enumerate(ph["templates"]):
            for side in (0, 1):
                def pick(name):
                    if name in slots:
                        bank = slots[name]
                        return bank[t_idx % len(bank)][side]
                    bank = ctx[name]
                    return bank[t_idx % len(bank)]
                out.append(render(template, pick))
    probe = toml.load(DATA / "probe_corpus.toml")
    for t_idx, template in enumerate(probe["templates"]):
        for words in (probe["positive"], probe["negative"]):
            vals = {"subject": probe["subjects"][t_idx % len(probe["subjects"])],
                    "adj": words[t_idx % len(words)]}
            out.append(render(template, lambda n: vals[n]))
    return out


EDGE_CASES = [
    "",
    "The movie was good",
    "The movie was bad",
    "The movie was not good",
    "The film was definitely not excellent",
    "Great, another meeting",
    "I don't think it's not good",
    "They'll say we're fine; she'd agree, I'm sure, you've seen it.",
    "In 2023, 42 people paid $3.50 each (roughly 147.00 total).",
    "  leading and   repeated   spaces  ",
    "line one\nline two\n\n\tindented\r\nwindows",
    "trailing whitespace   \n",
    "café naïve résumé façade",
    "“curly quotes” — and en–dashes…",
    "日本語のテキスト and 中文 mixed",
    "emoji 🙂🎉 and flags 🇺🇸",
    "Ünïcödé ÀÉÎÕÜ ßøåæ",
    "ALL CAPS SHOUTING!!!",
    "snake_case and camelCase and kebab-case",
    "http://example.com/path?query=1&x=y",
    "email@example.org, #hashtag @mention",
    "'s 't 're 've 'm 'll 'd",
    "x" * 300,
    "The horror movie was terrifying",
    "Perfect, amazing weather",
    "utterly wonderful vs utterly awful",
]

ALPHABET = (
    list("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789")
    + list(" \t\n.,;:!?'\"()-_/")
    + list("éèüößçñøåÆ")
    + list("日本語中文한국어")
    + ["🙂", "🎉", "👍🏽", "​", " "]
)


def random_strings(n, seed=2024):
    rng = random.Random(seed)
    return ["".join(rng.choice(ALPHABET) for _ in range(rng.randint(1, 40))) for _ in range(n)]


def main():
    # The tokenizer class wants the Hugging Face file names.
    tmp = Path(tempfile.mkdtemp())
    shutil.copy(ASSETS / "encoder.json", tmp / "vocab.json")
    shutil.copy(ASSETS / "vocab.bpe", tmp / "merges.txt")
    tok = GPT2Tokenizer.from_pretrained(str(tmp))
    strings = []
    seen = set()
    for s in template_strings() + EDGE_CASES + random_strings(60):
        if s not in seen:
            seen.add(s)
            strings.append(s)
    with open(ASSETS / "tokenizer_golden.jsonl", "w", encoding="utf-8") as f:
        for s in strings:
            ids = tok.encode(s)
            assert tok.decode(ids, clean_up_tokenization_spaces=False) == s, repr(s)
            f.write(json.dumps({"text": s, "ids": ids}, ensure_ascii=False) + "\n")
    print(f"wrote {len(strings)} cases")


if __name__ == "__main__":
    main()
