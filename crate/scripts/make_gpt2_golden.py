#!/usr/bin/env python3
"""Reference outputs of the published GPT-2 small checkpoint, for forward parity.

    python scripts/make_gpt2_golden.py [--model gpt2|/local/checkpoint] --out weights/gpt2/golden.json

Same prompts and layout as the fixture's golden.json; computed in float64.
"""
import argparse
import json
import pathlib

from transformers import GPT2LMHeadModel

from make_fixture import golden_cases


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", default="gpt2")
    ap.add_argument("--out", type=pathlib.Path, required=True)
    args = ap.parse_args()
    model = GPT2LMHeadModel.from_pretrained(args.model).eval().double()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps({"cases": golden_cases(model)}) + "\n")
    print("wrote", args.out)


if __name__ == "__main__":
    main()
