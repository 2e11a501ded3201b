"""Build the tiny random-weight GPT-2 fixture and reference outputs.

Writes assets/fixtures/tiny-gpt2/{model.safetensors,config.json,golden.json}.
The reference outputs come from transformers' GPT2LMHeadModel in float64.
"""
import json
import pathlib

import torch
from safetensors.torch import save_file
from transformers import GPT2Config, GPT2LMHeadModel

ROOT = pathlib.Path(__file__).resolve().parents[1]
OUT = ROOT / "assets/fixtures/tiny-gpt2"
STRIDE = 97

PROMPTS = [
    [464, 3807, 373, 922, 13],
    [464, 3807, 373, 407, 922, 13],
    [40, 1842, 428, 4479],
    [15496],
    [464, 2057, 373, 7818, 290, 262, 2139, 373, 3105, 13],
    [1870, 1312, 1101, 257, 1310, 23541, 11, 475, 340, 373, 4998, 13],
    [50256, 464, 50256],
    list(range(1000, 1040)),
    [262] * 20,
    [11, 13, 30, 0, 1, 2, 3],
]


def golden_cases(model):
    """Float64 reference outputs for PROMPTS from a GPT2LMHeadModel."""
    cases = []
    with torch.no_grad():
        for ids in PROMPTS:
            out = model(torch.tensor([ids]), output_hidden_states=True)
            logits = out.logits[0]
            hs = out.hidden_states
            cases.append({
                "ids": ids,
                "stride": STRIDE,
                "logits": logits[:, ::STRIDE].tolist(),
                "argmax": logits.argmax(-1).tolist(),
                # Residual stream at the last position: embedding, then each block
                # output before the final norm; the last entry is post final norm.
                "resid_last": [x[0, -1].tolist() for x in hs[:-1]],
                "final_post_ln_last": hs[-1][0, -1].tolist(),
            })
    return cases


def main():
    torch.manual_seed(20240611)
    cfg = GPT2Config(
        vocab_size=50257,
        n_positions=128,
        n_embd=64,
        n_layer=2,
        n_head=4,
        activation_function="gelu_new",
        layer_norm_epsilon=1e-5,
        initializer_range=0.2,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
    )
    model = GPT2LMHeadModel(cfg).eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name == "transformer.ln_f.weight":
                p.copy_(1.0 + 0.3 * torch.randn_like(p))
            elif name.endswith(".bias"):
                p.copy_(0.1 * torch.randn_like(p))

    sd = {k: v.detach().float().contiguous() for k, v in model.transformer.state_dict().items()}
    d = cfg.n_embd
    t = {"embed.token": sd["wte.weight"], "embed.position": sd["wpe.weight"]}
    for i in range(cfg.n_layer):
        h, p = f"h.{i}", f"blocks.{i}"
        t[f"{p}.ln1.scale"] = sd[f"{h}.ln_1.weight"]
        t[f"{p}.ln1.bias"] = sd[f"{h}.ln_1.bias"]
        w, b = sd[f"{h}.attn.c_attn.weight"], sd[f"{h}.attn.c_attn.bias"]
        for j, proj in enumerate("qkv"):
            t[f"{p}.attn.{proj}.weight"] = w[:, j * d:(j + 1) * d].contiguous()
            t[f"{p}.attn.{proj}.bias"] = b[j * d:(j + 1) * d].contiguous()
        t[f"{p}.attn.o.weight"] = sd[f"{h}.attn.c_proj.weight"]
        t[f"{p}.attn.o.bias"] = sd[f"{h}.attn.c_proj.bias"]
        t[f"{p}.ln2.scale"] = sd[f"{h}.ln_2.weight"]
        t[f"{p}.ln2.bias"] = sd[f"{h}.ln_2.bias"]
        t[f"{p}.mlp.in.weight"] = sd[f"{h}.mlp.c_fc.weight"]
        t[f"{p}.mlp.in.bias"] = sd[f"{h}.mlp.c_fc.bias"]
        t[f"{p}.mlp.out.weight"] = sd[f"{h}.mlp.c_proj.weight"]
        t[f"{p}.mlp.out.bias"] = sd[f"{h}.mlp.c_proj.bias"]
    t["final_ln.scale"] = sd["ln_f.weight"]
    t["final_ln.bias"] = sd["ln_f.bias"]
    OUT.mkdir(parents=True, exist_ok=True)
    save_file(t, OUT / "model.safetensors", metadata={"source": "random GPT2LMHeadModel"})

    (OUT / "config.json").write_text(json.dumps({
        "n_layers": cfg.n_layer, "d_model": d, "n_heads": cfg.n_head, "d_head": d // cfg.n_head,
        "d_mlp": 4 * d, "vocab": cfg.vocab_size, "max_context": cfg.n_positions,
        "layernorm_epsilon": 1e-5, "activation": "gelu_tanh",
    }, indent=2) + "\n")

    # Reference run in float64 on the float32-rounded weights.
    cases = golden_cases(model.double())
    (OUT / "golden.json").write_text(json.dumps({"cases": cases}) + "\n")
    print("wrote", OUT)


if __name__ == "__main__":
    main()
