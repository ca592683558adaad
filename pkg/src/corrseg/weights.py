"""Checkpoint conversion and bundle loading.

The neutral weight directory holds one raw little-endian float32 ``.bin``
per tensor plus ``manifest.json`` mapping name -> {shape, dtype}. Model
geometry that shapes cannot carry (head counts) goes to ``config.json``;
when absent, heads default to width/64 (the family's fixed head size).
The tokenizer vocabulary distributed with the checkpoint is copied in as
``bpe_vocab.txt[.gz]``.

Two published layouts convert: the original state-dict archives
(``visual.transformer.resblocks.*``, fused in_proj) and transformers-style
checkpoints (``vision_model.encoder.layers.*``, separate q/k/v, transposed
projections).
"""

import json
import os
import re
import shutil

import numpy as np
import torch

from .errors import ModelError
from .model import ModelBundle
from .tokenizer import Tokenizer

VOCAB_BASENAMES = ("bpe_vocab.txt.gz", "bpe_vocab.txt")
_HEAD_DIM = 64  # fallback when config.json is absent


def _load_state_dict(path):
    """State dict from a checkpoint file or directory, any published form."""
    if os.path.isdir(path):
        for fn in ("model.safetensors", "pytorch_model.bin"):
            cand = os.path.join(path, fn)
            if os.path.exists(cand):
                return _load_state_dict(cand)
        raise ModelError(f"no model weights found in directory {path}")
    if path.endswith(".safetensors"):
        from safetensors.torch import load_file

        return load_file(path)
    try:
        obj = torch.load(path, map_location="cpu", weights_only=True)
    except Exception:
        try:
            obj = torch.jit.load(path, map_location="cpu").state_dict()
        except Exception as e:
            raise ModelError(f"cannot read checkpoint {path}: {e}") from e
    if hasattr(obj, "state_dict"):
        obj = obj.state_dict()
    if isinstance(obj, dict) and "state_dict" in obj and isinstance(obj["state_dict"], dict):
        obj = obj["state_dict"]
    if not isinstance(obj, dict):
        raise ModelError(f"checkpoint {path} does not contain a state dict")
    return obj


_OPENAI_FIXED = {
    "visual.conv1.weight": "visual.patch_embed.weight",
    "visual.class_embedding": "visual.class_embedding",
    "visual.positional_embedding": "visual.pos_embedding",
    "visual.ln_pre.weight": "visual.ln_pre.weight",
    "visual.ln_pre.bias": "visual.ln_pre.bias",
    "visual.ln_post.weight": "visual.ln_post.weight",
    "visual.ln_post.bias": "visual.ln_post.bias",
    "visual.proj": "visual.proj",
    "token_embedding.weight": "text.token_embedding.weight",
    "positional_embedding": "text.pos_embedding",
    "ln_final.weight": "text.ln_final.weight",
    "ln_final.bias": "text.ln_final.bias",
    "text_projection": "text.proj",
    "logit_scale": "logit_scale",
}

_OPENAI_BLOCK = {
    "ln_1.weight": "ln_1.weight",
    "ln_1.bias": "ln_1.bias",
    "attn.out_proj.weight": "attn.out_proj.weight",
    "attn.out_proj.bias": "attn.out_proj.bias",
    "ln_2.weight": "ln_2.weight",
    "ln_2.bias": "ln_2.bias",
    "mlp.c_fc.weight": "mlp.fc1.weight",
    "mlp.c_fc.bias": "mlp.fc1.bias",
    "mlp.c_proj.weight": "mlp.fc2.weight",
    "mlp.c_proj.bias": "mlp.fc2.bias",
}

_HF_FIXED = {
    "vision_model.embeddings.patch_embedding.weight": "visual.patch_embed.weight",
    "vision_model.embeddings.class_embedding": "visual.class_embedding",
    "vision_model.embeddings.position_embedding.weight": "visual.pos_embedding",
    "vision_model.pre_layrnorm.weight": "visual.ln_pre.weight",
    "vision_model.pre_layrnorm.bias": "visual.ln_pre.bias",
    "vision_model.post_layernorm.weight": "visual.ln_post.weight",
    "vision_model.post_layernorm.bias": "visual.ln_post.bias",
    "text_model.embeddings.token_embedding.weight": "text.token_embedding.weight",
    "text_model.embeddings.position_embedding.weight": "text.pos_embedding",
    "text_model.final_layer_norm.weight": "text.ln_final.weight",
    "text_model.final_layer_norm.bias": "text.ln_final.bias",
    "logit_scale": "logit_scale",
}

_HF_BLOCK = {
    "layer_norm1.weight": "ln_1.weight",
    "layer_norm1.bias": "ln_1.bias",
    "self_attn.q_proj.weight": "attn.q_proj.weight",
    "self_attn.q_proj.bias": "attn.q_proj.bias",
    "self_attn.k_proj.weight": "attn.k_proj.weight",
    "self_attn.k_proj.bias": "attn.k_proj.bias",
    "self_attn.v_proj.weight": "attn.v_proj.weight",
    "self_attn.v_proj.bias": "attn.v_proj.bias",
    "self_attn.out_proj.weight": "attn.out_proj.weight",
    "self_attn.out_proj.bias": "attn.out_proj.bias",
    "layer_norm2.weight": "ln_2.weight",
    "layer_norm2.bias": "ln_2.bias",
    "mlp.fc1.weight": "mlp.fc1.weight",
    "mlp.fc1.bias": "mlp.fc1.bias",
    "mlp.fc2.weight": "mlp.fc2.weight",
    "mlp.fc2.bias": "mlp.fc2.bias",
}

_OPENAI_BLOCK_RE = re.compile(
    r"^(visual\.transformer|transformer)\.resblocks\.(\d+)\.(.+)$"
)
_HF_BLOCK_RE = re.compile(r"^(vision_model|text_model)\.encoder\.layers\.(\d+)\.(.+)$")


def _map_openai(state):
    out = {}
    unmapped = []
    for name, tensor in state.items():
        if name in _OPENAI_FIXED:
            out[_OPENAI_FIXED[name]] = tensor
            continue
        m = _OPENAI_BLOCK_RE.match(name)
        if m:
            tower = "visual" if m.group(1) == "visual.transformer" else "text"
            idx, rest = m.group(2), m.group(3)
            if rest in _OPENAI_BLOCK:
                out[f"{tower}.blocks.{idx}.{_OPENAI_BLOCK[rest]}"] = tensor
                continue
            if rest in ("attn.in_proj_weight", "attn.in_proj_bias"):
                d = tensor.shape[0] // 3
                kind = "weight" if rest.endswith("weight") else "bias"
                for part, chunk in zip(("q", "k", "v"), torch.split(tensor, d, dim=0)):
                    out[f"{tower}.blocks.{idx}.attn.{part}_proj.{kind}"] = chunk
                continue
        unmapped.append(name)
    return out, unmapped


def _map_hf(state):
    out = {}
    unmapped = []
    for name, tensor in state.items():
        if name.endswith("position_ids"):
            continue  # non-parameter buffer in some releases
        if name in _HF_FIXED:
            out[_HF_FIXED[name]] = tensor
            continue
        if name == "visual_projection.weight":
            out["visual.proj"] = tensor.t().contiguous()
            continue
        if name == "text_projection.weight":
            out["text.proj"] = tensor.t().contiguous()
            continue
        m = _HF_BLOCK_RE.match(name)
        if m:
            tower = "visual" if m.group(1) == "vision_model" else "text"
            idx, rest = m.group(2), m.group(3)
            if rest in _HF_BLOCK:
                out[f"{tower}.blocks.{idx}.{_HF_BLOCK[rest]}"] = tensor
                continue
        unmapped.append(name)
    return out, unmapped


def _detect_layout(state):
    if any(k.startswith("vision_model.") for k in state):
        return "transformers"
    if any(k.startswith("visual.transformer.") for k in state):
        return "openai"
    raise ModelError(
        "unrecognized checkpoint layout; expected visual.transformer.* or vision_model.*"
    )


def _count_blocks(tensors, tower):
    pat = re.compile(rf"^{tower}\.blocks\.(\d+)\.")
    idx = {int(m.group(1)) for m in (pat.match(k) for k in tensors) if m}
    if not idx or idx != set(range(max(idx) + 1)):
        raise ModelError(f"non-contiguous block indices for {tower}: {sorted(idx)}")
    return max(idx) + 1


def _require(shapes, name):
    if name not in shapes:
        raise ModelError(f"missing tensor: {name}")
    return shapes[name]


def _geometry(shapes, heads=None):
    """Model config derived from a {name: shape} mapping."""
    width = int(_require(shapes, "visual.ln_pre.weight")[0])
    text_width = int(_require(shapes, "text.token_embedding.weight")[1])
    return {
        "vision": {
            "width": width,
            "layers": _count_blocks(shapes, "visual"),
            "heads": heads["vision"] if heads else width // _HEAD_DIM,
            "patch_size": int(_require(shapes, "visual.patch_embed.weight")[-1]),
        },
        "text": {
            "width": text_width,
            "layers": _count_blocks(shapes, "text"),
            "heads": heads["text"] if heads else text_width // _HEAD_DIM,
            "vocab_size": int(shapes["text.token_embedding.weight"][0]),
            "context_length": int(_require(shapes, "text.pos_embedding")[0]),
        },
        "embed_dim": int(_require(shapes, "visual.proj")[1]),
    }


_BLOCK_PARTS = (
    ("ln_1.weight", "1d"),
    ("ln_1.bias", "1d"),
    ("attn.q_proj.weight", "2d"),
    ("attn.q_proj.bias", "1d"),
    ("attn.k_proj.weight", "2d"),
    ("attn.k_proj.bias", "1d"),
    ("attn.v_proj.weight", "2d"),
    ("attn.v_proj.bias", "1d"),
    ("attn.out_proj.weight", "2d"),
    ("attn.out_proj.bias", "1d"),
    ("ln_2.weight", "1d"),
    ("ln_2.bias", "1d"),
)


def _check_shapes(shapes, config):
    """Cross-tensor shape consistency; raises listing every violation."""
    v, t = config["vision"], config["text"]
    d, e, dt = v["width"], config["embed_dim"], t["width"]
    expect = {
        "visual.patch_embed.weight": (d, 3, v["patch_size"], v["patch_size"]),
        "visual.class_embedding": (d,),
        "visual.ln_pre.weight": (d,),
        "visual.ln_pre.bias": (d,),
        "visual.ln_post.weight": (d,),
        "visual.ln_post.bias": (d,),
        "visual.proj": (d, e),
        "text.token_embedding.weight": (t["vocab_size"], dt),
        "text.pos_embedding": (t["context_length"], dt),
        "text.ln_final.weight": (dt,),
        "text.ln_final.bias": (dt,),
        "text.proj": (dt, e),
        "logit_scale": (),
    }
    for tower, width, layers in (("visual", d, v["layers"]), ("text", dt, t["layers"])):
        for i in range(layers):
            p = f"{tower}.blocks.{i}"
            for part, kind in _BLOCK_PARTS:
                expect[f"{p}.{part}"] = (width, width) if kind == "2d" else (width,)
            hidden = shapes.get(f"{p}.mlp.fc1.weight", (None, None))[0]
            expect[f"{p}.mlp.fc1.weight"] = (hidden, width)
            expect[f"{p}.mlp.fc1.bias"] = (hidden,)
            expect[f"{p}.mlp.fc2.weight"] = (width, hidden)
            expect[f"{p}.mlp.fc2.bias"] = (width,)
    bad = []
    for name, shape in expect.items():
        if name not in shapes:
            bad.append(f"missing {name}")
        elif tuple(shapes[name]) != shape:
            bad.append(f"{name}: got {tuple(shapes[name])}, want {shape}")
    if "visual.pos_embedding" not in shapes:
        bad.append("missing visual.pos_embedding")
    else:
        pos_rows = shapes["visual.pos_embedding"][0] - 1
        grid = int(round(pos_rows**0.5))
        if grid * grid != pos_rows or tuple(shapes["visual.pos_embedding"])[1:] != (d,):
            bad.append(
                f"visual.pos_embedding: got {tuple(shapes['visual.pos_embedding'])}, "
                f"want (grid^2+1, {d})"
            )
    if bad:
        raise ModelError("shape mismatch vs. manifest schema:\n  " + "\n  ".join(bad))


def _shape_map(tensors):
    return {name: tuple(t.shape) for name, t in tensors.items()}


def _find_vocab(archive_path):
    base = archive_path if os.path.isdir(archive_path) else os.path.dirname(archive_path)
    candidates = list(VOCAB_BASENAMES) + [
        "bpe_simple_vocab_16e6.txt.gz",
        "merges.txt",
    ]
    for name in candidates:
        cand = os.path.join(base, name)
        if os.path.exists(cand):
            return cand
    return None


def convert_checkpoint(archive_path, out_dir, vocab_path=None, heads=None):
    """Convert a published checkpoint into the neutral weight directory.

    Returns the manifest dict. Unknown parameter names are a hard error
    listing every unmapped key; so is any cross-tensor shape violation.
    Conversion is lossless (fp16/bf16 widen exactly to float32).
    """
    state = _load_state_dict(archive_path)
    layout = _detect_layout(state)
    mapped, unmapped = (_map_hf if layout == "transformers" else _map_openai)(state)
    if unmapped:
        raise ModelError(
            f"unknown parameter names in {layout} checkpoint: {sorted(unmapped)}"
        )
    tensors = {}
    for name, tensor in mapped.items():
        arr = tensor.detach().cpu()
        if arr.dtype == torch.float64:
            raise ModelError(f"{name} is float64; refusing lossy narrowing")
        tensors[name] = arr.to(torch.float32).numpy()

    shapes = {name: tuple(a.shape) for name, a in tensors.items()}
    config = _geometry(shapes, heads=heads)
    _check_shapes(shapes, config)

    os.makedirs(out_dir, exist_ok=True)
    manifest = {}
    for name, arr in sorted(tensors.items()):
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-dim scalars 0-dim
        with open(os.path.join(out_dir, name + ".bin"), "wb") as f:
            f.write(arr.tobytes())
        manifest[name] = {"shape": list(arr.shape), "dtype": "float32"}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump({"source": layout, **config}, f, indent=2)
        f.write("\n")

    vocab = vocab_path or _find_vocab(archive_path)
    if vocab:
        dest = VOCAB_BASENAMES[0] if str(vocab).endswith(".gz") else VOCAB_BASENAMES[1]
        shutil.copyfile(vocab, os.path.join(out_dir, dest))
    return manifest


def read_manifest(weight_dir):
    path = os.path.join(weight_dir, "manifest.json")
    if not os.path.exists(path):
        raise ModelError(f"no manifest.json in {weight_dir}")
    with open(path) as f:
        return json.load(f)


def load_tensors(weight_dir):
    """All tensors listed in the manifest, as float32 torch tensors."""
    manifest = read_manifest(weight_dir)
    tensors = {}
    for name, meta in manifest.items():
        path = os.path.join(weight_dir, name + ".bin")
        if not os.path.exists(path):
            raise ModelError(f"missing tensor file: {path}")
        arr = np.fromfile(path, dtype="<f4")
        expected = int(np.prod(meta["shape"])) if meta["shape"] else 1
        if arr.size != expected:
            raise ModelError(
                f"{path}: {arr.size} values on disk, manifest shape {meta['shape']}"
            )
        t = torch.from_numpy(arr.astype(np.float32).reshape(meta["shape"]))
        t.requires_grad_(False)
        tensors[name] = t
    return tensors


def load_bundle(weight_dir, require_tokenizer=False):
    """Neutral weight directory -> ModelBundle (with tokenizer when present)."""
    tensors = load_tensors(weight_dir)
    cfg_path = os.path.join(weight_dir, "config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path) as f:
            config = json.load(f)
    else:
        config = _geometry(_shape_map(tensors))
    _check_shapes(_shape_map(tensors), config)

    tokenizer = None
    for name in VOCAB_BASENAMES:
        cand = os.path.join(weight_dir, name)
        if os.path.exists(cand):
            tokenizer = Tokenizer(cand)
            break
    if tokenizer is None and require_tokenizer:
        raise ModelError(
            f"no tokenizer vocabulary ({' or '.join(VOCAB_BASENAMES)}) in {weight_dir}"
        )
    return ModelBundle(tensors, config, tokenizer=tokenizer)
