"""Shared fixtures: synthetic vocabulary, tiny converted model, images.

The tiny model has real geometry (patch embed, positional table, blocks,
projections) at small dims so every code path runs in milliseconds;
tests that need ViT-B/16 geometry build it locally.
"""

import gzip
import json
import math
import os

import numpy as np
import pytest
import torch
from PIL import Image

from corrseg.weights import convert_checkpoint

WORDS = [
    "a", "the", "photo", "of", "dog", "cat", "grass", "sky",
    "person", "car", "tree", "bird", "in", "wild", "itap",
]

TINY = {
    "vision_width": 32,
    "vision_layers": 3,
    "vision_heads": 2,
    "patch": 16,
    "grid": 3,  # native side 48
    "embed_dim": 16,
    "text_width": 16,
    "text_layers": 2,
    "text_heads": 2,
    "context": 77,
}

TINY_TEMPLATES = ["a photo of a {}.", "a {} in the wild.", "itap of a {}."]


def build_merges(words):
    """Left-to-right merge chains that fully fuse each word."""
    merges, seen = [], set()
    for word in words:
        sym = list(word[:-1]) + [word[-1] + "</w>"]
        while len(sym) > 1:
            pair = (sym[0], sym[1])
            if pair not in seen:
                seen.add(pair)
                merges.append(pair)
            sym = [sym[0] + sym[1]] + sym[2:]
    return merges


def write_vocab(path, words=WORDS):
    merges = build_merges(words)
    text = "synthetic bpe vocab v1\n" + "\n".join(f"{a} {b}" for a, b in merges) + "\n"
    if str(path).endswith(".gz"):
        with gzip.open(path, "wb") as f:
            f.write(text.encode("utf-8"))
    else:
        with open(path, "w") as f:
            f.write(text)
    return 512 + len(merges) + 2


def make_openai_state(
    vision_width,
    vision_layers,
    vision_heads,
    patch,
    grid,
    embed_dim,
    text_width,
    text_layers,
    text_heads,
    context,
    vocab_size,
    seed=0,
):
    """Random state dict in the original published layout (fused in_proj)."""
    g = torch.Generator().manual_seed(seed)

    def r(*shape, scale=None):
        t = torch.randn(*shape, generator=g)
        return t * (scale if scale is not None else shape[-1] ** -0.5)

    state = {
        "visual.conv1.weight": r(vision_width, 3, patch, patch, scale=0.05),
        "visual.class_embedding": r(vision_width, scale=0.1),
        "visual.positional_embedding": r(grid * grid + 1, vision_width, scale=0.1),
        "visual.ln_pre.weight": torch.ones(vision_width),
        "visual.ln_pre.bias": torch.zeros(vision_width),
        "visual.ln_post.weight": torch.ones(vision_width),
        "visual.ln_post.bias": torch.zeros(vision_width),
        "visual.proj": r(vision_width, embed_dim),
        "token_embedding.weight": r(vocab_size, text_width, scale=0.02),
        "positional_embedding": r(context, text_width, scale=0.01),
        "ln_final.weight": torch.ones(text_width),
        "ln_final.bias": torch.zeros(text_width),
        "text_projection": r(text_width, embed_dim),
        "logit_scale": torch.tensor(math.log(100.0)),
    }

    def block(prefix, width):
        state[f"{prefix}.ln_1.weight"] = torch.ones(width)
        state[f"{prefix}.ln_1.bias"] = torch.zeros(width)
        state[f"{prefix}.attn.in_proj_weight"] = r(3 * width, width)
        state[f"{prefix}.attn.in_proj_bias"] = r(3 * width, scale=0.02)
        state[f"{prefix}.attn.out_proj.weight"] = r(width, width)
        state[f"{prefix}.attn.out_proj.bias"] = r(width, scale=0.02)
        state[f"{prefix}.ln_2.weight"] = torch.ones(width)
        state[f"{prefix}.ln_2.bias"] = torch.zeros(width)
        state[f"{prefix}.mlp.c_fc.weight"] = r(4 * width, width)
        state[f"{prefix}.mlp.c_fc.bias"] = r(4 * width, scale=0.02)
        state[f"{prefix}.mlp.c_proj.weight"] = r(width, 4 * width)
        state[f"{prefix}.mlp.c_proj.bias"] = r(width, scale=0.02)

    for i in range(vision_layers):
        block(f"visual.transformer.resblocks.{i}", vision_width)
    for i in range(text_layers):
        block(f"transformer.resblocks.{i}", text_width)
    return state


@pytest.fixture(scope="session")
def vocab_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("vocab") / "bpe_vocab.txt.gz"
    write_vocab(path)
    return str(path)


@pytest.fixture(scope="session")
def tiny_archive(tmp_path_factory, vocab_file):
    """Tiny checkpoint saved in the published archive form (plus vocab)."""
    vocab_size = 512 + len(build_merges(WORDS)) + 2
    state = make_openai_state(
        TINY["vision_width"],
        TINY["vision_layers"],
        TINY["vision_heads"],
        TINY["patch"],
        TINY["grid"],
        TINY["embed_dim"],
        TINY["text_width"],
        TINY["text_layers"],
        TINY["text_heads"],
        TINY["context"],
        vocab_size,
    )
    root = tmp_path_factory.mktemp("archive")
    path = root / "tiny_checkpoint.pt"
    torch.save(state, path)
    import shutil

    shutil.copyfile(vocab_file, root / "bpe_vocab.txt.gz")
    return str(path)


@pytest.fixture(scope="session")
def tiny_weight_dir(tmp_path_factory, tiny_archive):
    out = tmp_path_factory.mktemp("weights") / "tiny"
    convert_checkpoint(
        tiny_archive,
        str(out),
        heads={"vision": TINY["vision_heads"], "text": TINY["text_heads"]},
    )
    return str(out)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_weight_dir):
    from corrseg.weights import load_bundle

    return load_bundle(tiny_weight_dir, require_tokenizer=True)


@pytest.fixture(scope="session")
def tiny_bank(tiny_bundle):
    from corrseg.textbank import encode_text_bank

    return encode_text_bank(["dog", "cat", "grass"], TINY_TEMPLATES, tiny_bundle)


def make_blocky_image(seed, size=(96, 128)):
    """Deterministic RGB test image: colored rectangles over noise."""
    rng = np.random.default_rng(seed)
    h, w = size
    img = rng.integers(0, 60, size=(h, w, 3), dtype=np.uint8) + 30
    colors = rng.integers(100, 255, size=(3, 3))
    img[: h // 2, : w // 2] = colors[0]
    img[h // 3 :, w // 2 :] = colors[1]
    img[2 * h // 3 :, : w // 3] = colors[2]
    return img


@pytest.fixture
def blocky_image():
    return make_blocky_image(0)


def make_label_image(seed, size=(96, 128), n_classes=3, ignore_band=False):
    rng = np.random.default_rng(seed + 1000)
    h, w = size
    labels = np.zeros((h, w), dtype=np.uint8)
    labels[: h // 2, : w // 2] = rng.integers(0, n_classes)
    labels[h // 3 :, w // 2 :] = rng.integers(0, n_classes)
    labels[2 * h // 3 :, : w // 3] = rng.integers(0, n_classes)
    if ignore_band:
        labels[:4, :] = 255
    return labels


@pytest.fixture(scope="session")
def synth_benchmark(tmp_path_factory):
    """Six-image benchmark on disk: images, labels, manifest."""
    root = tmp_path_factory.mktemp("bench")
    pairs = []
    for i in range(6):
        img = make_blocky_image(i, size=(64, 80))
        lbl = make_label_image(i, size=(64, 80), ignore_band=(i % 2 == 0))
        img_path = root / f"img_{i}.png"
        lbl_path = root / f"lbl_{i}.png"
        Image.fromarray(img, mode="RGB").save(img_path)
        Image.fromarray(lbl, mode="L").save(lbl_path)
        pairs.append([f"img_{i}.png", f"lbl_{i}.png"])
    manifest = {
        "root": str(root),
        "split": "val",
        "classes": ["dog", "cat", "grass"],
        "background_index": None,
        "ignore_index": 255,
        "pairs": pairs,
    }
    path = root / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f)
    return str(path)


def random_qkv(rng, n_heads, n_tokens, d_k):
    """Torch per-head q/k/v triple from a numpy generator."""
    return tuple(
        torch.from_numpy(rng.standard_normal((n_heads, n_tokens, d_k)).astype(np.float32))
        for _ in range(3)
    )
