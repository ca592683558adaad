import json
import os

import numpy as np
import pytest
import torch

from conftest import TINY, build_merges, WORDS, make_openai_state
from corrseg.errors import ModelError
from corrseg.weights import convert_checkpoint, load_bundle, load_tensors, read_manifest

VOCAB_SIZE = 512 + len(build_merges(WORDS)) + 2
HEADS = {"vision": TINY["vision_heads"], "text": TINY["text_heads"]}


def _tiny_state(seed=0):
    return make_openai_state(
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
        VOCAB_SIZE,
        seed=seed,
    )


def test_manifest_schema(tiny_weight_dir):
    manifest = read_manifest(tiny_weight_dir)
    for name, meta in manifest.items():
        assert set(meta) == {"shape", "dtype"}, name
        assert meta["dtype"] == "float32"
        assert os.path.exists(os.path.join(tiny_weight_dir, name + ".bin"))
    assert manifest["visual.proj"]["shape"] == [TINY["vision_width"], TINY["embed_dim"]]


def test_conversion_is_lossless_round_trip(tmp_path, tiny_archive):
    out = tmp_path / "w"
    convert_checkpoint(tiny_archive, str(out), heads=HEADS)
    state = torch.load(tiny_archive, map_location="cpu", weights_only=True)
    tensors = load_tensors(str(out))
    # spot-check direct names and the fused-qkv split, bit for bit
    np.testing.assert_array_equal(
        tensors["visual.patch_embed.weight"].numpy(), state["visual.conv1.weight"].numpy()
    )
    fused = state["visual.transformer.resblocks.0.attn.in_proj_weight"]
    d = TINY["vision_width"]
    np.testing.assert_array_equal(
        tensors["visual.blocks.0.attn.q_proj.weight"].numpy(), fused[:d].numpy()
    )
    np.testing.assert_array_equal(
        tensors["visual.blocks.0.attn.k_proj.weight"].numpy(), fused[d : 2 * d].numpy()
    )
    np.testing.assert_array_equal(
        tensors["visual.blocks.0.attn.v_proj.weight"].numpy(), fused[2 * d :].numpy()
    )


def test_tensor_and_parameter_counts_match_source(tmp_path, tiny_archive):
    # oracle: direct enumeration of the source archive's state entries;
    # the fused in_proj splits 2 entries into 6, total elements unchanged
    out = tmp_path / "w"
    convert_checkpoint(tiny_archive, str(out), heads=HEADS)
    state = torch.load(tiny_archive, map_location="cpu", weights_only=True)
    n_blocks = TINY["vision_layers"] + TINY["text_layers"]
    manifest = read_manifest(str(out))
    assert len(manifest) == len(state) + 4 * n_blocks
    source_params = sum(t.numel() for t in state.values())
    converted_params = sum(int(np.prod(m["shape"])) if m["shape"] else 1 for m in manifest.values())
    assert converted_params == source_params


def test_unknown_parameter_names_hard_error(tmp_path):
    state = _tiny_state()
    state["visual.attnpool.positional_embedding"] = torch.zeros(3, 3)
    path = tmp_path / "bad.pt"
    torch.save(state, path)
    with pytest.raises(ModelError, match="attnpool"):
        convert_checkpoint(str(path), str(tmp_path / "out"), heads=HEADS)


def test_shape_mismatch_hard_error(tmp_path):
    state = _tiny_state()
    state["visual.proj"] = torch.zeros(7, 5)  # inconsistent with width/embed dims
    path = tmp_path / "bad.pt"
    torch.save(state, path)
    with pytest.raises(ModelError, match="shape mismatch"):
        convert_checkpoint(str(path), str(tmp_path / "out"), heads=HEADS)


def test_loading_twice_identical(tiny_weight_dir):
    a = load_tensors(tiny_weight_dir)
    b = load_tensors(tiny_weight_dir)
    assert set(a) == set(b)
    for name in a:
        np.testing.assert_array_equal(a[name].numpy(), b[name].numpy())


def test_bundle_geometry(tiny_bundle):
    assert tiny_bundle.n_heads == TINY["vision_heads"]
    assert tiny_bundle.width == TINY["vision_width"]
    assert tiny_bundle.patch_size == TINY["patch"]
    assert tiny_bundle.embed_dim == TINY["embed_dim"]
    assert tiny_bundle.native_grid == TINY["grid"]
    assert tiny_bundle.n_layers == TINY["vision_layers"]


def test_logit_scale_is_exp_of_stored(tiny_weight_dir, tiny_bundle):
    stored = load_tensors(tiny_weight_dir)["logit_scale"]
    assert tiny_bundle.logit_scale == pytest.approx(float(torch.exp(stored)), rel=1e-6)


def test_missing_tensor_hard_error(tmp_path, tiny_archive):
    out = tmp_path / "w"
    convert_checkpoint(tiny_archive, str(out), heads=HEADS)
    os.remove(out / "visual.class_embedding.bin")
    with pytest.raises(ModelError, match="visual.class_embedding"):
        load_bundle(str(out))


def test_missing_manifest_entry_hard_error(tmp_path, tiny_archive):
    out = tmp_path / "w"
    convert_checkpoint(tiny_archive, str(out), heads=HEADS)
    manifest = read_manifest(str(out))
    del manifest["visual.ln_post.weight"]
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f)
    with pytest.raises(ModelError, match="visual.ln_post.weight"):
        load_bundle(str(out))


def test_transformers_layout_converts(tmp_path):
    transformers = pytest.importorskip("transformers")
    cfg = transformers.CLIPConfig(
        text_config={
            "hidden_size": 16,
            "intermediate_size": 64,
            "num_hidden_layers": 2,
            "num_attention_heads": 2,
            "max_position_embeddings": 77,
            "vocab_size": VOCAB_SIZE,
            "hidden_act": "quick_gelu",
        },
        vision_config={
            "hidden_size": 32,
            "intermediate_size": 128,
            "num_hidden_layers": 3,
            "num_attention_heads": 2,
            "patch_size": 16,
            "image_size": 48,
            "hidden_act": "quick_gelu",
        },
        projection_dim=16,
    )
    hf_model = transformers.CLIPModel(cfg)
    path = tmp_path / "hf.pt"
    torch.save(hf_model.state_dict(), path)
    out = tmp_path / "out"
    convert_checkpoint(str(path), str(out), heads=HEADS)
    bundle = load_bundle(str(out))
    assert bundle.width == 32 and bundle.embed_dim == 16
    # transposed Linear weights land as (width, embed) matrices
    np.testing.assert_allclose(
        bundle.visual_proj.numpy(),
        hf_model.visual_projection.weight.detach().numpy().T,
        rtol=0,
        atol=0,
    )


def test_vocab_copied_next_to_weights(tiny_weight_dir):
    assert os.path.exists(os.path.join(tiny_weight_dir, "bpe_vocab.txt.gz"))


def test_vit_b16_geometry_manifest(tmp_path):
    """ViT-B/16-shaped archive: manifest carries the 768x512 projection."""
    state = make_openai_state(768, 1, 12, 16, 14, 512, 512, 1, 8, 77, 49408, seed=1)
    path = tmp_path / "b16_1layer.pt"
    torch.save(state, path)
    out = tmp_path / "out"
    manifest = convert_checkpoint(str(path), str(out))
    assert manifest["visual.proj"]["shape"] == [768, 512]
    bundle = load_bundle(str(out))
    assert bundle.n_heads == 12 and bundle.width == 768
    assert bundle.patch_size == 16 and bundle.embed_dim == 512
