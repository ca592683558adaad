"""Numerical parity against the public reference implementation.

A randomly initialized transformers CLIPModel is converted through the
neutral weight format; our forward passes must agree with the reference
at every exposed boundary: trunk activations entering the final block,
per-head q/k/v, the completed block with standard softmax attention
(projected patch tokens), and text embeddings.
"""

import numpy as np
import pytest
import torch

transformers = pytest.importorskip("transformers")

from corrseg import correlation, model
from corrseg.preprocess import ImageTensor
from corrseg.weights import convert_checkpoint, load_bundle

VISION_LAYERS = 3
TEXT_LAYERS = 2
VOCAB = 1000


def build_reference(tmp_path, seed=0):
    cfg = transformers.CLIPConfig(
        text_config={
            "hidden_size": 32,
            "intermediate_size": 128,
            "num_hidden_layers": TEXT_LAYERS,
            "num_attention_heads": 2,
            "max_position_embeddings": 77,
            "vocab_size": VOCAB,
            "hidden_act": "quick_gelu",
            "eos_token_id": VOCAB - 1,
            "bos_token_id": VOCAB - 2,
        },
        vision_config={
            "hidden_size": 64,
            "intermediate_size": 256,
            "num_hidden_layers": VISION_LAYERS,
            "num_attention_heads": 2,
            "patch_size": 16,
            "image_size": 64,
            "hidden_act": "quick_gelu",
        },
        projection_dim=32,
    )
    torch.manual_seed(seed)
    ref = transformers.CLIPModel(cfg).eval()
    path = tmp_path / "ref.pt"
    torch.save(ref.state_dict(), path)
    out = tmp_path / "weights"
    convert_checkpoint(str(path), str(out), heads={"vision": 2, "text": 2})
    return ref, load_bundle(str(out))


@pytest.fixture(scope="module")
def ref_and_bundle(tmp_path_factory):
    return build_reference(tmp_path_factory.mktemp("parity"))


def _image(seed, side=64):
    rng = np.random.default_rng(seed)
    pixels = torch.from_numpy(rng.standard_normal((3, side, side)).astype(np.float32))
    return ImageTensor(pixels=pixels, original_size=(side, side), side=side)


def test_trunk_matches_reference_hidden_state(ref_and_bundle):
    ref, bundle = ref_and_bundle
    image = _image(0)
    with torch.no_grad():
        out = ref.vision_model(
            image.pixels.unsqueeze(0), output_hidden_states=True
        )
    feats = model.forward_trunk(image, bundle)
    # hidden_states[i] is the input to layer i; the trunk stops before the
    # final block
    want = out.hidden_states[VISION_LAYERS - 1][0]
    got = feats.tokens
    assert float((got - want).abs().max()) < 1e-4


def test_qkv_match_reference_projections(ref_and_bundle):
    ref, bundle = ref_and_bundle
    image = _image(1)
    feats = model.forward_trunk(image, bundle)
    q, k, v = model.project_qkv(feats, bundle)
    layer = ref.vision_model.encoder.layers[VISION_LAYERS - 1]
    with torch.no_grad():
        normed = layer.layer_norm1(feats.tokens)
        for mine, proj in ((q, layer.self_attn.q_proj), (k, layer.self_attn.k_proj), (v, layer.self_attn.v_proj)):
            want = proj(normed).reshape(-1, 2, 32).permute(1, 0, 2)
            assert float((mine - want).abs().max()) < 1e-5


def test_forward_parity_with_softmax_attention(ref_and_bundle):
    """forward_with_w plumbing with w := per-head softmax(qk^T/sqrt(d))
    reproduces the reference projected patch tokens."""
    ref, bundle = ref_and_bundle
    worst = 0.0
    for seed in range(3):
        image = _image(10 + seed)
        feats = model.forward_trunk(image, bundle)
        q, k, _ = model.project_qkv(feats, bundle)
        attn = model.standard_attention(q, k)
        got = model.complete_block(feats, attn, bundle)
        with torch.no_grad():
            out = ref.vision_model(image.pixels.unsqueeze(0))
            hidden = ref.vision_model.post_layernorm(out.last_hidden_state)
            want = ref.visual_projection(hidden)[0]
        worst = max(worst, float((got - want).abs().max()))
    assert worst < 1e-4, f"max abs deviation {worst}"


def test_text_encoder_parity(ref_and_bundle):
    ref, bundle = ref_and_bundle
    rng = np.random.default_rng(3)
    ids = np.zeros((4, 77), dtype=np.int64)
    for i in range(4):
        length = int(rng.integers(3, 20))
        ids[i, 0] = VOCAB - 2  # start token
        ids[i, 1 : 1 + length] = rng.integers(1, VOCAB - 2, size=length)
        ids[i, 1 + length] = VOCAB - 1  # end token, the highest id present
    got = model.encode_texts(ids, bundle)
    with torch.no_grad():
        want = ref.get_text_features(input_ids=torch.from_numpy(ids)).pooler_output
    assert float((got - want).abs().max()) < 1e-4


def test_text_cosine_similarity_parity(ref_and_bundle):
    """Row-wise cosine similarity structure matches the reference."""
    ref, bundle = ref_and_bundle
    rng = np.random.default_rng(4)
    ids = np.zeros((5, 77), dtype=np.int64)
    for i in range(5):
        ids[i, 0] = VOCAB - 2
        ids[i, 1:6] = rng.integers(1, VOCAB - 2, size=5)
        ids[i, 6] = VOCAB - 1
    mine = model.encode_texts(ids, bundle).numpy()
    with torch.no_grad():
        theirs = (
            ref.get_text_features(input_ids=torch.from_numpy(ids)).pooler_output.numpy()
        )

    def cos_matrix(x):
        n = x / np.linalg.norm(x, axis=1, keepdims=True)
        return n @ n.T

    np.testing.assert_allclose(cos_matrix(mine), cos_matrix(theirs), atol=1e-4)


def test_scr_embeddings_are_finite_and_unit(ref_and_bundle):
    _, bundle = ref_and_bundle
    image = _image(5)
    feats = model.forward_trunk(image, bundle)
    q, k, v = model.project_qkv(feats, bundle)
    w = correlation.self_correlation(q, k, v, feats.grid)
    emb = correlation.forward_with_w(feats, w, bundle)
    assert np.isfinite(emb.vectors).all()
    np.testing.assert_allclose(np.linalg.norm(emb.vectors, axis=1), 1.0, atol=1e-5)
