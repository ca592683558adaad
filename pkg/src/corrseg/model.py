"""Frozen image/text transformer: bundle structures and forward passes.

Everything here is a pure function of (inputs, bundle). The bundle holds
read-only float32 torch tensors loaded from the neutral weight format.
The vision trunk can be stopped before any block, the final block's
per-head q/k/v are exposed, and the block can be completed with an
arbitrary substituted attention matrix (the hook the correlation module
uses).
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ModelError

LN_EPS = 1e-5
_TEXT_CHUNK = 128  # texts per batched text-tower pass


class TransformerBlock:
    """Parameter views for one pre-norm attention+MLP block."""

    def __init__(self, tensors, prefix):
        def g(name):
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise ModelError(f"missing tensor: {key}")
            return tensors[key]

        self.ln_1 = (g("ln_1.weight"), g("ln_1.bias"))
        self.q = (g("attn.q_proj.weight"), g("attn.q_proj.bias"))
        self.k = (g("attn.k_proj.weight"), g("attn.k_proj.bias"))
        self.v = (g("attn.v_proj.weight"), g("attn.v_proj.bias"))
        self.out = (g("attn.out_proj.weight"), g("attn.out_proj.bias"))
        self.ln_2 = (g("ln_2.weight"), g("ln_2.bias"))
        self.fc1 = (g("mlp.fc1.weight"), g("mlp.fc1.bias"))
        self.fc2 = (g("mlp.fc2.weight"), g("mlp.fc2.bias"))


class Tower:
    def __init__(self, tensors, prefix, n_layers, n_heads):
        self.blocks = [
            TransformerBlock(tensors, f"{prefix}.blocks.{i}") for i in range(n_layers)
        ]
        self.n_heads = n_heads


class ModelBundle:
    """Immutable container for all frozen parameters plus the tokenizer.

    `logit_scale` is already exponentiated (the weight directory stores
    the raw log-space parameter).
    """

    def __init__(self, tensors, config, tokenizer=None):
        self.config = config
        self.tokenizer = tokenizer
        vision = config["vision"]
        text = config["text"]

        def g(key):
            if key not in tensors:
                raise ModelError(f"missing tensor: {key}")
            return tensors[key]

        self.patch_embed = g("visual.patch_embed.weight")
        self.class_embedding = g("visual.class_embedding")
        self.visual_pos = g("visual.pos_embedding")
        self.ln_pre = (g("visual.ln_pre.weight"), g("visual.ln_pre.bias"))
        self.visual = Tower(tensors, "visual", vision["layers"], vision["heads"])
        self.ln_post = (g("visual.ln_post.weight"), g("visual.ln_post.bias"))
        self.visual_proj = g("visual.proj")

        self.token_embedding = g("text.token_embedding.weight")
        self.text_pos = g("text.pos_embedding")
        self.text = Tower(tensors, "text", text["layers"], text["heads"])
        self.ln_final = (g("text.ln_final.weight"), g("text.ln_final.bias"))
        self.text_proj = g("text.proj")

        self.logit_scale = float(torch.exp(g("logit_scale")))
        if not self.logit_scale > 0:
            raise ModelError(f"logit scale must be positive, got {self.logit_scale}")

        self.width = vision["width"]
        self.patch_size = vision["patch_size"]
        self.n_heads = vision["heads"]
        self.head_dim = self.width // self.n_heads
        if self.head_dim * self.n_heads != self.width:
            raise ModelError(
                f"head count {self.n_heads} does not divide width {self.width}"
            )
        self.embed_dim = self.visual_proj.shape[1]
        self.native_grid = int(round(math.sqrt(self.visual_pos.shape[0] - 1)))
        self.context_length = self.text_pos.shape[0]

    @property
    def n_layers(self):
        return len(self.visual.blocks)


@dataclass(frozen=True)
class PatchFeatureSet:
    """Token activations entering a block: row 0 is [CLS], rest the patch grid."""

    tokens: torch.Tensor  # (HW+1, D)
    grid: tuple  # (H_p, W_p)
    image_size: tuple  # original (height, width)

    def __post_init__(self):
        hw = self.grid[0] * self.grid[1]
        if self.tokens.shape[0] != hw + 1:
            raise ModelError(
                f"token count {self.tokens.shape[0]} does not match grid {self.grid}"
            )
        if not torch.isfinite(self.tokens).all():
            raise ModelError("non-finite values in patch features")


def _layer_norm(x, params):
    w, b = params
    return F.layer_norm(x, (x.shape[-1],), w, b, LN_EPS)


def _quick_gelu(x):
    return x * torch.sigmoid(1.702 * x)


def _linear(x, params):
    w, b = params
    return x @ w.t() + b


def _split_heads(x, n_heads):
    *lead, t, d = x.shape
    return x.reshape(*lead, t, n_heads, d // n_heads).transpose(-3, -2)


def _merge_heads(x):
    x = x.transpose(-3, -2)
    *lead, t, h, dk = x.shape
    return x.reshape(*lead, t, h * dk)


def project_heads(x, block, n_heads):
    """Per-head q/k/v of already-normalized tokens: three (..., H, T, d_k) tensors."""
    q = _split_heads(_linear(x, block.q), n_heads)
    k = _split_heads(_linear(x, block.k), n_heads)
    v = _split_heads(_linear(x, block.v), n_heads)
    return q, k, v


def standard_attention(q, k, causal=False):
    """Per-head softmax attention weights, (..., H, T, T)."""
    d_k = q.shape[-1]
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    if causal:
        t = scores.shape[-1]
        mask = torch.full((t, t), float("-inf"), dtype=scores.dtype)
        mask.triu_(1)
        scores = scores + mask
    return torch.softmax(scores, dim=-1)


def apply_attention(attn, v):
    """Weighted value aggregation, heads concatenated: (..., T, H*d_k).

    `attn` is either one (T, T) matrix applied uniformly to every head
    or a per-head (..., H, T, T) stack matching v. No output projection,
    no bias - the result is exactly linear in v.
    """
    if attn.dim() == 2 and v.dim() == 3:
        attn = attn.unsqueeze(0).expand(v.shape[0], -1, -1)
    elif attn.shape[:-2] != v.shape[:-2]:
        raise ModelError(
            f"attention shape {tuple(attn.shape)} does not match values {tuple(v.shape)}"
        )
    return _merge_heads(attn @ v)


def _block_forward(x, block, n_heads, causal=False, attn_override=None):
    t = _layer_norm(x, block.ln_1)
    q, k, v = project_heads(t, block, n_heads)
    attn = attn_override if attn_override is not None else standard_attention(q, k, causal)
    x = x + _linear(apply_attention(attn, v), block.out)
    h = _layer_norm(x, block.ln_2)
    x = x + _linear(_quick_gelu(_linear(h, block.fc1)), block.fc2)
    return x


def resize_pos_embedding(pos, grid):
    """Adapt the positional table to a new grid.

    Bicubic interpolation of the native grid portion; the [CLS] slot is
    left untouched. Identity when the grid already matches.
    """
    native = int(round(math.sqrt(pos.shape[0] - 1)))
    if native * native != pos.shape[0] - 1:
        raise ModelError(f"positional table rows {pos.shape[0]} are not a square grid + 1")
    if tuple(grid) == (native, native):
        return pos
    d = pos.shape[1]
    patch_pos = pos[1:].reshape(1, native, native, d).permute(0, 3, 1, 2)
    patch_pos = F.interpolate(
        patch_pos, size=tuple(grid), mode="bicubic", align_corners=False
    )
    patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(grid[0] * grid[1], d)
    return torch.cat([pos[:1], patch_pos], dim=0)


@torch.no_grad()
def forward_trunk(image, bundle, upto_block=None, interpolate_pos=True):
    """Run patch embedding and all blocks before `upto_block`.

    Returns the tokens entering block `upto_block` (default: the final
    block), i.e. before that block's pre-norm.
    """
    if upto_block is None:
        upto_block = bundle.n_layers - 1
    if not 0 <= upto_block < bundle.n_layers:
        raise ModelError(f"block index {upto_block} out of range")
    x = F.conv2d(image.pixels.unsqueeze(0), bundle.patch_embed, stride=bundle.patch_size)
    gh, gw = x.shape[2], x.shape[3]
    x = x.reshape(1, bundle.width, gh * gw).permute(0, 2, 1)[0]
    x = torch.cat([bundle.class_embedding.reshape(1, -1), x], dim=0)
    if (gh, gw) != (bundle.native_grid, bundle.native_grid):
        if not interpolate_pos:
            raise ModelError(
                f"grid {(gh, gw)} does not match the positional table "
                f"({bundle.native_grid}x{bundle.native_grid}) and interpolation is disabled"
            )
        pos = resize_pos_embedding(bundle.visual_pos, (gh, gw))
    else:
        pos = bundle.visual_pos
    x = x + pos
    x = _layer_norm(x, bundle.ln_pre)
    for block in bundle.visual.blocks[:upto_block]:
        x = _block_forward(x, block, bundle.n_heads)
    return PatchFeatureSet(tokens=x, grid=(gh, gw), image_size=image.original_size)


@torch.no_grad()
def project_qkv(feats, bundle, block_index=None):
    """Per-head q/k/v of the given block (default final), pre-norm applied first."""
    if block_index is None:
        block_index = bundle.n_layers - 1
    block = bundle.visual.blocks[block_index]
    t = _layer_norm(feats.tokens, block.ln_1)
    return project_heads(t, block, bundle.n_heads)


@torch.no_grad()
def complete_block(feats, attn, bundle, block_index=None):
    """Finish the vision tower from `feats` with a substituted attention.

    Runs the indexed block (default final) using `attn` in place of the
    softmax weights, then the post layer-norm and the visual projection.
    Returns raw projected tokens, (HW+1, E), [CLS] row included.
    """
    if block_index is None:
        block_index = bundle.n_layers - 1
    block = bundle.visual.blocks[block_index]
    if not isinstance(attn, torch.Tensor):
        attn = torch.as_tensor(attn, dtype=torch.float32)
    x = _block_forward(feats.tokens, block, bundle.n_heads, attn_override=attn)
    x = _layer_norm(x, bundle.ln_post)
    return x @ bundle.visual_proj


@torch.no_grad()
def encode_texts(token_ids, bundle):
    """Token id rows -> raw projected text embeddings, (n, E).

    Features are read at each row's end-of-text position (argmax of the
    ids, the highest-valued token in the vocabulary).
    """
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    if ids.dim() == 1:
        ids = ids.unsqueeze(0)
    if ids.shape[1] != bundle.context_length:
        raise ModelError(
            f"token rows have length {ids.shape[1]}, expected {bundle.context_length}"
        )
    heads = bundle.text.n_heads
    out = []
    for start in range(0, ids.shape[0], _TEXT_CHUNK):
        chunk = ids[start : start + _TEXT_CHUNK]
        x = bundle.token_embedding[chunk] + bundle.text_pos
        for block in bundle.text.blocks:
            x = _block_forward(x, block, heads, causal=True)
        x = _layer_norm(x, bundle.ln_final)
        eot = chunk.argmax(dim=-1)
        out.append(x[torch.arange(x.shape[0]), eot] @ bundle.text_proj)
    return torch.cat(out, dim=0)
