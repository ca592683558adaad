"""Prompt-ensembled class embeddings.

Each class name is run through every template, each embedding is
L2-normalized, the normalized embeddings are averaged and the mean is
re-normalized. The default template file is the published 80-prompt
ensemble list shipped as package data.
"""

from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch

from . import model
from .errors import DataError, ModelError

DEFAULT_TEMPLATE_RESOURCE = "openai_80_templates.txt"


@dataclass(frozen=True)
class TextBank:
    class_names: tuple
    embeddings: np.ndarray  # (C, E) float32, unit rows
    template_count: int

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.class_names):
            raise DataError("one embedding row per class name required")


def load_templates(path=None):
    """Templates, one per line, each containing a `{}` placeholder."""
    if path is None:
        text = (
            resources.files("corrseg")
            .joinpath("data", DEFAULT_TEMPLATE_RESOURCE)
            .read_text(encoding="utf-8")
        )
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    templates = [line.strip() for line in text.splitlines() if line.strip()]
    bad = [t for t in templates if "{}" not in t]
    if bad:
        raise DataError(f"templates without a {{}} placeholder: {bad[:3]}")
    if not templates:
        raise DataError("template file is empty")
    return templates


def encode_text_bank(class_names, templates, bundle):
    """Class names -> TextBank of unit-norm prompt-ensembled embeddings."""
    if not class_names:
        raise DataError("class list is empty")
    if bundle.tokenizer is None:
        raise ModelError("bundle has no tokenizer vocabulary; cannot encode text")
    rows = []
    for name in class_names:
        if not str(name).strip():
            raise DataError(f"empty class name at index {len(rows)}")
        texts = [t.format(name) for t in templates]
        try:
            ids = bundle.tokenizer.tokenize(texts, bundle.context_length)
        except DataError as e:
            raise DataError(f"class {name!r}: {e}") from e
        emb = model.encode_texts(ids, bundle)
        emb = emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        mean = emb.mean(dim=0)
        mean = mean / mean.norm().clamp_min(1e-12)
        rows.append(mean)
    embeddings = torch.stack(rows).to(torch.float32).numpy()
    return TextBank(
        class_names=tuple(class_names),
        embeddings=embeddings,
        template_count=len(templates),
    )
