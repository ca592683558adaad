"""Byte-pair-encoding tokenizer for the frozen text encoder.

Implements the byte-level BPE scheme used by the image-text model
family: a reversible byte->unicode map, lowercased whitespace-normalized
input, a merges vocabulary read from the file distributed with the model
(gzip or plain text; first line is a version header), word tokens
terminated by ``</w>``, and ``<|startoftext|>`` / ``<|endoftext|>``
specials. Context length is 77.

Input text is assumed to be well-formed unicode; mojibake repair is out
of scope (dataset class names and prompt templates are plain ASCII).
"""

import gzip
import html

import regex as re

from .errors import DataError

CONTEXT_LENGTH = 77

_WORD_PATTERN = re.compile(
    r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
    re.IGNORECASE,
)


def bytes_to_unicode():
    """Reversible mapping from byte values to printable unicode chars."""
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


def _clean(text):
    text = html.unescape(html.unescape(text))
    text = re.sub(r"\s+", " ", text)
    return text.strip().lower()


def _get_pairs(word):
    pairs = set()
    prev = word[0]
    for ch in word[1:]:
        pairs.add((prev, ch))
        prev = ch
    return pairs


class Tokenizer:
    """BPE tokenizer built from a merges vocabulary file.

    The vocabulary is: 256 byte symbols, the same 256 with ``</w>``,
    one entry per merge, then the two special tokens. The published
    ViT-B/16 file yields 49408 entries; smaller files with the same
    structure are accepted (synthetic test vocabularies).
    """

    def __init__(self, vocab_path, max_merges=48894):
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {v: k for k, v in self.byte_encoder.items()}
        merges = self._read_merges(vocab_path, max_merges)
        vocab = list(self.byte_encoder.values())
        vocab = vocab + [v + "</w>" for v in vocab]
        for merge in merges:
            vocab.append("".join(merge))
        vocab.extend(["<|startoftext|>", "<|endoftext|>"])
        self.encoder = {tok: i for i, tok in enumerate(vocab)}
        self.decoder = {i: tok for tok, i in self.encoder.items()}
        self.bpe_ranks = {merge: i for i, merge in enumerate(merges)}
        self.sot = self.encoder["<|startoftext|>"]
        self.eot = self.encoder["<|endoftext|>"]
        self._cache = {
            "<|startoftext|>": "<|startoftext|>",
            "<|endoftext|>": "<|endoftext|>",
        }

    @staticmethod
    def _read_merges(vocab_path, max_merges):
        opener = gzip.open if str(vocab_path).endswith(".gz") else open
        try:
            with opener(vocab_path, "rb") as f:
                lines = f.read().decode("utf-8").split("\n")
        except OSError as e:
            raise DataError(f"cannot read BPE vocabulary {vocab_path}: {e}") from e
        # first line is a version header; trailing blank lines ignored
        merges = []
        for line in lines[1 : max_merges + 1]:
            parts = tuple(line.split())
            if len(parts) == 2:
                merges.append(parts)
            elif parts:
                raise DataError(f"malformed merge line in {vocab_path}: {line!r}")
        if not merges:
            raise DataError(f"no merges found in {vocab_path}")
        return merges

    @property
    def vocab_size(self):
        return len(self.encoder)

    def bpe(self, token):
        if token in self._cache:
            return self._cache[token]
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _get_pairs(word)
        if not pairs:
            return token + "</w>"
        while True:
            bigram = min(pairs, key=lambda p: self.bpe_ranks.get(p, float("inf")))
            if bigram not in self.bpe_ranks:
                break
            first, second = bigram
            new_word = []
            i = 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                except ValueError:
                    new_word.extend(word[i:])
                    break
                new_word.extend(word[i:j])
                i = j
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
            if len(word) == 1:
                break
            pairs = _get_pairs(word)
        out = " ".join(word)
        self._cache[token] = out
        return out

    def encode(self, text):
        """Text -> list of BPE ids (no specials, no padding)."""
        ids = []
        for token in re.findall(_WORD_PATTERN, _clean(text)):
            token = "".join(self.byte_encoder[b] for b in token.encode("utf-8"))
            ids.extend(self.encoder[t] for t in self.bpe(token).split(" "))
        return ids

    def decode(self, ids):
        text = "".join(self.decoder[i] for i in ids)
        raw = bytearray(self.byte_decoder[c] for c in text if c in self.byte_decoder)
        return raw.decode("utf-8", errors="replace").replace("</w>", " ")

    def tokenize(self, texts, context_length=CONTEXT_LENGTH):
        """Texts -> (n, context_length) int64 array, sot/eot framed, zero padded.

        Raises DataError when a text does not fit the context window; the
        caller decides whether truncation is acceptable (it is not for
        class-name encoding, which must error naming the class).
        """
        import numpy as np

        if isinstance(texts, str):
            texts = [texts]
        result = np.zeros((len(texts), context_length), dtype=np.int64)
        for i, text in enumerate(texts):
            ids = [self.sot] + self.encode(text) + [self.eot]
            if len(ids) > context_length:
                raise DataError(
                    f"text does not fit context length {context_length}: {text!r}"
                )
            result[i, : len(ids)] = ids
        return result
