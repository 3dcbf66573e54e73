"""Tokenizers feeding the text encoder.

Two front-ends share one small interface (``encode``, ``decode``, ``sos_id``,
``eos_id``, ``vocab_size``):

* :class:`WhitespaceTokenizer` maps each whitespace-separated lowercase word to
  its index in a declared vocabulary. Used with toy backbones so tests never
  need the 49K-entry BPE table.
* :class:`BPETokenizer` is the byte-level BPE used by the public CLIP
  checkpoints, loaded from the gzipped merges file shipped with them.
"""
from __future__ import annotations

import functools
import gzip
import html
import os
from dataclasses import dataclass

import regex

from .errors import OverlongPrompt, TokenizerError

CONTEXT_LENGTH = 77
SOS_TOKEN = "<|startoftext|>"
EOS_TOKEN = "<|endoftext|>"

TOY_VOCAB = (
    "<pad>",
    "a", "an", "the", "photo", "picture", "image", "of", "with", "without",
    "this", "is", "for", "and", "object", "product", "surface", "texture",
    "good", "damaged", "perfect", "flawed", "normal", "abnormal", "defective",
    "flawless", "broken", "intact", "clean", "scratched", "defect", "anomaly",
    "close-up", "cropped", "industrial", "bright", "dark", "small", "large",
    SOS_TOKEN, EOS_TOKEN,
)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids of one prompt, without the start/end markers."""

    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


def _normalize(text: str) -> str:
    return " ".join(text.strip().lower().split())


class WhitespaceTokenizer:
    def __init__(self, vocab=TOY_VOCAB):
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        if SOS_TOKEN not in self.index or EOS_TOKEN not in self.index:
            raise TokenizerError("vocabulary must contain the start and end markers")
        self.sos_id = self.index[SOS_TOKEN]
        self.eos_id = self.index[EOS_TOKEN]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in _normalize(text).split(" "):
            if word not in self.index:
                raise TokenizerError(f"word {word!r} is not in the toy vocabulary")
            ids.append(self.index[word])
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.vocab[i] for i in ids)


@functools.lru_cache()
def _bytes_to_unicode() -> dict[int, str]:
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def _pairs(word):
    return {(a, b) for a, b in zip(word, word[1:])}


def _clean(text: str) -> str:
    try:
        import ftfy

        text = ftfy.fix_text(text)
    except ImportError:
        pass
    text = html.unescape(html.unescape(text))
    return regex.sub(r"\s+", " ", text.strip())


class BPETokenizer:
    """Byte-level BPE compatible with the OpenAI CLIP vocabulary file."""

    _pattern = regex.compile(
        r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
        regex.IGNORECASE,
    )

    def __init__(self, merges_path: str | os.PathLike):
        byte_encoder = _bytes_to_unicode()
        with gzip.open(merges_path, "rt", encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        merges = [tuple(m.split()) for m in lines[1 : 49152 - 256 - 2 + 1]]
        vocab = list(byte_encoder.values())
        vocab += [v + "</w>" for v in vocab]
        vocab += ["".join(m) for m in merges]
        vocab += [SOS_TOKEN, EOS_TOKEN]
        self.encoder = {t: i for i, t in enumerate(vocab)}
        self.decoder = {i: t for t, i in self.encoder.items()}
        self.byte_encoder = byte_encoder
        self.byte_decoder = {v: k for k, v in byte_encoder.items()}
        self.ranks = {m: i for i, m in enumerate(merges)}
        self.sos_id = self.encoder[SOS_TOKEN]
        self.eos_id = self.encoder[EOS_TOKEN]
        self._cache: dict[str, str] = {SOS_TOKEN: SOS_TOKEN, EOS_TOKEN: EOS_TOKEN}

    @property
    def vocab_size(self) -> int:
        return len(self.encoder)

    def _bpe(self, token: str) -> str:
        if token in self._cache:
            return self._cache[token]
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _pairs(word)
        if not pairs:
            return token + "</w>"
        while True:
            bigram = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if bigram not in self.ranks:
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
                if word[i] == first and i < len(word) - 1 and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
            if len(word) == 1:
                break
            pairs = _pairs(word)
        out = " ".join(word)
        self._cache[token] = out
        return out

    def encode(self, text: str) -> list[int]:
        ids = []
        text = _clean(text).lower()
        for token in regex.findall(self._pattern, text):
            token = "".join(self.byte_encoder[b] for b in token.encode("utf-8"))
            ids.extend(self.encoder[t] for t in self._bpe(token).split(" "))
        return ids

    def decode(self, ids) -> str:
        text = "".join(self.decoder[i] for i in ids)
        raw = bytearray(self.byte_decoder[c] for c in text)
        return raw.decode("utf-8", errors="replace").replace("</w>", " ").strip()


def tokenize(tokenizer, text: str, context_length: int = CONTEXT_LENGTH) -> TokenSequence:
    """Encode ``text`` and check it leaves room for the start/end markers."""
    if not text or not text.strip():
        raise OverlongPrompt("empty prompt text")
    ids = tokenizer.encode(text)
    if not ids:
        raise OverlongPrompt("prompt produced no tokens")
    if len(ids) > context_length - 2:
        raise OverlongPrompt(f"{len(ids)} tokens exceed the budget of {context_length - 2}")
    return TokenSequence(tuple(ids))
