"""Byte-level tokenizer: ids 0-255 are raw bytes, followed by three specials."""
from __future__ import annotations

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259

SPECIAL_NAMES = {BOS: "<bos>", EOS: "<eos>", PAD: "<pad>"}
DIGIT_IDS = tuple(range(ord("0"), ord("9") + 1))


def tokenize(text: str | bytes) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8", errors="surrogateescape")
    return list(text)


def detokenize_bytes(ids) -> bytes:
    return bytes(i for i in ids if 0 <= i < 256)


def detokenize(ids) -> str:
    """Inverse of :func:`tokenize`; specials are dropped."""
    return detokenize_bytes(ids).decode("utf-8", errors="surrogateescape")


def token_repr(tok: int) -> str:
    """Printable, CSV-safe rendering of a single token."""
    if tok in SPECIAL_NAMES:
        return SPECIAL_NAMES[tok]
    ch = chr(tok)
    if tok == 32:
        return "␣"
    if 33 <= tok < 127 and ch not in {'"', ","}:
        return ch
    return f"0x{tok:02x}"
