"""Corpus ingestion (plain text, JSON lines, CoNLL-style columns) and label alignment.

Labels attach to surface tokens (words) in the source files and are spread
onto bytes: every byte of a labelled token carries its label, separator bytes
carry ``None``.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .tokenizer import tokenize

FORMATS = ("text", "jsonl", "conll")


class CorpusFormatError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class CorpusRecord:
    text: str
    labels: list[str | None] | None = None  # one per byte of ``text``
    source: str | None = None
    pair_id: str | None = None
    variant: str | None = None

    def tokens(self) -> list[int]:
        return tokenize(self.text)


def spread_labels(words: list[str], tags: list[str], sep: str = " ") -> tuple[str, list[str | None]]:
    """Join ``words`` with ``sep`` and give every byte of word ``i`` the tag ``tags[i]``."""
    if len(words) != len(tags):
        raise AlignmentError(f"{len(words)} tokens but {len(tags)} labels")
    text_parts, labels = [], []
    sep_len = len(tokenize(sep))
    for k, (w, t) in enumerate(zip(words, tags)):
        if k:
            text_parts.append(sep)
            labels.extend([None] * sep_len)
        text_parts.append(w)
        labels.extend([t] * len(tokenize(w)))
    return "".join(text_parts), labels


def token_majority(text: str, labels: list[str | None], sep: str = " ") -> list[str]:
    """Recover per-word tags from byte labels by majority vote (inverse of :func:`spread_labels`)."""
    out, pos = [], 0
    sep_len = len(tokenize(sep))
    for k, w in enumerate(text.split(sep)):
        if k:
            pos += sep_len
        n = len(tokenize(w))
        votes = Counter(l for l in labels[pos:pos + n] if l is not None)
        out.append(votes.most_common(1)[0][0] if votes else None)
        pos += n
    return out


def _read_text(path: Path, source: str | None) -> list[CorpusRecord]:
    text = path.read_bytes().decode("utf-8", errors="surrogateescape")
    return [CorpusRecord(text, source=source)] if text else []


def _read_jsonl(path: Path, source: str | None) -> list[CorpusRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc.msg}") from exc
            if not isinstance(obj, dict) or ("text" not in obj and "tokens" not in obj):
                raise CorpusFormatError(f"{path}:{lineno}: record needs 'text' or 'tokens'")
            labels = None
            if "tokens" in obj:
                tags = obj.get("labels")
                if tags is None:
                    text = " ".join(obj["tokens"])
                else:
                    try:
                        text, labels = spread_labels(obj["tokens"], tags)
                    except AlignmentError as exc:
                        raise AlignmentError(f"{path}:{lineno}: {exc}") from exc
                if "text" in obj and obj["text"] != text:
                    raise AlignmentError(f"{path}:{lineno}: 'text' disagrees with joined 'tokens'")
            else:
                text = obj["text"]
                if obj.get("labels") is not None:
                    raise AlignmentError(f"{path}:{lineno}: labels need a 'tokens' list to align to")
            pair = obj.get("pair_id")
            out.append(CorpusRecord(
                text, labels, obj.get("source", source),
                None if pair is None else str(pair), obj.get("variant"),
            ))
    return out


def _read_conll(path: Path, source: str | None, label_column: int) -> list[CorpusRecord]:
    out, words, tags = [], [], []

    def flush():
        if words:
            text, labels = spread_labels(words, tags)
            out.append(CorpusRecord(text, labels, source))
            words.clear()
            tags.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            cols = line.split()
            if not cols:
                flush()
                continue
            if cols[0] == "-DOCSTART-":
                continue
            if len(cols) <= label_column:
                raise CorpusFormatError(f"{path}:{lineno}: expected a label in column {label_column}")
            words.append(cols[0])
            tags.append(cols[label_column])
    flush()
    return out


def ingest(path, format: str = "text", source: str | None = None, label_column: int = -1) -> list[CorpusRecord]:
    """Parse a corpus file.  ``label_column`` selects the CoNLL tag column."""
    path = Path(path)
    if format == "text":
        return _read_text(path, source)
    if format == "jsonl":
        return _read_jsonl(path, source)
    if format == "conll":
        return _read_conll(path, source, label_column)
    raise CorpusFormatError(f"unknown corpus format {format!r}; expected one of {FORMATS}")


def stream(records: list[CorpusRecord], sep: str = "\n") -> tuple[list[int], list[str | None] | None]:
    """Concatenate records into one token stream, carrying labels if every record has them."""
    toks: list[int] = []
    labels: list[str | None] | None = [] if records and all(r.labels is not None for r in records) else None
    sep_toks = tokenize(sep)
    for k, r in enumerate(records):
        if k:
            toks.extend(sep_toks)
            if labels is not None:
                labels.extend([None] * len(sep_toks))
        t = r.tokens()
        toks.extend(t)
        if labels is not None:
            if len(r.labels) != len(t):
                raise AlignmentError("record labels do not cover every byte")
            labels.extend(r.labels)
    return toks, labels


# --- character-class labels ---------------------------------------------------

CHARCLASS = "charclass"


def charclass(byte: int) -> str:
    """Coarse byte category usable without an external tagger."""
    if byte >= 128:
        return "NONASCII"
    c = chr(byte)
    if c.isdigit():
        return "DIGIT"
    if c.isupper():
        return "UPPER"
    if c.islower():
        return "LOWER"
    if c.isspace():
        return "SPACE"
    return "PUNCT"


def charclass_labels(tokens: list[int]) -> list[str]:
    return [charclass(t) for t in tokens]
