"""Build a mixed English corpus from text that ships with the Python install.

No download is involved: documents are docstrings of the standard library
and of numpy, the interpreter's language-reference topics, and (when
present) the system's license texts.  Each document is assigned to
train / validation / eval by a hash of its identifier, so the split is
stable and the three files are disjoint.
"""
from __future__ import annotations

import ast
import hashlib
import json
import logging
import sysconfig
from pathlib import Path

log = logging.getLogger(__name__)

MIN_DOC_CHARS = 200


def _docstrings(root: Path, skip_parts=("test", "tests", "idlelib", "site-packages")):
    for path in sorted(root.rglob("*.py")):
        rel = path.relative_to(root)
        if any(p in skip_parts for p in rel.parts):
            continue
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) >= MIN_DOC_CHARS:
                    name = getattr(node, "name", "<module>")
                    yield f"{rel}:{name}:{getattr(node, 'lineno', 0)}", doc


def iter_documents():
    """Yield ``(source, doc_id, text)`` in a fixed order."""
    stdlib = Path(sysconfig.get_paths()["stdlib"])
    for doc_id, text in _docstrings(stdlib):
        yield "stdlib_docs", doc_id, text
    try:
        from pydoc_data.topics import topics
        for key in sorted(topics):
            if len(topics[key]) >= MIN_DOC_CHARS:
                yield "language_reference", key, topics[key]
    except ImportError:
        log.warning("pydoc_data not available; skipping language reference topics")
    try:
        import numpy
        for doc_id, text in _docstrings(Path(numpy.__file__).parent):
            yield "numpy_docs", doc_id, text
    except ImportError:
        log.warning("numpy source not available")
    licenses = Path("/usr/share/common-licenses")
    if licenses.is_dir():
        for path in sorted(licenses.iterdir()):
            if path.is_file() and not path.is_symlink():
                text = path.read_text(encoding="utf-8", errors="replace")
                for k, para in enumerate(p for p in text.split("\n\n") if len(p) >= MIN_DOC_CHARS):
                    yield "licenses", f"{path.name}:{k}", para


def _bucket(doc_id: str) -> int:
    return int(hashlib.sha256(doc_id.encode()).hexdigest()[:8], 16) % 100


def build_reference_corpus(out_dir, validation_pct: int = 3, eval_pct: int = 7) -> dict:
    """Write ``train.txt``, ``validation.txt``, ``eval.jsonl`` and ``paired.jsonl``.

    ``paired.jsonl`` holds each eval document twice: as written and
    upper-cased, with a shared pair id.  Returns byte counts per file.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val, ev = [], [], []
    seen = set()
    for source, doc_id, text in iter_documents():
        text = text.strip()
        if text in seen:
            continue
        seen.add(text)
        b = _bucket(f"{source}:{doc_id}")
        if b < validation_pct:
            val.append(text)
        elif b < validation_pct + eval_pct:
            ev.append((source, doc_id, text))
        else:
            train.append(text)
    (out_dir / "train.txt").write_text("\n\n".join(train) + "\n", encoding="utf-8")
    (out_dir / "validation.txt").write_text("\n\n".join(val) + "\n", encoding="utf-8")
    with open(out_dir / "eval.jsonl", "w", encoding="utf-8") as fh:
        for source, doc_id, text in ev:
            fh.write(json.dumps({"text": text, "source": source, "id": doc_id}, sort_keys=True) + "\n")
    with open(out_dir / "paired.jsonl", "w", encoding="utf-8") as fh:
        for k, (source, doc_id, text) in enumerate(ev):
            for variant, t in (("as_written", text), ("upper_case", text.upper())):
                fh.write(json.dumps({"text": t, "pair_id": str(k), "variant": variant, "source": variant}, sort_keys=True) + "\n")
    return {p.name: p.stat().st_size for p in sorted(out_dir.iterdir())}
