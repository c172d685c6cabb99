"""Build a ~2 MB plain-text corpus from the standard library's help topics
and docstrings.

Files are visited in sorted order and docstrings in source order, so the
output is reproducible for a given Python installation.
"""
import ast
import pathlib
import sys
import sysconfig

LIMIT = 2_000_000
ASCII = str.maketrans({"\u2018": "'", "\u2019": "'", "\u201c": '"', "\u201d": '"', "\u2013": "-", "\u2014": "-", "\u2026": "..."})


def to_ascii(text):
    return text.translate(ASCII).encode("ascii", "ignore").decode("ascii")


def docstrings(path):
    try:
        tree = ast.parse(path.read_text(encoding="utf-8"))
    except (SyntaxError, UnicodeDecodeError, ValueError):
        return
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node)
            if doc and len(doc) > 40:
                yield to_ascii(doc.strip())


def help_topics(root):
    from ast import literal_eval

    path = root / "pydoc_data" / "topics.py"
    text = path.read_text(encoding="utf-8")
    topics = literal_eval(text[text.index("{"):])
    for key in sorted(topics):
        yield to_ascii(topics[key].strip())


def main(out):
    root = pathlib.Path(sysconfig.get_paths()["stdlib"])
    seen = set()
    parts, size = list(help_topics(root)), 0
    size = sum(len(p) + 2 for p in parts)
    for path in sorted(root.rglob("*.py")):
        if any(p in ("site-packages", "dist-packages") for p in path.parts):
            continue
        for doc in docstrings(path):
            if doc in seen:
                continue
            seen.add(doc)
            parts.append(doc)
            size += len(doc) + 2
            if size >= LIMIT:
                break
        if size >= LIMIT:
            break
    pathlib.Path(out).write_text("\n\n".join(parts)[:LIMIT] + "\n", encoding="ascii")


if __name__ == "__main__":
    main(sys.argv[1])
