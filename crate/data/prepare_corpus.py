"""Builds data/sotu.txt from the @stdlib/datasets-sotu npm package (CC0).

Usage:
    npm pack @stdlib/datasets-sotu && tar xzf stdlib-datasets-sotu-*.tgz
    python3 data/prepare_corpus.py package/data data/sotu.txt

Addresses are taken newest first until the output reaches ~1 MB. Text is
lowercased, punctuation is split into separate tokens, and one sentence is
written per line. Words seen fewer than MIN_COUNT times become <unk>.
"""
import collections
import os
import re
import sys

TARGET_BYTES = 1_000_000
MIN_COUNT = 4

TOKEN = re.compile(r"[a-z0-9]+(?:['.\-][a-z0-9]+)*|[.,;:?!$%&]")
BRACKETS = re.compile(r"\[[^\]]*\]|\([^)]*\)")
END = {".", "?", "!"}


def sentences(text):
    text = BRACKETS.sub(" ", text.lower())
    text = text.replace("’", "'").replace("“", '"').replace("”", '"')
    text = re.sub(r"--+|—|–", " , ", text)
    current = []
    for tok in TOKEN.findall(text):
        current.append(tok)
        if tok in END:
            if len(current) > 1:
                yield current
            current = []
    if len(current) > 1:
        yield current


def main(src, dst):
    files = sorted((f for f in os.listdir(src) if f.endswith(".txt")), reverse=True)
    picked, size = [], 0
    for name in files:
        with open(os.path.join(src, name), encoding="utf-8") as fh:
            sents = list(sentences(fh.read()))
        picked.extend(sents)
        size += sum(len(" ".join(s)) + 1 for s in sents)
        if size >= TARGET_BYTES:
            break
    counts = collections.Counter(t for s in picked for t in s)
    with open(dst, "w", encoding="utf-8") as out:
        for s in picked:
            out.write(" ".join(t if counts[t] >= MIN_COUNT else "<unk>" for t in s))
            out.write("\n")
    vocab = {t if counts[t] >= MIN_COUNT else "<unk>" for s in picked for t in s}
    print(f"{len(picked)} sentences, vocab {len(vocab)}", file=sys.stderr)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
