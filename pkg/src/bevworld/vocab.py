"""Closed whitespace vocabulary for the templated QA text.

The inventory is generated from the template grammar, so it is fixed and
small (well under the 512-type budget).  Vocabulary files are versioned.
"""

from __future__ import annotations

import numpy as np

from .scene import CLASS_NAMES

VOCAB_FILE_HEADER = "DWMVOCAB 1"
MAX_VOCAB = 512

PAD, ANS, EOS, UNK = "<pad>", "<ans>", "<eos>", "<unk>"


class VocabError(ValueError):
    pass


def _speed_tokens():
    return [f"{v / 2.0:.1f}" for v in range(4, 17)]  # 2.0 .. 8.0 step 0.5


def _rate_tokens():
    toks = []
    for k in range(-6, 7):
        toks.append(f"{k * 0.02:+.2f}")
    toks.append("-0.00")
    return toks


def build_vocab() -> list:
    words = [PAD, ANS, EOS, UNK]
    words += ["count", "the", "objects", "name", "nearest", "object",
              "locate", "ego", "speed", "turn", "maneuver", "nothing",
              "none", "going", "straight", "turning", "left", "right",
              "ahead", "behind"]
    words += list(CLASS_NAMES)
    words += [str(d) for d in range(10)]
    words += _speed_tokens()
    words += _rate_tokens()
    seen = set()
    out = []
    for w in words:
        if w not in seen:
            seen.add(w)
            out.append(w)
    if len(out) > MAX_VOCAB:
        raise VocabError(f"vocabulary exceeds {MAX_VOCAB} types")
    return out


class Vocab:
    def __init__(self, tokens=None):
        self.tokens = list(tokens) if tokens is not None else build_vocab()
        if len(self.tokens) > MAX_VOCAB:
            raise VocabError(f"vocabulary exceeds {MAX_VOCAB} types")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id = self.index[PAD]
        self.ans_id = self.index[ANS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> np.ndarray:
        ids = [self.index.get(w, self.unk_id) for w in text.split()]
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        skip = {self.pad_id, self.ans_id, self.eos_id}
        return " ".join(self.tokens[int(i)] for i in ids if int(i) not in skip)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(VOCAB_FILE_HEADER + "\n")
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != VOCAB_FILE_HEADER:
            raise VocabError("unrecognised vocabulary file header")
        return cls(lines[1:])
