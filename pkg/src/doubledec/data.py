"""Byte-level tokenizer, corpus splitting, and static sequence packing.

The vocabulary is the 256 raw byte values plus BOS/EOS/PAD. Documents are
blank-line separated UTF-8 text; each becomes BOS + bytes + EOS, the token
streams are concatenated, and the stream is sliced into fixed-length
sequences (the trailing partial sequence is dropped). A deterministic
per-document hash sends 1 in 32 documents to the held-out split.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259

HOLDOUT_MOD = 32


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_ids(ids) -> str:
    data = bytes(int(i) for i in ids if 0 <= int(i) < 256)
    return data.decode("utf-8", errors="replace")


def split_documents(text: str) -> list[str]:
    docs = re.split(r"\n\s*\n", text)
    return [d.strip() for d in docs if d.strip()]


def is_holdout(doc: str) -> bool:
    digest = hashlib.sha256(doc.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % HOLDOUT_MOD == 0


def pack_documents(docs: list[str], seq_len: int) -> np.ndarray:
    """Pack documents into (n_sequences, seq_len) token ids, dropping the tail."""
    stream: list[int] = []
    for doc in docs:
        stream.append(BOS_ID)
        stream.extend(encode_text(doc))
        stream.append(EOS_ID)
    n = len(stream) // seq_len
    if n == 0:
        return np.zeros((0, seq_len), dtype=np.int64)
    return np.asarray(stream[: n * seq_len], dtype=np.int64).reshape(n, seq_len)


@dataclass(frozen=True)
class CorpusSplits:
    train: np.ndarray
    holdout: np.ndarray
    n_train_docs: int
    n_holdout_docs: int


def load_corpus(path, seq_len: int) -> CorpusSplits:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    docs = split_documents(text)
    train_docs = [d for d in docs if not is_holdout(d)]
    holdout_docs = [d for d in docs if is_holdout(d)]
    return CorpusSplits(
        train=pack_documents(train_docs, seq_len),
        holdout=pack_documents(holdout_docs, seq_len),
        n_train_docs=len(train_docs),
        n_holdout_docs=len(holdout_docs),
    )
