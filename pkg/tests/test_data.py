import numpy as np

from doubledec.data import (BOS_ID, EOS_ID, VOCAB_SIZE, decode_ids, encode_text,
                            is_holdout, load_corpus, pack_documents, split_documents)


def test_byte_round_trip():
    text = "hello, weird bytes: é中"
    ids = encode_text(text)
    assert all(0 <= i < 256 for i in ids)
    assert decode_ids(ids) == text


def test_decode_skips_special_ids():
    ids = [BOS_ID] + encode_text("ab") + [EOS_ID]
    assert decode_ids(ids) == "ab"


def test_vocab_size_covers_bytes_and_specials():
    assert VOCAB_SIZE == 259
    assert BOS_ID == 256 and EOS_ID == 257


def test_split_documents_on_blank_lines():
    text = "doc one\nstill doc one\n\ndoc two\n\n\n\ndoc three\n"
    docs = split_documents(text)
    assert docs == ["doc one\nstill doc one", "doc two", "doc three"]


def test_packing_shape_and_markers():
    docs = ["abc", "de"]
    packed = pack_documents(docs, seq_len=5)
    # stream: BOS a b c EOS BOS d e EOS -> 9 tokens -> one full sequence
    assert packed.shape == (1, 5)
    assert packed[0, 0] == BOS_ID
    assert packed[0, 4] == EOS_ID
    assert decode_ids(packed[0]) == "abc"


def test_packing_drops_partial_tail():
    packed = pack_documents(["abcdefgh"], seq_len=4)
    # 10 tokens -> 2 sequences, 2 dropped
    assert packed.shape == (2, 4)


def test_holdout_split_is_deterministic_and_partitions(tmp_path):
    docs = [f"document number {i} with some text" for i in range(400)]
    text = "\n\n".join(docs)
    path = tmp_path / "corpus.txt"
    path.write_text(text, encoding="utf-8")
    a = load_corpus(path, seq_len=16)
    b = load_corpus(path, seq_len=16)
    assert np.array_equal(a.train, b.train)
    assert np.array_equal(a.holdout, b.holdout)
    assert a.n_train_docs + a.n_holdout_docs == 400
    assert 0 < a.n_holdout_docs < 60  # ~1/32 of documents
    flags = [is_holdout(d) for d in docs]
    assert sum(flags) == a.n_holdout_docs
