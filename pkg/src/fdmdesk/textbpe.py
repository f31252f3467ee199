"""Byte-pair text tokenizer with byte fallback.

Ids 0..255 are the raw bytes, so any byte string round-trips even when the
learned vocabulary is tiny. Merged tokens occupy 256.. up to the configured
vocabulary size; all ids stay below the 32000 text-range ceiling.
"""
import json
from collections import Counter

from .errors import ConfigError, DataError

TEXT_CEILING = 32000
ARTIFACT_FORMAT = "fdmdesk-bpe"
ARTIFACT_VERSION = 1


class TextTokenizer:
    def __init__(self, merges):
        self.merges = [tuple(m) for m in merges]
        if 256 + len(self.merges) > TEXT_CEILING:
            raise ConfigError("merge list exceeds text id range")
        self.vocab = {i: bytes([i]) for i in range(256)}
        self.rank = {}
        for k, (a, b) in enumerate(self.merges):
            new_id = 256 + k
            self.vocab[new_id] = self.vocab[a] + self.vocab[b]
            self.rank[(a, b)] = new_id
        self.vocab_size = 256 + len(self.merges)

    # -- encoding ---------------------------------------------------------

    def encode_bytes(self, data: bytes):
        ids = list(data)
        if len(ids) < 2:
            return ids
        while True:
            best = None
            best_rank = None
            for pair in zip(ids, ids[1:]):
                r = self.rank.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best = pair
                    best_rank = r
            if best is None:
                return ids
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == best:
                    out.append(best_rank)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
            if len(ids) < 2:
                return ids

    def decode_bytes(self, ids):
        return b"".join(self.vocab[i] for i in ids)

    def tokenize(self, text: str):
        return self.encode_bytes(text.encode("utf-8"))

    def detokenize(self, ids):
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    # -- persistence ------------------------------------------------------

    def save(self, path):
        doc = {
            "format": ARTIFACT_FORMAT,
            "version": ARTIFACT_VERSION,
            "vocab": {str(i): self.vocab[i].hex() for i in sorted(self.vocab)},
            "merges": [list(m) for m in self.merges],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("format") != ARTIFACT_FORMAT:
            raise DataError(f"{path}: not a tokenizer artifact")
        if doc.get("version") != ARTIFACT_VERSION:
            raise DataError(f"{path}: unsupported tokenizer version {doc.get('version')}")
        tok = cls(doc["merges"])
        for i, hx in doc["vocab"].items():
            if tok.vocab.get(int(i)) != bytes.fromhex(hx):
                raise DataError(f"{path}: vocabulary inconsistent with merge list at id {i}")
        return tok


def train_text_tokenizer(corpus, vocab_size):
    """Learn byte-pair merges from a corpus of strings or byte strings.

    Deterministic for a fixed corpus ordering: the most frequent adjacent pair
    wins each round, ties broken by the lexicographically smallest byte pair.
    """
    if not corpus:
        raise ConfigError("corpus must be non-empty")
    if vocab_size < 256:
        raise ConfigError(f"vocab_size {vocab_size} < 256 (byte fallback floor)")
    if vocab_size > TEXT_CEILING:
        raise ConfigError(f"vocab_size {vocab_size} exceeds text range {TEXT_CEILING}")
    seqs = [
        list(s if isinstance(s, (bytes, bytearray)) else s.encode("utf-8")) for s in corpus
    ]
    vocab = {i: bytes([i]) for i in range(256)}
    merges = []
    while 256 + len(merges) < vocab_size:
        counts = Counter()
        for seq in seqs:
            counts.update(zip(seq, seq[1:]))
        if not counts:
            break
        best_pair = min(
            counts, key=lambda p: (-counts[p], vocab[p[0]], vocab[p[1]])
        )
        if counts[best_pair] < 2:
            break
        new_id = 256 + len(merges)
        merges.append(best_pair)
        vocab[new_id] = vocab[best_pair[0]] + vocab[best_pair[1]]
        for si, seq in enumerate(seqs):
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best_pair:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[si] = out
    return TextTokenizer(merges)
