"""Precomputed (tokens, features) dataset with a binary on-disk container.

File layout (little-endian throughout):

    [4 bytes]  uint32 header length H
    [H bytes]  UTF-8 JSON header: format tag, version, target config,
               corpus sha256, d_model, entry count, per-entry lengths
    then per entry, in order:
        int32[length]              token ids
        float32[length * d_model]  feature rows, row-major

Features are stored at 32-bit precision; `load` returns them as float64 for
compute but the stored bits round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import corpus_sha256
from .target import TargetConfig, TargetModel

FORMAT_TAG = "specalign-dataset"
FORMAT_VERSION = 1


@dataclass
class FeatureDataset:
    config: TargetConfig
    corpus_hash: str
    entries: list[tuple[np.ndarray, np.ndarray]]  # (int32 tokens [l], float32 features [l,d])

    def __len__(self) -> int:
        return len(self.entries)

    def tokens(self, i: int) -> np.ndarray:
        return self.entries[i][0].astype(np.int64)

    def features(self, i: int) -> np.ndarray:
        return self.entries[i][1].astype(np.float64)

    def save(self, path) -> None:
        path = Path(path)
        header = {
            "format": FORMAT_TAG,
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "corpus_sha256": self.corpus_hash,
            "d_model": self.config.d_model,
            "count": len(self.entries),
            "lengths": [int(t.size) for t, _ in self.entries],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        try:
            with open(path, "wb") as fh:
                fh.write(np.array(len(blob), dtype="<u4").tobytes())
                fh.write(blob)
                for tokens, feats in self.entries:
                    fh.write(tokens.astype("<i4").tobytes())
                    fh.write(feats.astype("<f4").tobytes())
        except OSError as exc:
            raise OSError(f"failed to write dataset {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "FeatureDataset":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise OSError(f"failed to read dataset {path}: {exc}") from exc
        hlen = int(np.frombuffer(raw[:4], dtype="<u4")[0])
        header = json.loads(raw[4:4 + hlen].decode())
        if header.get("format") != FORMAT_TAG:
            raise ValueError(f"{path} is not a {FORMAT_TAG} file")
        config = TargetConfig(**header["config"])
        d = header["d_model"]
        offset = 4 + hlen
        entries = []
        for length in header["lengths"]:
            tokens = np.frombuffer(raw, dtype="<i4", count=length, offset=offset).copy()
            offset += 4 * length
            feats = np.frombuffer(raw, dtype="<f4", count=length * d, offset=offset)
            feats = feats.reshape(length, d).copy()
            offset += 4 * length * d
            entries.append((tokens, feats))
        return cls(config=config, corpus_hash=header["corpus_sha256"], entries=entries)


def precompute_features(target: TargetModel, corpus: list[list[int]],
                        path=None) -> FeatureDataset:
    """Run the frozen target over the corpus and store (tokens, features).

    Stored rows are the forward() features cast to float32 (the container's
    precision); writing is optional via `path`.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    entries = []
    for seq in corpus:
        out = target.forward(seq)
        entries.append((
            np.asarray(seq, dtype="<i4"),
            out.features.astype("<f4"),
        ))
    dataset = FeatureDataset(config=target.config, corpus_hash=corpus_sha256(corpus),
                             entries=entries)
    if path is not None:
        dataset.save(path)
    return dataset
