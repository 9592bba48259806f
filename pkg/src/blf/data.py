"""Corpus pipeline: JSONL ingest, subset capping, fixed-length chunking, splits.

Documents are tokenized per batch, joined with one end-of-document id after
each document, and the joined stream is sliced into exact length-L chunks.
The final partial slice of each batch is dropped; per-batch accounting keeps
emitted + dropped == stream length as a checked invariant.
"""

from __future__ import annotations

import json
import multiprocessing
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import FormatError, UsageError
from .rng import substream

CHUNK_MAGIC = b"BLFC"
CHUNK_VERSION = 1


@dataclass
class DocumentRecord:
    id: str
    subset: str
    text: str


@dataclass
class SplitSpec:
    validation_size: int = 1000
    seed: int = 0
    per_subset_cap: int = 500000


@dataclass
class ChunkedDataset:
    sequence_length: int
    chunks: np.ndarray  # [num_chunks, L] int32
    batch_records: list[dict] = field(default_factory=list)

    @property
    def total_dropped(self) -> int:
        return sum(b["dropped"] for b in self.batch_records)

    @property
    def total_stream_tokens(self) -> int:
        return sum(b["stream_tokens"] for b in self.batch_records)


def ingest(path) -> Iterator[DocumentRecord]:
    """Stream records from a JSONL file, one dict per line with a `text` field.

    Constant memory per record. Malformed lines fail with line number and
    byte offset.
    """
    offset = 0
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, start=1):
            line_start = offset
            offset += len(raw)
            stripped = raw.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise FormatError(f"{path}:{lineno} (byte {line_start}): invalid JSON: {e}") from e
            if not isinstance(obj, dict) or "text" not in obj:
                raise FormatError(f"{path}:{lineno} (byte {line_start}): expected an object with a 'text' field")
            text = obj["text"]
            if not isinstance(text, str):
                raise FormatError(f"{path}:{lineno} (byte {line_start}): 'text' must be a string")
            yield DocumentRecord(
                id=str(obj.get("id", f"line-{lineno}")),
                subset=str(obj.get("subset", "default")),
                text=text,
            )


def cap_subsets(records: Iterable[DocumentRecord], spec: SplitSpec) -> Iterator[DocumentRecord]:
    """Pass at most `per_subset_cap` records per subset, first-come order."""
    counts: dict[str, int] = {}
    for rec in records:
        n = counts.get(rec.subset, 0)
        if n < spec.per_subset_cap:
            counts[rec.subset] = n + 1
            yield rec


def _chunk_token_stream(stream: list[int], L: int) -> tuple[np.ndarray, int]:
    n_chunks = len(stream) // L
    arr = np.asarray(stream[: n_chunks * L], dtype=np.int32).reshape(n_chunks, L)
    dropped = len(stream) - n_chunks * L
    return arr, dropped


_worker_tokenizer = None


def _init_worker(tokenizer):
    global _worker_tokenizer
    _worker_tokenizer = tokenizer


def _encode_batch(args):
    texts, L = args
    stream: list[int] = []
    for t in texts:
        stream.extend(_worker_tokenizer.encode(t))
        stream.append(_worker_tokenizer.end_id)
    arr, dropped = _chunk_token_stream(stream, L)
    return arr, dropped, len(stream), len(texts)


def _batched(records: Iterable[DocumentRecord], batch_size: int) -> Iterator[list[str]]:
    batch: list[str] = []
    for rec in records:
        batch.append(rec.text)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def concat_and_chunk(
    records: Iterable[DocumentRecord],
    tokenizer,
    L: int = 4096,
    batch_size: int = 1000,
    workers: int = 1,
) -> ChunkedDataset:
    """Tokenize, join with end-of-document ids, slice into exact-L chunks.

    Chunks never straddle a batch boundary; each batch drops its final partial
    slice. Output is independent of `workers`.
    """
    if L < 2:
        raise UsageError(f"sequence length must be >= 2, got {L}")
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    if workers < 1:
        raise UsageError(f"workers must be >= 1, got {workers}")

    tasks = ((texts, L) for texts in _batched(records, batch_size))
    if workers == 1:
        _init_worker(tokenizer)
        results = map(_encode_batch, tasks)
        parts = _collect(results, L)
    else:
        with multiprocessing.Pool(workers, initializer=_init_worker, initargs=(tokenizer,)) as pool:
            parts = _collect(pool.imap(_encode_batch, tasks, chunksize=1), L)
    return parts


def _collect(results, L: int) -> ChunkedDataset:
    chunk_arrays: list[np.ndarray] = []
    batch_records: list[dict] = []
    for arr, dropped, stream_tokens, n_docs in results:
        emitted = arr.shape[0] * L
        if emitted + dropped != stream_tokens:
            raise AssertionError(
                f"token conservation violated: {emitted} emitted + {dropped} dropped != {stream_tokens} stream"
            )
        chunk_arrays.append(arr)
        batch_records.append(
            {"docs": n_docs, "stream_tokens": stream_tokens, "chunks": int(arr.shape[0]), "dropped": dropped}
        )
    if chunk_arrays:
        chunks = np.concatenate(chunk_arrays, axis=0)
    else:
        chunks = np.zeros((0, L), dtype=np.int32)
    return ChunkedDataset(sequence_length=L, chunks=chunks, batch_records=batch_records)


def sample_validation(chunks: np.ndarray, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Uniform without-replacement split under spec.seed; disjoint and exhaustive."""
    n = chunks.shape[0]
    if spec.validation_size > n:
        raise UsageError(f"validation_size {spec.validation_size} exceeds corpus size {n}")
    if spec.validation_size < 0:
        raise UsageError("validation_size must be non-negative")
    rng = substream(spec.seed, "split")
    val_idx = np.sort(rng.choice(n, size=spec.validation_size, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[val_idx] = True
    return chunks[~mask], chunks[mask]


def write_chunks(path, dataset: ChunkedDataset) -> None:
    """Binary layout: magic, version, L, count (uint32 LE) then int32 LE ids."""
    chunks = np.ascontiguousarray(dataset.chunks, dtype="<i4")
    with open(path, "wb") as f:
        f.write(CHUNK_MAGIC)
        f.write(struct.pack("<III", CHUNK_VERSION, dataset.sequence_length, chunks.shape[0]))
        f.write(chunks.tobytes())


def read_chunks(path) -> ChunkedDataset:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:4] != CHUNK_MAGIC:
            raise FormatError(f"{path}: not a chunk file (bad magic)")
        version, L, count = struct.unpack("<III", head[4:16])
        if version != CHUNK_VERSION:
            raise FormatError(f"{path}: unsupported chunk file version {version}")
        body = f.read()
    expected = count * L * 4
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    chunks = np.frombuffer(body, dtype="<i4").reshape(count, L).astype(np.int32)
    return ChunkedDataset(sequence_length=L, chunks=chunks)


def chunk_manifest(dataset: ChunkedDataset, extra: dict | None = None) -> dict:
    """Accounting manifest; `extra` carries the effective run config."""
    manifest = {
        "sequence_length": dataset.sequence_length,
        "num_chunks": int(dataset.chunks.shape[0]),
        "total_stream_tokens": dataset.total_stream_tokens,
        "total_emitted_tokens": int(dataset.chunks.shape[0]) * dataset.sequence_length,
        "total_dropped_tokens": dataset.total_dropped,
        "batches": dataset.batch_records,
    }
    if extra:
        manifest.update(extra)
    return manifest
