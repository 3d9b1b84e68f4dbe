"""
Binary checkpoint format `RFD1` (little-endian):

    magic   b"RFD1"
    u32     format version
    u64     header length, then the header as UTF-8 JSON
            {config, config_hash, vocab, step, trained, era_trained, n_records}
    records n_records × (u32 name length, name, u32 dtype length, dtype,
                         u32 ndim, u64 × ndim shape, u64 byte length, raw bytes)

Record names are `param.<name>`, `adam.m.<name>`, `adam.v.<name>` and `behavior.<name>`,
written in sorted order so that save→load→save is byte-identical.
"""
import json
import logging
import os
import struct
from typing import BinaryIO, Dict, Optional

import numpy as np

from model.reflect import build_model_state
from utils.config import RunConfig, parse_run_config
from utils.corpus import Vocab
from utils.errors import (
    CheckpointFormatError,
    CheckpointHashError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    VocabMismatchError,
)

logger = logging.getLogger(__name__)

MAGIC = b"RFD1"
FORMAT_VERSION = 1

# parameters with one row (or column) per vocabulary entry, and the axis it sits on
VOCAB_AXES = {
    "era.token_emb.weight": 0,
    "encoder.E_W.weight": 0,
    "decoder.token_emb.weight": 0,
    "decoder.out.weight": 1,
    "decoder.out.bias": 0,
}


def _collect(state) -> Dict[str, np.ndarray]:
    records = {f"param.{k}": v for k, v in state.model.state_dict().items()}
    records.update({f"adam.{k}": v for k, v in state.optimizer.state_dict().items()})
    records.update({f"behavior.{k}": v.copy() for k, v in state.model.twice.policy.behavior.items()})
    return records


def _write_record(f: BinaryIO, name: str, value: np.ndarray) -> None:
    value = np.ascontiguousarray(value)
    dtype = value.dtype.str.encode("ascii")
    raw_name = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw_name)) + raw_name)
    f.write(struct.pack("<I", len(dtype)) + dtype)
    f.write(struct.pack("<I", value.ndim))
    f.write(struct.pack(f"<{value.ndim}Q", *value.shape))
    payload = value.astype(value.dtype.newbyteorder("<"), copy=False).tobytes()
    f.write(struct.pack("<Q", len(payload)) + payload)


def save_checkpoint(state, path: str) -> None:
    records = _collect(state)
    header = {
        "config": json.loads(state.config.canonical_json()),
        "config_hash": state.config.config_hash(),
        "vocab": json.loads(state.vocab.to_json()),
        "step": state.step,
        "adam_step": state.optimizer.step_count,
        "trained": state.trained,
        "era_trained": state.model.era.trained,
        "n_records": len(records),
    }
    raw_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(raw_header)) + raw_header)
        for name in sorted(records):
            _write_record(f, name, records[name])
    logger.info(f"Saved checkpoint with {len(records)} tensors to {path}")


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"{self.path}: file ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str):
    """(header dict, {record name: array}) after structural validation."""
    with open(path, "rb") as f:
        data = f.read()
    reader = _Reader(data, path)
    if len(data) < len(MAGIC) or reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: not an RFD1 checkpoint (bad magic bytes)")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = reader.unpack("<Q")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header: {e}") from e

    records = {}
    for _ in range(header["n_records"]):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (dtype_len,) = reader.unpack("<I")
        dtype = np.dtype(reader.take(dtype_len).decode("ascii"))
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = reader.unpack("<Q")
        records[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).copy()
    if reader.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - reader.pos} trailing bytes after the last record")
    return header, records


def _check_vocab_shapes(path: str, vocab: Vocab, params: Dict[str, np.ndarray]) -> None:
    for name, axis in VOCAB_AXES.items():
        value = params.get(name)
        if value is not None and value.ndim > axis and value.shape[axis] != len(vocab):
            raise VocabMismatchError(
                f"{path}: {name} covers {value.shape[axis]} tokens but the stored vocabulary has {len(vocab)}"
            )


def load_checkpoint(path: str, expected: Optional[RunConfig] = None, strict: bool = True):
    """
    Rebuild a ModelState. With `expected` given, a differing config hash is an error
    in strict mode and a warning otherwise.
    """
    if not os.path.exists(path):
        raise CheckpointFormatError(f"checkpoint not found: {path}")
    header, records = read_checkpoint(path)
    try:
        config = parse_run_config(header["config"])
    except ConfigError as e:
        raise CheckpointFormatError(f"{path}: stored config is invalid: {e}") from e
    if config.config_hash() != header["config_hash"]:
        raise CheckpointHashError(f"{path}: stored config does not match its recorded hash")
    if expected is not None and expected.config_hash() != header["config_hash"]:
        message = f"{path}: config hash {header['config_hash'][:12]} differs from the requested config {expected.config_hash()[:12]}"
        if strict:
            raise CheckpointHashError(message)
        logger.warning(message)

    vocab = Vocab.from_json(json.dumps(header["vocab"]))
    state = build_model_state(config, vocab)
    params = {k[len("param."):]: v for k, v in records.items() if k.startswith("param.")}
    adam = {k[len("adam."):]: v for k, v in records.items() if k.startswith("adam.")}
    behavior = {k[len("behavior."):]: v for k, v in records.items() if k.startswith("behavior.")}
    _check_vocab_shapes(path, vocab, params)
    try:
        state.model.load_state_dict(params, strict=True)
        state.optimizer.load_state_dict(adam, header["adam_step"])
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: parameter records do not fit the model: {e}") from e
    state.model.twice.policy.behavior = behavior
    state.model.era.trained = header["era_trained"]
    state.step = header["step"]
    state.trained = header["trained"]
    logger.info(f"Loaded checkpoint {path} (step {state.step})")
    return state
