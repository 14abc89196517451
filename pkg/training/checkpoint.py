"""
Versioned checkpoint files.

Layout: 8-byte magic ``SRFLCKPT``, uint32 format version, uint64 payload
length, 32-byte SHA-256 of the payload, then the ``torch.save`` payload.
"""
import hashlib
import io
import logging
import os
import struct
import tempfile
from pathlib import Path

import torch

from surfels.exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'SRFLCKPT'
FORMAT_VERSION = 1
HEADER = struct.Struct('<8sIQ32s')


def checkpoint_bytes(state):
    buffer = io.BytesIO()
    torch.save(state, buffer)
    payload = buffer.getvalue()
    return HEADER.pack(MAGIC, FORMAT_VERSION, len(payload), hashlib.sha256(payload).digest()) + payload


def atomic_write(path, data):
    """Write ``data`` next to ``path`` and move it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.')
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save_checkpoint(path, state):
    try:
        atomic_write(path, checkpoint_bytes(state))
    except OSError as exc:
        raise CheckpointError(f'cannot write checkpoint {path}: {exc}') from exc
    logger.debug('checkpoint written to %s', path)
    return Path(path)


def parse_checkpoint(data, name='checkpoint'):
    if len(data) < HEADER.size:
        raise CheckpointError(f'{name}: truncated header')
    magic, version, length, digest = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f'{name}: not a checkpoint file')
    if version != FORMAT_VERSION:
        raise CheckpointError(f'{name}: format version {version}, expected {FORMAT_VERSION}')
    payload = data[HEADER.size:]
    if len(payload) != length:
        raise CheckpointError(f'{name}: payload is {len(payload)} bytes, header says {length}')
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f'{name}: payload checksum mismatch')
    try:
        return torch.load(io.BytesIO(payload), map_location='cpu', weights_only=True)
    except Exception as exc:
        raise CheckpointError(f'{name}: unreadable payload ({exc})') from exc


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f'cannot read checkpoint {path}: {exc.strerror}') from exc
    return parse_checkpoint(data, str(path))
