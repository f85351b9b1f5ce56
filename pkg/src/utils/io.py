"""
File Utilities
Atomic writes and content hashing for reproducible outputs
"""
import hashlib
import os
import tempfile
from contextlib import contextmanager


@contextmanager
def atomic_write(path: str, mode: str = 'wb'):
    """
    Write to a temp file next to path, then rename over it

    Readers never observe a partially written file.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
    try:
        encoding = None if 'b' in mode else 'utf-8'
        newline = None if 'b' in mode else ''
        with os.fdopen(fd, mode, encoding=encoding, newline=newline) as fh:
            yield fh
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def sha256_file(path: str) -> str:
    """SHA256 of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_bytes(data: bytes) -> str:
    """SHA256 of an in-memory buffer"""
    return hashlib.sha256(data).hexdigest()
