"""Helpers shared by the binary file formats: atomic writes and little-endian field packing"""

import json
import os
import struct
from contextlib import contextmanager
from logging import getLogger
from pathlib import Path
from tempfile import NamedTemporaryFile
from typing import IO, Any, BinaryIO, Iterator, Sequence, Union

from .constants import PathOrStr
from .exceptions import CorruptionError, FormatError

logger = getLogger(__name__)


@contextmanager
def atomic_write(filename: PathOrStr, mode: str = 'wb') -> Iterator[IO]:
    """Open a temporary file next to ``filename``, and rename it into place only if the block
    completes without errors. Parent directories are created first.
    """
    file_path = Path(filename).expanduser()
    file_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = NamedTemporaryFile(
        mode, dir=file_path.parent, prefix=f'.{file_path.name}.', suffix='.tmp', delete=False
    )
    try:
        with tmp as f:
            yield f
        os.replace(tmp.name, file_path)
    except BaseException:
        Path(tmp.name).unlink(missing_ok=True)
        raise


def write(content: Union[str, bytes], filename: PathOrStr):
    """Atomically write text or bytes to a file, creating parent dirs first"""
    logger.info(f'Writing to {filename}')
    mode = 'wb' if isinstance(content, bytes) else 'w'
    with atomic_write(filename, mode) as f:
        f.write(content)
        # Ensure trailing newline
        if isinstance(content, str) and not content.endswith('\n'):
            f.write('\n')


def write_json(obj: Any, filename: PathOrStr):
    write(json.dumps(obj, indent=2, default=str), filename)


def read_json(filename: PathOrStr) -> Any:
    with open(Path(filename).expanduser(), encoding='utf-8') as f:
        return json.load(f)


def pack_u32s(values: Sequence[int]) -> bytes:
    return struct.pack(f'<{len(values)}I', *values)


def read_exact(f: BinaryIO, size: int, path: PathOrStr, what: str = 'data') -> bytes:
    """Read exactly ``size`` bytes, or raise a :py:exc:`.CorruptionError` if the file is short"""
    data = f.read(size)
    if len(data) != size:
        raise CorruptionError(f'{path}: truncated {what} (expected {size} bytes, got {len(data)})')
    return data


def check_magic(data: bytes, expected: bytes, path: PathOrStr):
    if data != expected:
        raise FormatError(f'{path}: not a {expected.decode()} file (magic {data!r})')


def check_version(version: int, expected: int, path: PathOrStr):
    if version != expected:
        raise FormatError(f'{path}: unsupported version {version} (expected {expected})')
