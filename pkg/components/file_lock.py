"""
file_lock.py
Advisory on-disk locks keeping an install area or an agent work directory
single-writer.
"""

import errno
import fcntl
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Union

from components.exceptions import IoFailure

logger = logging.getLogger("file_lock")


@contextmanager
def get_lock(path: Union[str, Path]) -> Iterator[Path]:
    """
    Hold an exclusive lock on ``path`` for the duration of the block.

    The lock is not waited for: if another process holds it, IoFailure is raised.
    The lock file records the holder's pid and is left in place on release.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
    try:
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            if exc.errno in (errno.EAGAIN, errno.EACCES, errno.EWOULDBLOCK):
                holder = path.read_text(encoding="utf-8", errors="replace").strip() or "unknown"
                raise IoFailure(f"{path} is locked by pid {holder}")
            raise IoFailure(f"cannot lock {path}: {exc}")
        os.ftruncate(fd, 0)
        os.write(fd, str(os.getpid()).encode("ascii"))
        logger.debug(f"Acquired lock {path}")
        try:
            yield path
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
            logger.debug(f"Released lock {path}")
    finally:
        os.close(fd)
