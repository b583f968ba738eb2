"""Small internal helpers shared across modules."""

from __future__ import annotations

import os
import tempfile


def atomic_write(path, blob: bytes, prefix: str = ".tmp-") -> None:
    """Write bytes via a temp sibling + rename so readers never see a partial file."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=prefix)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
