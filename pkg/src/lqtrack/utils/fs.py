"""Filesystem utility helpers."""
from pathlib import Path
import os
import shutil
import tempfile

from src.lqtrack.errors import ArtifactError


def ensure_dir_exists(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write_bytes(target: Path, data: bytes, keep_backup: bool = True) -> Path:
    """Write `data` to `target` atomically, keeping the previous file as `.bak`.

    The bytes go to a temp file in the same directory, are fsynced, and the
    temp file then replaces the target.
    """
    target = Path(target)
    ensure_dir_exists(target.parent)
    fd, tmp_path = tempfile.mkstemp(prefix=target.name, dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        if keep_backup and target.exists():
            shutil.copy2(target, target.with_suffix(target.suffix + ".bak"))
        os.replace(tmp_path, target)
    except OSError as e:
        raise ArtifactError(f"Atomic write of {target} failed: {e}") from e
    finally:
        if os.path.exists(tmp_path):
            try:
                os.remove(tmp_path)
            except OSError:
                pass
    return target


def atomic_write_text(target: Path, text: str, keep_backup: bool = True) -> Path:
    return atomic_write_bytes(target, text.encode("utf-8"), keep_backup=keep_backup)
