import hashlib
import os
import sys
from datetime import datetime

import psutil


def timestamp() -> str:
    return datetime.now().isoformat()[:19]


def rss() -> int:
    """return rss memory usage in MB"""
    return int(meminfo().rss / 1024 / 1024)


def meminfo():
    pid = os.getpid()
    proc = psutil.Process(pid)
    return proc.memory_info()


def log(msg: str) -> None:
    print(f"{timestamp()}:RSS {rss():4,} MB: {msg}")


def error(msg: str) -> None:
    print(f"*** {msg}", file=sys.stderr)


def worker_count() -> int:
    """number of Monte-Carlo workers, env SGT_WORKERS, at least 1"""
    try:
        return max(1, int(os.environ.get("SGT_WORKERS", "1")))
    except ValueError:
        error(f"ignoring invalid SGT_WORKERS={os.environ.get('SGT_WORKERS')}")
        return 1


def short_hash(text: str, length: int = 16) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def ensure_dir(path: str) -> str:
    path = os.path.abspath(os.path.expanduser(path))
    os.makedirs(path, exist_ok=True)
    return path
