from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import pytest

from tagnn.data import Session

FIXTURES = Path(__file__).parent / "fixtures"
T0 = datetime(2014, 4, 1, tzinfo=timezone.utc)


def iso(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z"


def write_yoochoose(path, sessions, day_of=None):
    """Write ``sessions`` (lists of item ids) as a yoochoose click log.

    Session i happens on day ``day_of(i)`` (default: i), one click per minute.
    """
    day_of = day_of or (lambda i: i)
    lines = []
    for i, items in enumerate(sessions):
        start = T0 + timedelta(days=day_of(i), minutes=i % 60)
        for j, item in enumerate(items):
            lines.append(f"{i + 1},{iso(start + timedelta(seconds=30 * j))},{item},0")
    Path(path).write_text("\n".join(lines) + "\n")
    return path


def successor(v: int, n_items: int = 20) -> int:
    return (v * 7 + 3) % n_items


def memorization_sessions(n_sessions=50, n_items=20, seed=0):
    """Sessions whose next item is a fixed function of the current one."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sessions):
        length = int(rng.integers(2, 7))
        items = [int(rng.integers(0, n_items))]
        for _ in range(length - 1):
            items.append(successor(items[-1], n_items))
        out.append(Session(items))
    return out


def synthetic_log_sessions(n_sessions=240, n_items=30, seed=0):
    """External-id sessions with a learnable successor pattern plus noise."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sessions):
        length = int(rng.integers(2, 7))
        item = int(rng.integers(0, n_items))
        items = []
        for _ in range(length):
            items.append(str(5000 + item))
            item = (item * 7 + 3 + int(rng.integers(0, 2))) % n_items
        out.append(items)
    return out


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def raw_log(tmp_path):
    """Yoochoose log of 240 sessions spread over 8 days (30 per day)."""
    return write_yoochoose(tmp_path / "clicks.dat", synthetic_log_sessions(), day_of=lambda i: i // 30)


@pytest.fixture
def prepared(tmp_path, raw_log):
    from tagnn.cli import main

    out = tmp_path / "prepared"
    assert main(["preprocess", "--data", str(raw_log), "--format", "yoochoose", "--out", str(out)]) == 0
    return out
