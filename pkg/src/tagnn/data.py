"""Click-log ingestion, session filtering, time split, prefix expansion and batching."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .graph import GraphBatch, build_graph, pad_graphs

log = logging.getLogger(__name__)

FORMATS = ("yoochoose", "diginetica")
DAY_MS = 86_400_000
SKIP_WARN_FRACTION = 0.01


class DataError(ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


class SplitError(DataError):
    pass


class UnknownItemError(KeyError):
    def __init__(self, item_id):
        super().__init__(item_id)
        self.item_id = item_id

    def __str__(self):
        return f"unknown item id {self.item_id!r}"


@dataclass(frozen=True)
class RawEvent:
    session_id: str
    timestamp: int  # epoch milliseconds
    item_id: str


@dataclass
class ParseResult:
    events: list[RawEvent]
    rows: int
    skipped: int

    @property
    def warning(self) -> str | None:
        if self.rows and self.skipped / self.rows > SKIP_WARN_FRACTION:
            return f"skipped {self.skipped} of {self.rows} rows ({100 * self.skipped / self.rows:.1f}%)"
        return None


@dataclass
class Session:
    items: list[int]
    session_id: str = ""
    end_time: int = 0

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class TrainExample:
    prefix: tuple[int, ...]
    label: int


class ItemVocabulary:
    """Dense bijection between external item ids and indices 0..m-1."""

    def __init__(self, ids: Iterable[str] = ()):
        self.ids: list[str] = []
        self._index: dict[str, int] = {}
        for item in ids:
            self.add(item)

    def add(self, item_id: str) -> int:
        idx = self._index.get(item_id)
        if idx is None:
            idx = self._index[item_id] = len(self.ids)
            self.ids.append(item_id)
        return idx

    def __len__(self):
        return len(self.ids)

    def __contains__(self, item_id):
        return item_id in self._index

    def index(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise UnknownItemError(item_id) from None

    def external(self, index: int) -> str:
        return self.ids[index]

    def to_text(self) -> str:
        return "".join(f"{i}\t{item}\n" for i, item in enumerate(self.ids))

    def digest(self) -> str:
        return f"{fnv1a64(self.to_text().encode('utf-8')):016x}"

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "ItemVocabulary":
        vocab = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                idx, _, item = line.partition("\t")
                if int(idx) != len(vocab):
                    raise DataError(f"{path}:{lineno}: expected index {len(vocab)}, got {idx}")
                vocab.add(item)
        return vocab


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


# ---------------------------------------------------------------------------
# parsing


def _iso_ms(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp() * 1000))


def _yoochoose_rows(reader):
    for row in reader:
        if not row:
            continue
        yield row, lambda row=row: RawEvent(row[0].strip(), _iso_ms(row[1]), row[2].strip())


def _diginetica_rows(reader):
    header = next(reader, None)
    if header is None:
        return
    col = {name.strip(): i for i, name in enumerate(header)}
    try:
        s, it, tf, date = col["sessionId"], col["itemId"], col["timeframe"], col["eventdate"]
    except KeyError as exc:
        raise DataError(f"diginetica header is missing column {exc}") from None

    def make(row):
        return RawEvent(row[s].strip(), _iso_ms(row[date]) + int(row[tf]), row[it].strip())

    for row in reader:
        if not row:
            continue
        yield row, lambda row=row: make(row)


def parse_events(source: BinaryIO | bytes | str | os.PathLike, fmt: str) -> ParseResult:
    """Read a raw click log. Rows whose timestamp or item id cannot be read are skipped."""
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return parse_events(fh, fmt)

    text = io.TextIOWrapper(source, encoding="utf-8", newline="")
    try:
        reader = csv.reader(text, delimiter="," if fmt == "yoochoose" else ";")
        rows = _yoochoose_rows(reader) if fmt == "yoochoose" else _diginetica_rows(reader)
        events, total, skipped = [], 0, 0
        for _, make in rows:
            total += 1
            try:
                event = make()
            except (ValueError, IndexError, OverflowError):
                skipped += 1
                continue
            if not event.item_id or not event.session_id:
                skipped += 1
                continue
            events.append(event)
    finally:
        text.detach()
    result = ParseResult(events, total, skipped)
    if result.warning:
        log.warning(result.warning)
    return result


# ---------------------------------------------------------------------------
# sessions


def group_sessions(events: Iterable[RawEvent]) -> list[tuple[str, list[RawEvent]]]:
    """Group by session id (first-seen order), each time-sorted stably."""
    groups: dict[str, list[RawEvent]] = {}
    for ev in events:
        groups.setdefault(ev.session_id, []).append(ev)
    return [(sid, sorted(evs, key=lambda e: e.timestamp)) for sid, evs in groups.items()]


def filter_sessions(groups: list[tuple[str, list[RawEvent]]], min_item_count: int = 5,
                    min_length: int = 2, until_stable: bool = False) -> list[tuple[str, list[RawEvent]]]:
    """Drop rare items, then sessions left shorter than ``min_length``.

    One pass by default. Dropping sessions can push further items under the
    count threshold; ``until_stable`` repeats the pass until nothing changes.
    """
    while True:
        counts = Counter(ev.item_id for _, evs in groups for ev in evs)
        kept = []
        for sid, evs in groups:
            evs = [ev for ev in evs if counts[ev.item_id] >= min_item_count]
            if len(evs) >= min_length:
                kept.append((sid, evs))
        if not until_stable or kept == groups:
            return kept
        groups = kept


def build_and_filter(events: Iterable[RawEvent], min_item_count: int = 5, min_length: int = 2,
                     until_stable: bool = False) -> tuple[list[Session], ItemVocabulary]:
    groups = filter_sessions(group_sessions(events), min_item_count, min_length, until_stable)
    if not groups:
        raise EmptyDatasetError("no session survives the item and length filters")
    vocab = ItemVocabulary()
    sessions = [
        Session([vocab.add(ev.item_id) for ev in evs], sid, max(ev.timestamp for ev in evs))
        for sid, evs in groups
    ]
    return sessions, vocab


def split_by_time(sessions: Sequence[Session], test_window_ms: int,
                  min_length: int = 2) -> tuple[list[Session], list[Session]]:
    """Sessions ending within the final window become the test set.

    Items never seen in training are stripped from test sessions, which are
    then dropped if they fall below ``min_length``.
    """
    if not sessions:
        raise SplitError("cannot split an empty session list")
    boundary = max(s.end_time for s in sessions) - test_window_ms
    train = [s for s in sessions if s.end_time <= boundary]
    test_raw = [s for s in sessions if s.end_time > boundary]
    seen = {i for s in train for i in s.items}
    test = []
    for s in test_raw:
        items = [i for i in s.items if i in seen]
        if len(items) >= min_length:
            test.append(Session(items, s.session_id, s.end_time))
    if not train or not test:
        raise SplitError(
            f"split at boundary {boundary} ms gives {len(train)} train and {len(test)} test sessions")
    return train, test


def compact_vocabulary(vocab: ItemVocabulary, train: Sequence[Session],
                       test: Sequence[Session] = ()) -> tuple[list[Session], list[Session], ItemVocabulary]:
    """Re-index so the vocabulary covers exactly the items seen in ``train``."""
    used = sorted({i for s in train for i in s.items})
    remap = {old: new for new, old in enumerate(used)}
    new_vocab = ItemVocabulary(vocab.external(i) for i in used)

    def apply(ss):
        return [Session([remap[i] for i in s.items], s.session_id, s.end_time) for s in ss]

    return apply(train), apply(test), new_vocab


def select_recent_fraction(sessions: Sequence[Session], fraction: float) -> list[Session]:
    """Keep the most recent ``ceil(len * fraction)`` sessions by end time."""
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    keep = math.ceil(len(sessions) * fraction)
    ordered = sorted(sessions, key=lambda s: s.end_time)
    return ordered[len(ordered) - keep:]


def expand_prefixes(session: Session | Sequence[int]) -> list[TrainExample]:
    items = session.items if isinstance(session, Session) else list(session)
    if len(items) < 2:
        raise ValueError(f"session of length {len(items)} yields no (prefix, label) pair")
    return [TrainExample(tuple(items[:i]), items[i]) for i in range(1, len(items))]


def expand_all(sessions: Iterable[Session]) -> list[TrainExample]:
    return [ex for s in sessions for ex in expand_prefixes(s)]


# ---------------------------------------------------------------------------
# prepared example files


def write_examples(path, examples: Iterable[TrainExample]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{ex.label}\t{','.join(map(str, ex.prefix))}\n")


def read_examples(path, n_items: int | None = None) -> list[TrainExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                label, _, items = line.partition("\t")
                ex = TrainExample(tuple(int(x) for x in items.split(",")), int(label))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed example line") from None
            if n_items is not None and max(ex.prefix + (ex.label,)) >= n_items:
                raise DataError(f"{path}:{lineno}: item index outside vocabulary of {n_items}")
            examples.append(ex)
    return examples


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    examples: list[TrainExample]
    graphs: GraphBatch
    labels: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.examples)


def collate(examples: Sequence[TrainExample], pad_index: int) -> Batch:
    graphs = pad_graphs([build_graph(ex.prefix) for ex in examples], pad_index=pad_index)
    return Batch(list(examples), graphs, np.array([ex.label for ex in examples], dtype=np.int64))


def make_batches(examples: Sequence[TrainExample], batch_size: int = 100, seed: int = 0,
                 epoch: int = 0, pad_index: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """Yield padded batches; the order is a deterministic function of (seed, epoch)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(examples))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield collate([examples[i] for i in order[start:start + batch_size]], pad_index)
