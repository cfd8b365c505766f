"""Catalog, interaction logs, conversation records and their TSV formats.

Internal id conventions:

* items: ``0`` is PAD, ``1`` is the item MASK token, real items are ``2 .. n_items + 1``
* attributes: ``0`` is PAD, real attributes are ``1 .. n_attrs``
* users: dense ``0 .. n_users - 1`` in first-seen order
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD = 0
MASK = 1
FIRST_ITEM = 2


class DataError(ValueError):
    pass


@dataclass
class Catalog:
    item_attributes: list[tuple[int, ...]]  # indexed by internal item id; rows 0/1 empty
    item_raw: list[str]  # raw id of internal item FIRST_ITEM + k
    attr_raw: list[str]  # raw id of internal attribute k + 1

    @property
    def n_items(self) -> int:
        return len(self.item_raw)

    @property
    def n_attrs(self) -> int:
        return len(self.attr_raw)

    @property
    def item_ids(self) -> np.ndarray:
        return np.arange(FIRST_ITEM, FIRST_ITEM + self.n_items)

    def attrs_of(self, item: int) -> tuple[int, ...]:
        if not FIRST_ITEM <= item < FIRST_ITEM + self.n_items:
            raise DataError(f"invalid item id {item}")
        return self.item_attributes[item]

    def item_id(self, raw: str) -> int:
        return self._item_index()[raw]

    def attr_id(self, raw: str) -> int:
        return self._attr_index()[raw]

    def _item_index(self) -> dict[str, int]:
        if not hasattr(self, "_ii"):
            self._ii = {r: k + FIRST_ITEM for k, r in enumerate(self.item_raw)}
        return self._ii

    def _attr_index(self) -> dict[str, int]:
        if not hasattr(self, "_ai"):
            self._ai = {r: k + 1 for k, r in enumerate(self.attr_raw)}
        return self._ai

    def attribute_matrix(self) -> np.ndarray:
        """Boolean (n_items + 2, n_attrs + 1) membership matrix."""
        m = np.zeros((self.n_items + FIRST_ITEM, self.n_attrs + 1), dtype=bool)
        for i in range(FIRST_ITEM, FIRST_ITEM + self.n_items):
            m[i, list(self.item_attributes[i])] = True
        return m

    def __eq__(self, other) -> bool:
        return (isinstance(other, Catalog) and self.item_attributes == other.item_attributes
                and self.item_raw == other.item_raw and self.attr_raw == other.attr_raw)


@dataclass
class InteractionLog:
    user_raw: list[str]
    items: list[list[int]]  # chronological internal item ids per user
    times: list[list[int]]

    @property
    def n_users(self) -> int:
        return len(self.user_raw)

    def user_id(self, raw: str) -> int:
        if not hasattr(self, "_ui"):
            self._ui = {r: k for k, r in enumerate(self.user_raw)}
        return self._ui[raw]

    def __eq__(self, other) -> bool:
        return (isinstance(other, InteractionLog) and self.user_raw == other.user_raw
                and self.items == other.items and self.times == other.times)


@dataclass(frozen=True)
class ConversationRecord:
    user: int
    attributes: tuple[int, ...]
    target: int
    history_cutoff: int


@dataclass
class SplitSpec:
    train: list[ConversationRecord] = field(default_factory=list)
    valid: list[ConversationRecord] = field(default_factory=list)
    test: list[ConversationRecord] = field(default_factory=list)


# ------------------------------------------------------------------ reading

def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.strip():
                yield lineno, line


def load_catalog(path) -> Catalog:
    """Read ``item<TAB>attr,attr,...`` lines; attributes are indexed in sorted raw order."""
    rows: list[tuple[str, list[str]]] = []
    seen = set()
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields")
        item, attrs = parts[0], [a for a in parts[1].split(",") if a]
        if item in seen:
            raise DataError(f"{path}:{lineno}: duplicate item {item!r}")
        if not attrs:
            raise DataError(f"{path}:{lineno}: item {item!r} has no attributes")
        seen.add(item)
        rows.append((item, attrs))
    attr_raw = _attr_order({a for _, attrs in rows for a in attrs})
    return _build_catalog(rows, attr_raw)


def _attr_order(raw: set[str]) -> list[str]:
    def key(a):
        return (0, int(a), a) if a.lstrip("-").isdigit() else (1, 0, a)
    return sorted(raw, key=key)


def _build_catalog(rows, attr_raw) -> Catalog:
    aidx = {a: k + 1 for k, a in enumerate(attr_raw)}
    item_attributes: list[tuple[int, ...]] = [(), ()]
    for item, attrs in rows:
        try:
            ids = sorted({aidx[a] for a in attrs})
        except KeyError as e:
            raise DataError(f"item {item!r} references unknown attribute {e.args[0]!r}") from None
        item_attributes.append(tuple(ids))
    return Catalog(item_attributes, [r for r, _ in rows], list(attr_raw))


def load_catalog_with_maps(path, item_map, attr_map) -> Catalog:
    """Rebuild a catalog honouring previously persisted id maps."""
    items = _read_map(item_map)
    attrs = _read_map(attr_map)
    by_item = {}
    for lineno, line in _lines(path):
        item, raw_attrs = line.split("\t")
        if item in by_item:
            raise DataError(f"{path}:{lineno}: duplicate item {item!r}")
        by_item[item] = [a for a in raw_attrs.split(",") if a]
    item_raw = [r for r, _ in sorted(items.items(), key=lambda kv: kv[1])]
    attr_raw = [r for r, _ in sorted(attrs.items(), key=lambda kv: kv[1])]
    if set(item_raw) != set(by_item):
        raise DataError("item map does not match catalog file")
    return _build_catalog([(r, by_item[r]) for r in item_raw], attr_raw)


def load_interactions(path, catalog: Catalog, min_item_count: int = 1) -> InteractionLog:
    """Read ``user<TAB>item<TAB>timestamp`` lines into per-user chronological sequences.

    Ties in timestamp keep file order. Items seen fewer than ``min_item_count``
    times are dropped.
    """
    events: dict[str, list[tuple[int, int, int]]] = {}
    counts: Counter = Counter()
    idx = catalog._item_index()
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        user, item, ts = parts
        if item not in idx:
            raise DataError(f"{path}:{lineno}: item {item!r} not in catalog")
        events.setdefault(user, []).append((int(ts), lineno, idx[item]))
        counts[idx[item]] += 1
    user_raw, items, times = [], [], []
    for user, evs in events.items():
        evs.sort()
        kept = [(t, i) for t, _, i in evs if counts[i] >= min_item_count]
        user_raw.append(user)
        items.append([i for _, i in kept])
        times.append([t for t, _ in kept])
    return InteractionLog(user_raw, items, times)


def load_records(path, catalog: Catalog, log: InteractionLog) -> list[ConversationRecord]:
    records = []
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        user, attrs, target, cutoff = parts
        try:
            u = log.user_id(user)
            a = tuple(catalog.attr_id(x) for x in attrs.split(",") if x)
            t = catalog.item_id(target)
        except KeyError as e:
            raise DataError(f"{path}:{lineno}: unknown id {e.args[0]!r}") from None
        c = int(cutoff)
        if not a:
            raise DataError(f"{path}:{lineno}: empty attribute sequence")
        if not 0 <= c <= len(log.items[u]):
            raise DataError(f"{path}:{lineno}: history_cutoff {c} out of range")
        records.append(ConversationRecord(u, a, t, c))
    return records


def _read_map(path) -> dict[str, int]:
    out = {}
    for _, line in _lines(path):
        raw, internal = line.split("\t")
        out[raw] = int(internal)
    return out


# ------------------------------------------------------------------ writing

def write_catalog(catalog: Catalog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, raw in enumerate(catalog.item_raw):
            attrs = catalog.item_attributes[k + FIRST_ITEM]
            fh.write(f"{raw}\t{','.join(catalog.attr_raw[a - 1] for a in attrs)}\n")


def write_interactions(log: InteractionLog, catalog: Catalog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, raw in enumerate(log.user_raw):
            for i, t in zip(log.items[u], log.times[u]):
                fh.write(f"{raw}\t{catalog.item_raw[i - FIRST_ITEM]}\t{t}\n")


def write_records(records, catalog: Catalog, log: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            attrs = ",".join(catalog.attr_raw[a - 1] for a in r.attributes)
            fh.write(f"{log.user_raw[r.user]}\t{attrs}\t"
                     f"{catalog.item_raw[r.target - FIRST_ITEM]}\t{r.history_cutoff}\n")


def write_id_maps(catalog: Catalog, log: InteractionLog | None, directory) -> None:
    d = Path(directory)
    with open(d / "items.map.tsv", "w", encoding="utf-8") as fh:
        for k, raw in enumerate(catalog.item_raw):
            fh.write(f"{raw}\t{k + FIRST_ITEM}\n")
    with open(d / "attributes.map.tsv", "w", encoding="utf-8") as fh:
        for k, raw in enumerate(catalog.attr_raw):
            fh.write(f"{raw}\t{k + 1}\n")
    if log is not None:
        with open(d / "users.map.tsv", "w", encoding="utf-8") as fh:
            for k, raw in enumerate(log.user_raw):
                fh.write(f"{raw}\t{k}\n")


@dataclass
class Dataset:
    catalog: Catalog
    log: InteractionLog
    records: list[ConversationRecord]
    latent: list[tuple[int, ...]] | None = None  # planted preferences (synthetic only)


CATALOG_FILE = "items.tsv"
INTERACTIONS_FILE = "interactions.tsv"
RECORDS_FILE = "records.tsv"


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    os.makedirs(d, exist_ok=True)
    write_catalog(ds.catalog, d / CATALOG_FILE)
    write_interactions(ds.log, ds.catalog, d / INTERACTIONS_FILE)
    write_records(ds.records, ds.catalog, ds.log, d / RECORDS_FILE)
    write_id_maps(ds.catalog, ds.log, d)


def load_dataset(directory, records_file=None) -> Dataset:
    d = Path(directory)
    if (d / "items.map.tsv").exists() and (d / "attributes.map.tsv").exists():
        catalog = load_catalog_with_maps(d / CATALOG_FILE, d / "items.map.tsv",
                                         d / "attributes.map.tsv")
    else:
        catalog = load_catalog(d / CATALOG_FILE)
    log = load_interactions(d / INTERACTIONS_FILE, catalog)
    rpath = Path(records_file) if records_file else d / RECORDS_FILE
    records = load_records(rpath, catalog, log) if rpath.exists() else []
    return Dataset(catalog, log, records)


# ------------------------------------------------------------------ splitting

def leave_one_out_split(records: list[ConversationRecord]) -> SplitSpec:
    """Last record per user is test, the one before is validation, the rest train.

    Records must be chronological within each user. Users with fewer than three
    records only contribute training data.
    """
    by_user: dict[int, list[ConversationRecord]] = {}
    for r in records:
        by_user.setdefault(r.user, []).append(r)
    split = SplitSpec()
    for user in sorted(by_user):
        rs = by_user[user]
        if len(rs) < 3:
            split.train.extend(rs)
            continue
        split.train.extend(rs[:-2])
        split.valid.append(rs[-2])
        split.test.append(rs[-1])
    return split


def pretraining_sequences(log: InteractionLog, split: SplitSpec) -> list[list[int]]:
    """Per-user interaction prefixes that end before any held-out conversation.

    Held-out targets (validation/test) are interactions of the log, so using
    full logs for pre-training would leak them.
    """
    limit = {u: len(s) for u, s in enumerate(log.items)}
    for r in split.valid + split.test:
        limit[r.user] = min(limit[r.user], r.history_cutoff)
    return [log.items[u][:limit[u]] for u in range(log.n_users) if limit[u] > 0]


def history(log: InteractionLog, record: ConversationRecord) -> list[int]:
    return log.items[record.user][:record.history_cutoff]


# ------------------------------------------------------------------ synthetic data

def generate_synthetic(seed: int, num_users: int, num_items: int, num_attrs: int,
                       attrs_per_item: int, sessions_per_user: int,
                       history_per_user: int = 10, latent_size: int | None = None,
                       conv_attrs: tuple[int, int] = (1, 3)) -> Dataset:
    """Planted-structure data set.

    Every user gets a latent set of preferred attributes; each interaction is
    an item drawn with probability proportional to ``|A_i & latent|`` (uniform
    if no item overlaps at all). The last ``sessions_per_user`` interactions of each user become
    conversations whose attribute sequence is a random subset of the target's
    attributes.
    """
    if min(num_users, num_items, num_attrs, attrs_per_item, sessions_per_user) < 1:
        raise ValueError("all counts must be >= 1")
    if attrs_per_item > num_attrs:
        raise ValueError("attrs_per_item cannot exceed num_attrs")
    if history_per_user < 0:
        raise ValueError("history_per_user must be >= 0")
    rng = np.random.default_rng(seed)
    latent_size = latent_size or max(1, min(num_attrs, 2 * attrs_per_item))

    attr_sets = [tuple(sorted(rng.choice(num_attrs, attrs_per_item, replace=False) + 1))
                 for _ in range(num_items)]
    membership = np.zeros((num_items, num_attrs + 1), dtype=np.float64)
    for k, attrs in enumerate(attr_sets):
        membership[k, list(attrs)] = 1.0
    catalog = Catalog([(), ()] + attr_sets, [f"i{k}" for k in range(num_items)],
                      [f"a{k}" for k in range(1, num_attrs + 1)])

    length = history_per_user + sessions_per_user
    users, items, times, records, latents = [], [], [], [], []
    lo, hi = conv_attrs
    for u in range(num_users):
        latent = np.sort(rng.choice(num_attrs, latent_size, replace=False) + 1)
        latents.append(tuple(int(a) for a in latent))
        overlap = membership[:, latent].sum(axis=1)
        p = overlap / overlap.sum() if overlap.sum() > 0 else np.full(num_items, 1 / num_items)
        seq = (rng.choice(num_items, length, p=p) + FIRST_ITEM).tolist()
        users.append(f"u{u}")
        items.append(seq)
        times.append(list(range(length)))
        for pos in range(history_per_user, length):
            target = seq[pos]
            own = catalog.item_attributes[target]
            n = int(rng.integers(min(lo, len(own)), min(hi, len(own)) + 1))
            chosen = rng.permutation(own)[:n]
            records.append(ConversationRecord(u, tuple(int(a) for a in chosen), target, pos))
    return Dataset(catalog, InteractionLog(users, items, times), records, latents)


def user_latent_overlap(ds: Dataset, latent_by_user=None) -> float:
    """Mean attribute overlap between users' logged items and their latent sets."""
    latent_by_user = latent_by_user if latent_by_user is not None else ds.latent
    total, n = 0.0, 0
    for u, seq in enumerate(ds.log.items):
        lat = set(latent_by_user[u])
        for i in seq:
            total += len(lat.intersection(ds.catalog.item_attributes[i]))
            n += 1
    return total / max(n, 1)
