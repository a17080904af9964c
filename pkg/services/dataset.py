"""
Interaction data service for distillation experiments.
Loads implicit-feedback logs, filters them, builds leave-one-out splits and
draws negatives for training and evaluation.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from services.random_streams import stream

logger = logging.getLogger(__name__)

EVAL_REPEATS = 5
EVAL_NEGATIVES = 499

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


class DatasetError(Exception):
    """Raised when interaction data cannot produce a usable dataset."""
    pass


@dataclass(frozen=True)
class InteractionDataset:
    """Binary user-item interactions with a leave-one-out split."""

    num_users: int
    num_items: int
    train: List[np.ndarray]
    val_item: np.ndarray
    test_item: np.ndarray
    user_index: Dict[str, int]
    item_index: Dict[str, int]

    train_users: np.ndarray = field(init=False, repr=False)
    train_items: np.ndarray = field(init=False, repr=False)
    _train_keys: np.ndarray = field(init=False, repr=False)
    _positive_keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lengths = np.array([len(t) for t in self.train], dtype=np.int64)
        users = np.repeat(np.arange(self.num_users, dtype=np.int64), lengths)
        items = np.concatenate(self.train).astype(np.int64) if self.num_users else np.empty(0, np.int64)
        train_keys = users * self.num_items + items
        held_keys = np.concatenate([
            np.arange(self.num_users, dtype=np.int64) * self.num_items + self.val_item,
            np.arange(self.num_users, dtype=np.int64) * self.num_items + self.test_item,
        ])
        object.__setattr__(self, "train_users", users)
        object.__setattr__(self, "train_items", items)
        object.__setattr__(self, "_train_keys", np.sort(train_keys))
        object.__setattr__(self, "_positive_keys", np.sort(np.concatenate([train_keys, held_keys])))

    @property
    def num_train(self) -> int:
        return len(self.train_items)

    @property
    def num_interactions(self) -> int:
        return self.num_train + 2 * self.num_users

    def positives(self, user: int) -> np.ndarray:
        """Sorted train items plus the held-out validation and test items of ``user``."""
        return np.union1d(self.train[user], [self.val_item[user], self.test_item[user]])

    def _member(self, keys: np.ndarray, table: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(table, keys)
        pos = np.minimum(pos, len(table) - 1)
        return table[pos] == keys

    def is_positive(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Membership in train ∪ {val, test}, vectorised over (user, item) pairs."""
        keys = np.asarray(users, np.int64) * self.num_items + np.asarray(items, np.int64)
        return self._member(keys, self._positive_keys)

    def is_train(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = np.asarray(users, np.int64) * self.num_items + np.asarray(items, np.int64)
        return self._member(keys, self._train_keys)

    def train_mask(self, users: np.ndarray) -> np.ndarray:
        """Dense boolean matrix (len(users), num_items) of training interactions."""
        mask = np.zeros((len(users), self.num_items), dtype=bool)
        for row, u in enumerate(users):
            mask[row, self.train[u]] = True
        return mask


@dataclass(frozen=True)
class NegativePool:
    """Evaluation negatives: (num_users, repeats, n) item ids, -1 where a draw was shrunk."""

    negatives: np.ndarray
    counts: np.ndarray
    seed: int

    @property
    def repeats(self) -> int:
        return self.negatives.shape[1]

    def repeat_view(self, repeat: int) -> "NegativePool":
        """Single-repeat pool holding draw ``repeat``."""
        return NegativePool(self.negatives[:, repeat:repeat + 1, :], self.counts, self.seed)


def filter_interactions(frame: pd.DataFrame, min_user_interactions: int,
                        min_item_interactions: int = 1) -> pd.DataFrame:
    """
    Drop users and items below their minimum support until nothing changes.

    Args:
        frame: Deduplicated interactions with ``user`` and ``item`` columns
        min_user_interactions: Minimum distinct items per user
        min_item_interactions: Minimum distinct users per item

    Returns:
        Filtered frame in the original row order
    """
    while True:
        user_counts = frame.groupby("user", sort=False)["item"].transform("size")
        item_counts = frame.groupby("item", sort=False)["user"].transform("size")
        keep = (user_counts >= min_user_interactions) & (item_counts >= min_item_interactions)
        if keep.all():
            return frame
        frame = frame[keep]


def load_interactions(path: Union[str, Path], min_user_interactions: int = 5,
                      min_item_interactions: int = 1) -> InteractionDataset:
    """
    Build a leave-one-out dataset from a TSV log of ``user \\t item`` lines.

    The last two distinct items of each user (file order) become the test and
    validation items; everything before them is training data.

    Args:
        path: UTF-8 TSV file
        min_user_interactions: Minimum interactions per user (5 CiteULike, 20 Foursquare)
        min_item_interactions: Minimum interactions per item

    Returns:
        InteractionDataset
    """
    frame = pd.read_csv(path, sep="\t", header=None, usecols=[0, 1], names=["user", "item"],
                        dtype=str, encoding="utf-8", skip_blank_lines=True)
    frame = frame.dropna()
    raw_rows = len(frame)
    frame = frame.drop_duplicates(keep="first")
    logger.info(f"Read {raw_rows} interactions ({raw_rows - len(frame)} duplicates) from {path}")

    frame = filter_interactions(frame, min_user_interactions, min_item_interactions)
    if min_user_interactions < 3:
        counts = frame.groupby("user", sort=False)["item"].transform("size")
        for user in frame.loc[counts < 3, "user"].unique():
            logger.warning(f"Rejecting user {user}: fewer than 3 distinct items, cannot split")
        frame = filter_interactions(frame, 3, min_item_interactions)

    if frame.empty:
        raise DatasetError(f"No interactions left in {path} after filtering")

    return _split_frame(frame.reset_index(drop=True))


def _split_frame(frame: pd.DataFrame) -> InteractionDataset:
    user_codes, user_uniques = pd.factorize(frame["user"], sort=False)
    item_codes, item_uniques = pd.factorize(frame["item"], sort=False)
    frame = frame.assign(uid=user_codes, iid=item_codes)
    frame["from_end"] = frame.groupby("uid", sort=False).cumcount(ascending=False)

    num_users = len(user_uniques)
    held = frame[frame["from_end"] <= 1]
    test_item = np.empty(num_users, dtype=np.int64)
    val_item = np.empty(num_users, dtype=np.int64)
    test_rows = held[held["from_end"] == 0]
    val_rows = held[held["from_end"] == 1]
    test_item[test_rows["uid"].to_numpy()] = test_rows["iid"].to_numpy()
    val_item[val_rows["uid"].to_numpy()] = val_rows["iid"].to_numpy()

    train_rows = frame[frame["from_end"] >= 2].sort_values(["uid", "iid"])
    bounds = np.searchsorted(train_rows["uid"].to_numpy(), np.arange(num_users + 1))
    train_items = train_rows["iid"].to_numpy().astype(np.int64)
    train = [train_items[bounds[u]:bounds[u + 1]] for u in range(num_users)]

    ds = InteractionDataset(
        num_users=num_users,
        num_items=len(item_uniques),
        train=train,
        val_item=val_item,
        test_item=test_item,
        user_index={str(u): i for i, u in enumerate(user_uniques)},
        item_index={str(v): i for i, v in enumerate(item_uniques)},
    )
    logger.info(f"Dataset: {ds.num_users} users, {ds.num_items} items, {ds.num_interactions} interactions")
    return ds


def sample_train_negatives(ds: InteractionDataset, user: int, n: int,
                           rng: np.random.Generator) -> np.ndarray:
    """
    Draw ``n`` items uniformly from the items ``user`` never interacted with.

    Collisions with train, validation or test items are redrawn.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    positives = ds.positives(user)
    if len(positives) >= ds.num_items:
        raise DatasetError(f"user {user} has no unobserved items")
    out = np.empty(n, dtype=np.int64)
    for k in range(n):
        while True:
            item = int(rng.integers(ds.num_items))
            pos = np.searchsorted(positives, item)
            if pos >= len(positives) or positives[pos] != item:
                out[k] = item
                break
    return out


def sample_negatives_matrix(ds: InteractionDataset, users: np.ndarray, n: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Vectorised variant: ``n`` unobserved items per entry of ``users`` (with replacement)."""
    users = np.asarray(users, dtype=np.int64)
    rows = np.repeat(users, n)
    items = rng.integers(ds.num_items, size=len(rows))
    bad = ds.is_positive(rows, items)
    while bad.any():
        items[bad] = rng.integers(ds.num_items, size=int(bad.sum()))
        bad[bad] = ds.is_positive(rows[bad], items[bad])
    return items.reshape(len(users), n)


def build_negative_pool(ds: InteractionDataset, seed: int, repeats: int = EVAL_REPEATS,
                        n_negatives: int = EVAL_NEGATIVES) -> NegativePool:
    """
    Draw the evaluation negatives for every user.

    Each of the ``repeats`` draws holds ``n_negatives`` distinct unobserved
    items, reproducible from (seed, user, repeat). Users with fewer unobserved
    items get every available item and a warning.
    """
    negatives = np.full((ds.num_users, repeats, n_negatives), -1, dtype=np.int64)
    counts = np.empty(ds.num_users, dtype=np.int64)
    all_items = np.arange(ds.num_items, dtype=np.int64)
    shrunk = 0
    for u in range(ds.num_users):
        candidates = np.setdiff1d(all_items, ds.positives(u), assume_unique=True)
        n = min(n_negatives, len(candidates))
        if n < n_negatives:
            shrunk += 1
            logger.warning(f"User {u}: only {len(candidates)} unobserved items, shrinking draws to {n}")
        counts[u] = n
        for r in range(repeats):
            rng = stream(seed, "eval_pool", u, r)
            negatives[u, r, :n] = rng.choice(candidates, size=n, replace=False)
    logger.info(f"Built negative pool: {ds.num_users} users x {repeats} x {n_negatives} ({shrunk} shrunk)")
    return NegativePool(negatives=negatives, counts=counts, seed=seed)


def _fnv1a_update(h: int, data: bytes) -> int:
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def dataset_checksum(ds: InteractionDataset) -> str:
    """64-bit FNV-1a over sorted (user, item) pairs of train, then validation, then test."""
    h = FNV_OFFSET
    users = np.arange(ds.num_users, dtype=np.int64)
    for us, its in ((ds.train_users, ds.train_items), (users, ds.val_item), (users, ds.test_item)):
        order = np.lexsort((its, us))
        pairs = np.stack([us[order], its[order]], axis=1).astype("<u4")
        h = _fnv1a_update(h, pairs.tobytes())
    return f"{h:016x}"


def summarize(ds: InteractionDataset) -> Dict[str, object]:
    """Counts, density and sparsity for the manifest."""
    density = ds.num_interactions / float(ds.num_users * ds.num_items)
    return {
        "num_users": ds.num_users,
        "num_items": ds.num_items,
        "num_interactions": ds.num_interactions,
        "num_train": ds.num_train,
        "density": density,
        "sparsity": 1.0 - density,
        "checksum": dataset_checksum(ds),
    }


def write_manifest(ds: InteractionDataset, path: Union[str, Path], source: Optional[str] = None) -> Dict[str, object]:
    """Write the text manifest used for reproducibility audits."""
    summary = summarize(ds)
    lines = []
    if source:
        lines.append(f"source: {source}")
    lines.append(f"users: {summary['num_users']}")
    lines.append(f"items: {summary['num_items']}")
    lines.append(f"interactions: {summary['num_interactions']}")
    lines.append(f"train_interactions: {summary['num_train']}")
    lines.append(f"density: {summary['density']:.4%}")
    lines.append(f"sparsity: {summary['sparsity']:.4%}")
    lines.append(f"split_checksum: {summary['checksum']}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return summary


def write_planted_block_log(path: Union[str, Path], num_users: int = 200, num_items: int = 500,
                            num_blocks: int = 20, min_items: int = 10, max_items: int = 18,
                            in_block_prob: float = 0.9, seed: int = 0) -> Path:
    """
    Write a synthetic TSV log with planted block structure.

    User ``u`` and item ``i`` belong to block ``u % num_blocks`` and
    ``i % num_blocks``; each interaction stays inside the user's block with
    probability ``in_block_prob``.
    """
    rng = stream(seed, "synthetic")
    items = np.arange(num_items)
    rows = []
    for u in range(num_users):
        block = u % num_blocks
        own = items[items % num_blocks == block]
        other = items[items % num_blocks != block]
        n = int(rng.integers(min_items, max_items + 1))
        n_in = min(len(own), int(rng.binomial(n, in_block_prob)))
        n_out = min(len(other), n - n_in)
        picked = np.concatenate([rng.choice(own, n_in, replace=False), rng.choice(other, n_out, replace=False)])
        rng.shuffle(picked)
        rows.extend((f"u{u}", f"i{i}") for i in picked)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, sep="\t", header=False, index=False)
    logger.info(f"Wrote planted-block log ({num_users} users, {num_items} items, {num_blocks} blocks) to {path}")
    return path
