import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from services.dataset import InteractionDataset, load_interactions, write_planted_block_log


def build_dataset(train, val_item, test_item, num_items):
    """InteractionDataset from explicit per-user train lists."""
    num_users = len(train)
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=[np.sort(np.asarray(t, dtype=np.int64)) for t in train],
        val_item=np.asarray(val_item, dtype=np.int64),
        test_item=np.asarray(test_item, dtype=np.int64),
        user_index={f"u{u}": u for u in range(num_users)},
        item_index={f"i{i}": i for i in range(num_items)},
    )


@pytest.fixture
def dataset_factory():
    return build_dataset


@pytest.fixture(scope="session")
def planted_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "planted.tsv"
    return write_planted_block_log(path, num_users=30, num_items=60, num_blocks=5,
                                   min_items=8, max_items=12, seed=0)


@pytest.fixture(scope="session")
def planted_dataset(planted_path):
    return load_interactions(planted_path)
