"""
Recommender models for teacher and student training.
BPR matrix factorization and NeuMF, with scoring, base losses, full ranking
and the last-hidden-layer taps that latent distillation reads from.
"""

import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from config import ConfigError, scaled_width
from services.gradcore import ParamStore

logger = logging.getLogger(__name__)

EMBEDDING_STD = 0.01
LOGIT_CLAMP = 40.0
SCORE_CHUNK = 1 << 16


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass
class ModelConfig:
    """Base model choice, size ratio and optimisation knobs."""

    base_model: str = "bpr"
    phi: float = 1.0
    teacher_dim: int = 200
    neumf_layers: int = 2
    neumf_tap: str = "joint"
    epochs: int = 1000
    batch_size: int = 512
    learning_rate: float = 0.005
    l2: float = 1e-4

    @property
    def dim(self) -> int:
        return scaled_width(self.phi, self.teacher_dim)

    def teacher(self) -> "ModelConfig":
        return replace(self, phi=1.0)


@dataclass
class TapBatch:
    """Hidden representations of one tap side for a set of entities."""

    side: str
    keys: np.ndarray
    values: np.ndarray
    users: Optional[np.ndarray] = None
    items: Optional[np.ndarray] = None
    cache: Optional[dict] = None


class BprModel:
    """Matrix factorization; the embeddings are the last hidden layer."""

    base_model = "bpr"

    def __init__(self, params: ParamStore, num_users: int, num_items: int, dim: int,
                 l2: float = 0.0, rng: Optional[np.random.Generator] = None):
        self.params = params
        self.num_users = num_users
        self.num_items = num_items
        self.dim = dim
        self.l2 = l2
        if "user_emb" not in params:
            if rng is None:
                raise ValueError("rng is required to initialise a new model")
            params.add("user_emb", rng.normal(0.0, EMBEDDING_STD, (num_users, dim)))
            params.add("item_emb", rng.normal(0.0, EMBEDDING_STD, (num_items, dim)))
        if params["user_emb"].shape != (num_users, dim) or params["item_emb"].shape != (num_items, dim):
            raise ConfigError("BPR tensors do not match the declared shape")

    @property
    def tensor_names(self) -> List[str]:
        return ["user_emb", "item_emb"]

    @property
    def tap_sides(self) -> Tuple[str, ...]:
        return ("user", "item")

    def tap_width(self, side: str) -> int:
        return self.dim

    def forward(self, users: np.ndarray, items: np.ndarray):
        u = self.params["user_emb"][users]
        v = self.params["item_emb"][items]
        return np.sum(u * v, axis=1), (users, items, u, v)

    def backward(self, cache, dlogits: np.ndarray) -> None:
        users, items, u, v = cache
        np.add.at(self.params.grad("user_emb"), users, dlogits[:, None] * v)
        np.add.at(self.params.grad("item_emb"), items, dlogits[:, None] * u)

    def score_matrix(self, users: np.ndarray, items: Optional[np.ndarray] = None) -> np.ndarray:
        """Scores for ``users`` against all items, or against a per-user item matrix."""
        u = self.params["user_emb"][users]
        if items is None:
            return u @ self.params["item_emb"].T
        return np.einsum("nd,nkd->nk", u, self.params["item_emb"][items])

    def taps(self, users: np.ndarray, items: np.ndarray) -> List[TapBatch]:
        user_ids = np.unique(users)
        item_ids = np.unique(items)
        return [
            TapBatch("user", user_ids, self.params["user_emb"][user_ids]),
            TapBatch("item", item_ids, self.params["item_emb"][item_ids]),
        ]

    def backprop_tap(self, tap: TapBatch, grad: np.ndarray) -> None:
        name = "user_emb" if tap.side == "user" else "item_emb"
        np.add.at(self.params.grad(name), tap.keys, grad)

    def l2_penalty(self, users: np.ndarray, items_list: Iterable[np.ndarray], n: int, weight: float = 1.0) -> float:
        """0.5 * l2 * mean over the batch of squared norms of the touched embeddings."""
        if self.l2 == 0.0:
            return 0.0
        total = _l2_rows(self.params, "user_emb", users, self.l2 / n, weight)
        for items in items_list:
            total += _l2_rows(self.params, "item_emb", items, self.l2 / n, weight)
        return total


class NeumfModel:
    """
    NeuMF: a GMF branch and an MLP tower joined by an output weight vector.

    The joint tap is the concatenation fed to the output weight. ``dim`` is
    split into ceil(dim/2) GMF units and the rest as the MLP top width; the
    tower halves its width layer by layer.
    """

    base_model = "neumf"

    def __init__(self, params: ParamStore, num_users: int, num_items: int, dim: int,
                 n_layers: int = 2, tap: str = "joint", l2: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        if dim < 2:
            raise ConfigError("NeuMF needs a hidden width of at least 2")
        if n_layers not in (1, 2, 3, 4):
            raise ConfigError(f"NeuMF supports 1-4 hidden layers, got {n_layers}")
        self.params = params
        self.num_users = num_users
        self.num_items = num_items
        self.dim = dim
        self.n_layers = n_layers
        self.tap = tap
        self.l2 = l2
        self.gmf_dim = (dim + 1) // 2
        self.mlp_dim = dim - self.gmf_dim
        self.widths = [self.mlp_dim * 2 ** (n_layers - 1 - l) for l in range(n_layers)]
        self.mlp_emb_dim = self.widths[0]

        if "gmf_user" not in params:
            if rng is None:
                raise ValueError("rng is required to initialise a new model")
            params.add("gmf_user", rng.normal(0.0, EMBEDDING_STD, (num_users, self.gmf_dim)))
            params.add("gmf_item", rng.normal(0.0, EMBEDDING_STD, (num_items, self.gmf_dim)))
            params.add("mlp_user", rng.normal(0.0, EMBEDDING_STD, (num_users, self.mlp_emb_dim)))
            params.add("mlp_item", rng.normal(0.0, EMBEDDING_STD, (num_items, self.mlp_emb_dim)))
            fan_in = 2 * self.mlp_emb_dim
            for l, width in enumerate(self.widths):
                params.add(f"mlp_w{l}", glorot_uniform(rng, fan_in, width))
                params.add(f"mlp_b{l}", np.zeros(width))
                fan_in = width
            params.add("out_w", glorot_uniform(rng, dim, 1, shape=(dim,)))
        for name in self.tensor_names:
            if name not in params:
                raise ConfigError(f"NeuMF tensor {name!r} missing from the parameter store")
        if params["out_w"].shape != (dim,):
            raise ConfigError("NeuMF output weight does not match the declared width")

    @property
    def tensor_names(self) -> List[str]:
        names = ["gmf_user", "gmf_item", "mlp_user", "mlp_item"]
        for l in range(self.n_layers):
            names += [f"mlp_w{l}", f"mlp_b{l}"]
        return names + ["out_w"]

    @property
    def tap_sides(self) -> Tuple[str, ...]:
        return ("joint",) if self.tap == "joint" else ("user", "item")

    def tap_width(self, side: str) -> int:
        return self.dim if side == "joint" else self.gmf_dim + self.mlp_emb_dim

    def _hidden(self, users: np.ndarray, items: np.ndarray):
        p = self.params
        pg = p["gmf_user"][users]
        qg = p["gmf_item"][items]
        z = np.concatenate([p["mlp_user"][users], p["mlp_item"][items]], axis=1)
        acts, pre = [z], []
        for l in range(self.n_layers):
            a = z @ p[f"mlp_w{l}"] + p[f"mlp_b{l}"]
            z = np.maximum(a, 0.0)
            pre.append(a)
            acts.append(z)
        h = np.concatenate([pg * qg, z], axis=1)
        return h, {"users": users, "items": items, "pg": pg, "qg": qg, "acts": acts, "pre": pre, "h": h}

    def forward(self, users: np.ndarray, items: np.ndarray):
        h, cache = self._hidden(users, items)
        return h @ self.params["out_w"], cache

    def backward(self, cache, dlogits: np.ndarray) -> None:
        self.params.grad("out_w")[...] += cache["h"].T @ dlogits
        self._backprop_hidden(cache, np.outer(dlogits, self.params["out_w"]))

    def _backprop_hidden(self, cache, dh: np.ndarray) -> None:
        p = self.params
        g = self.gmf_dim
        users, items = cache["users"], cache["items"]
        dgmf = dh[:, :g]
        np.add.at(p.grad("gmf_user"), users, dgmf * cache["qg"])
        np.add.at(p.grad("gmf_item"), items, dgmf * cache["pg"])
        dz = dh[:, g:]
        for l in reversed(range(self.n_layers)):
            da = dz * (cache["pre"][l] > 0)
            p.grad(f"mlp_w{l}")[...] += cache["acts"][l].T @ da
            p.grad(f"mlp_b{l}")[...] += da.sum(axis=0)
            dz = da @ p[f"mlp_w{l}"].T
        e = self.mlp_emb_dim
        np.add.at(p.grad("mlp_user"), users, dz[:, :e])
        np.add.at(p.grad("mlp_item"), items, dz[:, e:])

    def score_matrix(self, users: np.ndarray, items: Optional[np.ndarray] = None) -> np.ndarray:
        users = np.asarray(users)
        if items is None:
            items = np.broadcast_to(np.arange(self.num_items), (len(users), self.num_items))
        flat_users = np.repeat(users, items.shape[1])
        flat_items = np.asarray(items).reshape(-1)
        out = np.empty(len(flat_items))
        for start in range(0, len(flat_items), SCORE_CHUNK):
            stop = start + SCORE_CHUNK
            h, _ = self._hidden(flat_users[start:stop], flat_items[start:stop])
            out[start:stop] = h @ self.params["out_w"]
        return out.reshape(items.shape)

    def taps(self, users: np.ndarray, items: np.ndarray) -> List[TapBatch]:
        if self.tap == "joint":
            h, cache = self._hidden(users, items)
            return [TapBatch("joint", np.arange(len(users)), h, users=users, items=items, cache=cache)]
        p = self.params
        user_ids = np.unique(users)
        item_ids = np.unique(items)
        return [
            TapBatch("user", user_ids, np.concatenate([p["gmf_user"][user_ids], p["mlp_user"][user_ids]], axis=1)),
            TapBatch("item", item_ids, np.concatenate([p["gmf_item"][item_ids], p["mlp_item"][item_ids]], axis=1)),
        ]

    def backprop_tap(self, tap: TapBatch, grad: np.ndarray) -> None:
        if tap.side == "joint":
            self._backprop_hidden(tap.cache, grad)
            return
        g = self.gmf_dim
        np.add.at(self.params.grad(f"gmf_{tap.side}"), tap.keys, grad[:, :g])
        np.add.at(self.params.grad(f"mlp_{tap.side}"), tap.keys, grad[:, g:])

    def l2_penalty(self, users: np.ndarray, items_list: Iterable[np.ndarray], n: int, weight: float = 1.0) -> float:
        if self.l2 == 0.0:
            return 0.0
        total = 0.0
        for name in ("gmf_user", "mlp_user"):
            total += _l2_rows(self.params, name, users, self.l2 / n, weight)
        for items in items_list:
            for name in ("gmf_item", "mlp_item"):
                total += _l2_rows(self.params, name, items, self.l2 / n, weight)
        return total


Recommender = Union[BprModel, NeumfModel]


def _l2_rows(params: ParamStore, name: str, ids: np.ndarray, scale: float, weight: float) -> float:
    rows = params[name][ids]
    np.add.at(params.grad(name), ids, (weight * scale) * rows)
    return 0.5 * scale * float(np.sum(rows * rows))


def build_model(cfg: ModelConfig, params: ParamStore, num_users: int, num_items: int,
                rng: Optional[np.random.Generator] = None, dim: Optional[int] = None) -> Recommender:
    """Create (or attach to existing tensors) a BPR or NeuMF model of width ``dim``."""
    dim = cfg.dim if dim is None else dim
    if cfg.base_model == "bpr":
        return BprModel(params, num_users, num_items, dim, l2=cfg.l2, rng=rng)
    if cfg.base_model == "neumf":
        return NeumfModel(params, num_users, num_items, dim, n_layers=cfg.neumf_layers,
                          tap=cfg.neumf_tap, l2=cfg.l2, rng=rng)
    raise ConfigError(f"unknown base model {cfg.base_model!r}")


def bpr_loss(model: Recommender, users: np.ndarray, pos: np.ndarray, neg: np.ndarray,
             weight: float = 1.0) -> float:
    """
    Pairwise BPR loss: mean of -log sigmoid(score(u,i+) - score(u,i-)) plus L2.

    Gradients (scaled by ``weight``) are accumulated into the model's store.
    """
    n = len(users)
    pos_logits, pos_cache = model.forward(users, pos)
    neg_logits, neg_cache = model.forward(users, neg)
    diff = pos_logits - neg_logits
    loss = float(np.mean(np.logaddexp(0.0, -diff)))
    ddiff = -expit(-diff) * (weight / n)
    model.backward(pos_cache, ddiff)
    model.backward(neg_cache, -ddiff)
    return loss + model.l2_penalty(users, (pos, neg), n, weight)


def neumf_bce_loss(model: Recommender, users: np.ndarray, items: np.ndarray, labels: np.ndarray,
                   weight: float = 1.0) -> float:
    """
    Point-wise binary cross-entropy on sigmoid(logit), logits clamped to [-40, 40].
    """
    n = len(users)
    labels = np.asarray(labels, dtype=np.float64)
    logits, cache = model.forward(users, items)
    x = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    loss = float(np.mean(np.logaddexp(0.0, x) - labels * x))
    dx = (expit(x) - labels) * (weight / n)
    dx = np.where(np.abs(logits) < LOGIT_CLAMP, dx, 0.0)
    model.backward(cache, dx)
    return loss + model.l2_penalty(users, (items,), n, weight)


def rank_items(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidates by descending score, ties by ascending item id."""
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order]


def full_ranking(model: Recommender, user: int, exclude: Iterable[int] = ()) -> np.ndarray:
    """Every non-excluded item for ``user`` ranked by descending score."""
    scores = model.score_matrix(np.array([user]))[0]
    keep = np.ones(model.num_items, dtype=bool)
    excluded = np.fromiter(exclude, dtype=np.int64)
    keep[excluded] = False
    return rank_items(scores, np.flatnonzero(keep))


def param_count(model: Recommender) -> int:
    """Exact number of learnable scalars of the recommender (distillation heads excluded)."""
    return model.params.num_params(model.tensor_names)
