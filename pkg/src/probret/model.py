"""Two-tower encoder: MLP towers with L2-normalised output and bounded heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Layer",
    "TowerParams",
    "BoundedHead",
    "Vocabulary",
    "TwoTowerModel",
    "init_tower",
    "init_head",
    "init_model",
    "encode",
    "encode_query",
    "encode_item",
    "temperature",
    "score",
    "parse_tokens",
]

ACTIVATIONS = ("identity", "tanh")
TAU_FLOOR = 0.02
TAU_CEILING = 1.0
SHAPE_CAP = 50.0


@dataclass
class Layer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight must be [out, in] and bias [out]")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class TowerParams:
    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a tower needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError("layer shapes do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out


@dataclass
class BoundedHead:
    """Scalar head ``floor + (ceiling - floor) * sigmoid(w . v + b)``."""

    weight: np.ndarray
    bias: float = 0.0
    floor: float = TAU_FLOOR
    ceiling: float = TAU_CEILING

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float).reshape(())
        if not (0 < self.floor < self.ceiling):
            raise ValueError("need 0 < floor < ceiling")

    def arrays(self) -> List[np.ndarray]:
        return [self.weight, self.bias]


def init_tower(sizes: Sequence[int], activations: Sequence[str], rng) -> TowerParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every weight and bias."""
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(Layer(rng.uniform(-bound, bound, (fan_out, fan_in)),
                            rng.uniform(-bound, bound, fan_out), act))
    return TowerParams(layers)


def init_head(n: int, rng, floor=TAU_FLOOR, ceiling=TAU_CEILING) -> BoundedHead:
    bound = 1.0 / np.sqrt(n)
    return BoundedHead(rng.uniform(-bound, bound, n), 0.0, floor, ceiling)


def parse_tokens(text: str) -> Dict[str, float]:
    """Split a feature string into ``{token: weight}``.

    Tokens are whitespace separated; ``tok:0.5`` carries an explicit weight,
    a bare token counts 1. Repeated tokens accumulate.
    """
    out: Dict[str, float] = {}
    for tok in text.split():
        name, sep, w = tok.rpartition(":")
        if sep and name:
            try:
                weight = float(w)
            except ValueError:
                name, weight = tok, 1.0
        else:
            name, weight = tok, 1.0
        out[name] = out.get(name, 0.0) + weight
    return out


@dataclass
class Vocabulary:
    tokens: tuple

    def __post_init__(self):
        self.tokens = tuple(self.tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(parse_tokens(text))
        return cls(tuple(sorted(seen)))

    def __len__(self):
        return len(self.tokens)

    def featurize(self, texts) -> sp.csr_matrix:
        """Bag-of-tokens rows, L2-normalised; unknown tokens are dropped."""
        indptr, indices, data = [0], [], []
        for text in texts:
            bag = {self._index[t]: w for t, w in parse_tokens(text).items()
                   if t in self._index}
            cols = sorted(bag)
            vals = np.array([bag[c] for c in cols], dtype=float)
            norm = np.linalg.norm(vals)
            if norm > 0:
                vals = vals / norm
            indices += cols
            data += vals.tolist()
            indptr.append(len(indices))
        return sp.csr_matrix((np.asarray(data, dtype=float), np.asarray(indices, dtype=np.int64),
                              np.asarray(indptr, dtype=np.int64)), shape=(len(indptr) - 1, len(self)))


@dataclass
class TwoTowerModel:
    query_tower: TowerParams
    item_tower: TowerParams
    temperature_head: BoundedHead
    query_vocab: Vocabulary
    item_vocab: Vocabulary
    # extra bounded heads keyed by name, e.g. MLE shape parameters
    heads: Dict[str, BoundedHead] = field(default_factory=dict)

    def __post_init__(self):
        n = self.query_tower.output_dim
        if self.item_tower.output_dim != n:
            raise ValueError("towers must share the output dimension")
        for head in [self.temperature_head, *self.heads.values()]:
            if head.weight.shape != (n,):
                raise ValueError("head weight must match the embedding dimension")
        if self.query_tower.input_dim != len(self.query_vocab):
            raise ValueError("query tower input does not match its vocabulary")
        if self.item_tower.input_dim != len(self.item_vocab):
            raise ValueError("item tower input does not match its vocabulary")

    @property
    def dim(self) -> int:
        return self.query_tower.output_dim

    def encode_queries(self, texts) -> np.ndarray:
        return encode(self.query_tower, self.query_vocab.featurize(texts))

    def encode_items(self, texts, chunk: int = 8192) -> np.ndarray:
        texts = list(texts)
        parts = [encode(self.item_tower, self.item_vocab.featurize(texts[i:i + chunk]))
                 for i in range(0, len(texts), chunk)]
        return np.vstack(parts) if parts else np.zeros((0, self.dim))

    def temperatures(self, v_q: np.ndarray) -> np.ndarray:
        return temperature(self.temperature_head, v_q)

    def parameters(self) -> List[np.ndarray]:
        out = self.query_tower.arrays() + self.item_tower.arrays()
        out += self.temperature_head.arrays()
        for name in sorted(self.heads):
            out += self.heads[name].arrays()
        return out


def init_model(query_vocab: Vocabulary, item_vocab: Vocabulary, dim: int = 32,
               hidden: int = 64, seed: int = 0, extra_heads: Sequence[str] = ()) -> TwoTowerModel:
    """Two-layer (tanh, linear) towers and a temperature head, seeded."""
    rng = np.random.default_rng(seed)
    q = init_tower([len(query_vocab), hidden, dim], ["tanh", "identity"], rng)
    d = init_tower([len(item_vocab), hidden, dim], ["tanh", "identity"], rng)
    head = init_head(dim, rng)
    heads = {name: init_head(dim, rng, 1.0, SHAPE_CAP) for name in extra_heads}
    return TwoTowerModel(q, d, head, query_vocab, item_vocab, heads)


def _matmul_in(x, weight):
    if sp.issparse(x):
        return np.asarray((x @ weight.T))
    return x @ weight.T


def forward(params: TowerParams, x):
    """Return ``(unit_embeddings, cache)`` for a batch of input rows."""
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"feature length {x.shape[-1]} != tower input {params.input_dim}")
    acts = [x]
    h = x
    for layer in params.layers:
        h = _matmul_in(h, layer.weight) + layer.bias
        if layer.activation == "tanh":
            h = np.tanh(h)
        acts.append(h)
    norm = np.linalg.norm(h, axis=1, keepdims=True)
    norm = np.maximum(norm, 1e-300)
    y = h / norm
    return y, (acts, y, norm)


def backward(params: TowerParams, cache, grad_y) -> List[np.ndarray]:
    """Gradients for ``params.arrays()`` given dLoss/d(unit embedding)."""
    acts, y, norm = cache
    g = (grad_y - y * np.sum(y * grad_y, axis=1, keepdims=True)) / norm
    grads: List[np.ndarray] = []
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if layer.activation == "tanh":
            g = g * (1.0 - acts[i + 1] ** 2)
        inp = acts[i]
        if sp.issparse(inp):
            dw = np.asarray((inp.T @ g)).T
        else:
            dw = g.T @ inp
        grads = [dw, g.sum(axis=0)] + grads
        if i > 0:
            g = g @ layer.weight
    return grads


def encode(params: TowerParams, features) -> np.ndarray:
    """Unit-norm embedding(s); a 1-D feature vector gives a 1-D result."""
    single = not sp.issparse(features) and np.ndim(features) == 1
    x = np.atleast_2d(np.asarray(features, dtype=float)) if not sp.issparse(features) else features
    y, _ = forward(params, x)
    return y[0] if single else y


encode_query = encode
encode_item = encode


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def head_forward(head: BoundedHead, v):
    pre = np.asarray(v, dtype=float) @ head.weight + head.bias
    s = _sigmoid(pre)
    return head.floor + (head.ceiling - head.floor) * s, s


def head_backward(head: BoundedHead, v, s, grad_out):
    """Return ``(grad_weight, grad_bias, grad_v)``."""
    d_pre = grad_out * (head.ceiling - head.floor) * s * (1.0 - s)
    v = np.atleast_2d(v)
    return d_pre @ v, np.asarray(d_pre.sum()), d_pre[:, None] * head.weight[None, :]


def temperature(head: BoundedHead, v_q) -> np.ndarray:
    """Query temperature, strictly inside ``(floor, ceiling)`` for finite input."""
    out, _ = head_forward(head, v_q)
    return out


def score(v_q, v_d):
    """Cosine score of unit vectors (plain inner product)."""
    return np.asarray(v_q) @ np.asarray(v_d).T
