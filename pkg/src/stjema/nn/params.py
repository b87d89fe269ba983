"""Named parameter container with role tags."""
from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .autograd import Tensor

ROLES = (
    "encoder",
    "target",
    "decoder_node",
    "decoder_edge",
    "projection",
    "mask_token",
    "readout",
    "head",
    "feature_norm",
)


class ParamStore:
    """Ordered mapping ``name -> ndarray`` where every entry carries a role.

    The context encoder lives under ``enc.*`` with role ``encoder``; its EMA
    copy lives under ``tgt.*`` with role ``target`` and identical suffixes.
    """

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}
        self.roles: dict[str, str] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __len__(self) -> int:
        return len(self.arrays)

    def add(self, name: str, value: np.ndarray, role: str) -> None:
        if name in self.arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"non-finite values in {name!r}")
        self.arrays[name] = value
        self.roles[name] = role

    def names(self, roles: Iterable[str] | None = None) -> list[str]:
        if roles is None:
            return list(self.arrays)
        roles = set(roles)
        return [n for n in self.arrays if self.roles[n] in roles]

    def n_params(self, roles: Iterable[str] | None = None) -> int:
        return sum(self.arrays[n].size for n in self.names(roles))

    def leaves(self, trainable: Iterable[str] = ()) -> dict[str, Tensor]:
        """Wrap every array as a graph leaf; names in ``trainable`` record gradients."""
        trainable = set(trainable)
        return {n: Tensor(a, requires_grad=n in trainable, name=n) for n, a in self.arrays.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, a in self.arrays.items():
            out.arrays[n] = a.copy()
            out.roles[n] = self.roles[n]
        return out

    def update(self, values: Mapping[str, np.ndarray]) -> None:
        for n, v in values.items():
            if n not in self.arrays:
                raise KeyError(n)
            if v.shape != self.arrays[n].shape:
                raise ValueError(f"shape mismatch for {n!r}: {v.shape} vs {self.arrays[n].shape}")
            self.arrays[n] = np.array(v, dtype=np.float64)

    def shapes(self) -> dict[str, tuple]:
        return {n: a.shape for n, a in self.arrays.items()}

    def equal(self, other: "ParamStore") -> bool:
        if self.shapes() != other.shapes() or self.roles != other.roles:
            return False
        return all(np.array_equal(a, other.arrays[n]) for n, a in self.arrays.items())


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
