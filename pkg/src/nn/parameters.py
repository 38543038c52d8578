"""Named parameter sets."""

import hashlib
from typing import Dict, Iterable, Iterator, Mapping, Optional, Tuple

import numpy as np

from src.core.autodiff import Node, leaf
from src.core.exceptions import StateError

Bound = Dict[str, Node]


class ParameterSet:
    """An ordered mapping from parameter name to float64 array.

    Names are dotted paths (``encoder.layers.0.attn.query.weight``); the same
    names are used by the online and target sets and by checkpoints.
    """

    def __init__(self, tensors: Optional[Mapping[str, np.ndarray]] = None):
        self._tensors: Dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value) -> None:
        self._tensors[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> Tuple[str, ...]:
        return tuple(self._tensors)

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        return self._tensors.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: value.shape for name, value in self._tensors.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet({name: value.copy() for name, value in self._tensors.items()})

    def subset(self, prefixes: Iterable[str]) -> "ParameterSet":
        """Copy of the parameters whose names start with one of ``prefixes``."""
        prefixes = tuple(prefixes)
        return ParameterSet({name: value.copy() for name, value in self._tensors.items() if name.startswith(prefixes)})

    def without(self, prefixes: Iterable[str]) -> "ParameterSet":
        prefixes = tuple(prefixes)
        return ParameterSet(
            {name: value.copy() for name, value in self._tensors.items() if not name.startswith(prefixes)}
        )

    def merge(self, other: "ParameterSet") -> "ParameterSet":
        """Copy of self with every tensor of ``other`` added or replaced."""
        merged = self.copy()
        for name, value in other.items():
            merged[name] = value
        return merged

    def rename(self, old_prefix: str, new_prefix: str) -> "ParameterSet":
        return ParameterSet(
            {
                (new_prefix + name[len(old_prefix) :] if name.startswith(old_prefix) else name): value.copy()
                for name, value in self._tensors.items()
            }
        )

    def bind(self, requires_grad: bool = True) -> Bound:
        """Wrap every tensor in a graph leaf for one forward pass."""
        return {name: leaf(value, requires_grad=requires_grad, name=name) for name, value in self._tensors.items()}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for value in self._tensors.values())

    def fingerprint(self) -> str:
        """SHA-256 over names, shapes and raw little-endian values."""
        digest = hashlib.sha256()
        for name in sorted(self._tensors):
            value = self._tensors[name]
            digest.update(name.encode("utf-8"))
            digest.update(str(value.shape).encode("utf-8"))
            digest.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return digest.hexdigest()

    def check_aligned(self, other: "ParameterSet") -> None:
        """Raise ``StateError`` unless ``other`` has this set's names and shapes."""
        mine, theirs = self.shapes(), other.shapes()
        if mine.keys() != theirs.keys():
            missing = sorted(set(mine) ^ set(theirs))
            raise StateError(f"parameter names differ: {missing[:5]}")
        mismatched = [name for name in mine if mine[name] != theirs[name]]
        if mismatched:
            name = mismatched[0]
            raise StateError(f"{name}: shape {mine[name]} vs {theirs[name]}")


class ParameterBuilder:
    """Initialises parameters from a seeded numpy generator."""

    def __init__(self, rng: np.random.Generator, scale: float = 0.02):
        self.rng = rng
        self.scale = scale
        self.params = ParameterSet()

    def normal(self, name: str, shape: Tuple[int, ...], scale: Optional[float] = None) -> None:
        self.params[name] = self.rng.normal(0.0, self.scale if scale is None else scale, size=shape)

    def zeros(self, name: str, shape: Tuple[int, ...]) -> None:
        self.params[name] = np.zeros(shape)

    def ones(self, name: str, shape: Tuple[int, ...]) -> None:
        self.params[name] = np.ones(shape)

    def linear(self, prefix: str, d_in: int, d_out: int, zero: bool = False) -> None:
        if zero:
            self.zeros(f"{prefix}.weight", (d_in, d_out))
        else:
            # fan-in scaling keeps small heads trainable at float64 precision
            self.normal(f"{prefix}.weight", (d_in, d_out), scale=max(self.scale, 1.0 / np.sqrt(d_in)))
        self.zeros(f"{prefix}.bias", (d_out,))

    def layer_norm(self, prefix: str, width: int) -> None:
        self.ones(f"{prefix}.gamma", (width,))
        self.zeros(f"{prefix}.beta", (width,))

    def mlp(self, prefix: str, d_in: int, d_hidden: int, d_out: int, zero_output: bool = False) -> None:
        self.linear(f"{prefix}.fc1", d_in, d_hidden)
        self.linear(f"{prefix}.fc2", d_hidden, d_out, zero=zero_output)

    def build(self) -> ParameterSet:
        return self.params


def gradients_of(bound: Bound) -> Dict[str, np.ndarray]:
    """Accumulated gradient per parameter name (zeros where nothing flowed)."""
    return {name: node.grad for name, node in bound.items()}
