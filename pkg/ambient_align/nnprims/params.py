"""
Named parameter tensors with matching gradient buffers.
"""

from typing import Dict, Iterator, List, Optional

import numpy as np


class ParamSet:
    """Map of unique parameter names to arrays, each with a gradient buffer.

    Arrays are updated in place by the optimizer and EMA so that other holders
    of the same array (e.g. cluster centroids) see every update.
    """

    def __init__(self, params: Optional[Dict[str, np.ndarray]] = None):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        """Register a parameter; the array is kept by reference."""
        if name in self.params:
            raise ValueError(f"Duplicate parameter name: {name}")
        if not isinstance(value, np.ndarray):
            raise TypeError(f"Parameter '{name}' must be a numpy array")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> List[str]:
        return list(self.params)

    def zero_grad(self):
        for grad in self.grads.values():
            grad.fill(0)

    def accumulate(self, name: str, grad: np.ndarray):
        """Add a gradient contribution to a parameter's buffer."""
        if grad.shape != self.params[name].shape:
            raise ValueError(f"Gradient for '{name}' has shape {grad.shape}, "
                             f"expected {self.params[name].shape}")
        self.grads[name] += grad.astype(self.grads[name].dtype, copy=False)

    def copy(self) -> "ParamSet":
        """Deep copy of parameters; gradients start at zero."""
        return ParamSet({name: value.copy() for name, value in self.params.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({name: value.astype(dtype) for name, value in self.params.items()})

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy arrays into existing parameters in place.

        Returns the names that were missing from ``arrays``.
        """
        missing = []
        for name, value in self.params.items():
            if name not in arrays:
                missing.append(name)
                continue
            source = np.asarray(arrays[name])
            if source.shape != value.shape:
                raise ValueError(f"Shape mismatch for '{name}': file has {source.shape}, "
                                 f"model expects {value.shape}")
            value[...] = source
        if strict and missing:
            raise KeyError(f"Missing parameters: {', '.join(missing)}")
        return missing

    def num_elements(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def fingerprint(self) -> bytes:
        """Byte snapshot used to assert freeze contracts."""
        return b"".join(name.encode() + self.params[name].tobytes() for name in sorted(self.params))


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform in +-sqrt(1/fan_in)."""
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
