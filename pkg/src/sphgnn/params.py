"""Flat, path-addressable parameter store shared by both model families."""

from collections import OrderedDict

import numpy as np

from . import autodiff as ad


class ParamStore:
    """Ordered mapping of dotted path names to autodiff leaf Vars.

    Stable iteration order gives deterministic optimizer sweeps and lets
    checkpoints, gradients, and Adam state stay aligned by name.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._vars: OrderedDict[str, ad.Var] = OrderedDict()

    def add(self, name: str, array: np.ndarray) -> ad.Var:
        if name in self._vars:
            raise KeyError(f"duplicate parameter name {name!r}")
        v = ad.param(array, dtype=self.dtype)
        self._vars[name] = v
        return v

    def __getitem__(self, name: str) -> ad.Var:
        return self._vars[name]

    def __contains__(self, name: str) -> bool:
        return name in self._vars

    def __iter__(self):
        return iter(self._vars)

    def __len__(self):
        return len(self._vars)

    def names(self) -> list[str]:
        return list(self._vars)

    def items(self):
        return self._vars.items()

    @property
    def n_params(self) -> int:
        return sum(v.data.size for v in self._vars.values())

    def arrays(self) -> dict[str, np.ndarray]:
        """Copies of the current values, keyed by name."""
        return {k: v.data.copy() for k, v in self._vars.items()}

    def load(self, arrays: dict[str, np.ndarray]):
        """Replace values in place; names and shapes must match exactly."""
        if set(arrays) != set(self._vars):
            missing = set(self._vars) - set(arrays)
            extra = set(arrays) - set(self._vars)
            raise KeyError(f"parameter name mismatch: missing={missing} extra={extra}")
        for k, v in self._vars.items():
            a = np.asarray(arrays[k], dtype=self.dtype)
            if a.shape != v.data.shape:
                raise ValueError(f"shape mismatch for {k!r}: {a.shape} vs {v.data.shape}")
            v.data = a.copy()

    def gradients(self, tape: ad.Tape, loss: ad.Var) -> dict[str, np.ndarray]:
        """Backward sweep; parameters the loss never touched get exact zeros."""
        raw = tape.backward(loss)
        return {
            k: raw.get(id(v), np.zeros_like(v.data)) for k, v in self._vars.items()
        }
