"""Monomial observable dictionaries with exact gradients.

A dictionary is an ordered list of exponent multi-indices; term ``i`` is
``prod_j x_j ** exponents[i, j]``. All evaluation routines accept a single
state of shape ``(n,)`` or a batch of shape ``(..., n)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Field = Callable[[np.ndarray], np.ndarray]


def monomials(x: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """``prod_j x_j ** exponents[i, j]`` for every row ``i``; shape ``(..., N)``.

    Elementwise in the leading axes, so batch size never changes the result.
    ``0 ** 0`` evaluates to 1.
    """
    return np.prod(np.power(x[..., None, :], exponents), axis=-1)


@dataclass(frozen=True, eq=False)
class MonomialDictionary:
    """Ordered set of monomials ``psi_1 .. psi_N`` without a constant term."""

    exponents: np.ndarray

    def __init__(self, exponents: Sequence[Sequence[int]] | np.ndarray):
        arr = np.asarray(exponents)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("dictionary needs at least one exponent vector of length >= 1")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError("exponents must be integers")
        arr = arr.astype(np.int64)
        if np.any(arr < 0):
            raise ValueError("exponents must be non-negative")
        if np.any(arr.sum(axis=1) == 0):
            raise ValueError("constant term forbidden: V(0) = 0 requires no all-zero exponent vector")
        if len({tuple(row) for row in arr}) != len(arr):
            raise ValueError("duplicate monomials in dictionary")
        arr.setflags(write=False)
        object.__setattr__(self, "exponents", arr)

    @property
    def dim(self) -> int:
        return self.exponents.shape[1]

    @property
    def size(self) -> int:
        return self.exponents.shape[0]

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, MonomialDictionary) and np.array_equal(self.exponents, other.exponents)

    def __hash__(self) -> int:
        return hash(self.exponents.tobytes())

    def __repr__(self) -> str:
        return f"MonomialDictionary({self.labels()})"

    def labels(self) -> list[str]:
        """Human-readable names such as ``'x1^2*x2'``."""
        out = []
        for row in self.exponents:
            parts = []
            for j, k in enumerate(row, start=1):
                if k == 1:
                    parts.append(f"x{j}")
                elif k > 1:
                    parts.append(f"x{j}^{k}")
            out.append("*".join(parts))
        return out

    def index(self, exponent: Sequence[int]) -> int:
        """Position of a monomial given by its exponent vector."""
        target = tuple(int(k) for k in exponent)
        for i, row in enumerate(self.exponents):
            if tuple(row) == target:
                return i
        raise KeyError(f"monomial {target} not in dictionary")

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"state must have trailing dimension {self.dim}, got shape {x.shape}")
        return x

    def _float_exponents(self) -> np.ndarray:
        E = self.__dict__.get("_fexp")
        if E is None:
            E = self.exponents.astype(float)
            object.__setattr__(self, "_fexp", E)
        return E

    def eval(self, x) -> np.ndarray:
        """Evaluate all monomials; returns shape ``(..., N)``."""
        x = self._check(x)
        return monomials(x, self._float_exponents())

    def eval_gradient(self, x) -> np.ndarray:
        """Exact gradients; returns shape ``(..., N, n)`` with row ``i`` = grad psi_i."""
        x = self._check(x)
        E, w = self._derivative_table()
        vals = monomials(x, E) * w  # (..., n*N), blocks ordered by derivative direction
        vals = vals.reshape(x.shape[:-1] + (self.dim, self.size))
        return np.swapaxes(vals, -1, -2)

    def _derivative_table(self):
        # row block d holds d/dx_d of every term: exponents with alpha_d lowered
        # (clipped at 0) and multiplier alpha_d
        table = self.__dict__.get("_dtable")
        if table is None:
            blocks, weights = [], []
            for d in range(self.dim):
                E = self.exponents.copy()
                E[:, d] = np.maximum(E[:, d] - 1, 0)
                blocks.append(E)
                weights.append(self.exponents[:, d])
            table = (np.concatenate(blocks).astype(float), np.concatenate(weights).astype(float))
            object.__setattr__(self, "_dtable", table)
        return table

    def gradient_combination(self, coefficients, x) -> np.ndarray:
        """``grad (c . Psi)(x)``; shape ``(..., n)``."""
        x = self._check(x)
        E, w = self._derivative_table()
        c = np.tile(np.asarray(coefficients, dtype=float), self.dim)
        vals = monomials(x, E) * (w * c)
        return np.sum(vals.reshape(x.shape[:-1] + (self.dim, self.size)), axis=-1)

    def directional_derivative(self, field: Field, x) -> np.ndarray:
        """Lie derivative ``field(x) . grad psi_i(x)`` for every term; shape ``(..., N)``."""
        x = self._check(x)
        fx = np.asarray(field(x), dtype=float)
        grad = self.eval_gradient(x)
        return _contract(grad, fx)


def _contract(grad: np.ndarray, vec: np.ndarray) -> np.ndarray:
    # elementwise multiply-add in a fixed order; avoids BLAS so results do not
    # depend on batch size
    out = grad[..., 0] * vec[..., None, 0]
    for d in range(1, grad.shape[-1]):
        out = out + grad[..., d] * vec[..., None, d]
    return out

