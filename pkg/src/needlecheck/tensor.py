"""Dense multilinear forms on R^n and the slot operators used by the adjoint equations.

Array conventions used throughout the package:

* a scalar-valued d-linear form is an array whose trailing ``d`` axes have
  length ``n``; any leading axes are batch axes (time nodes, paths, spikes);
* a vector-valued h-linear map (a derivative such as ``b_xx``) is an array
  whose trailing ``h + 1`` axes are ``(codomain, slot_1, ..., slot_h)``.

Slots are numbered from 1, counted among the trailing axes.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "TensorShapeError",
    "MultilinearForm",
    "TensorProcess",
    "apply_form",
    "apply_map",
    "slot_sum",
    "pair_sum",
    "pair_sum_mixed",
    "contract_slot",
    "contract_two_slots",
    "compose_slot",
    "compose_two_slots",
    "pair_codomain",
    "contract_at",
    "contract_two_at",
    "compose_at",
    "compose_two_at",
    "ItoInstance",
    "random_ito_instance",
    "multilinear_ito_residual",
    "ito_convergence",
]

_LETTERS = string.ascii_letters


class TensorShapeError(ValueError):
    """Raised on slot-range, arity or dimension mismatches."""


def _check_slot(slot: int, arity: int) -> None:
    if not 1 <= slot <= arity:
        raise TensorShapeError(f"slot {slot} out of range for arity {arity}")


# ---------------------------------------------------------------------------
# array-level kernels (batch aware)
# ---------------------------------------------------------------------------


def _contract_last(arr: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Contract the last axis of ``arr`` with the vector(s) ``y``.

    ``y`` has shape ``batch + (n,)``; its batch axes are aligned with the
    leading axes of ``arr``.
    """
    extra = arr.ndim - y.ndim
    if extra < 0:
        # y carries more batch axes than arr; broadcast arr up front
        arr = arr.reshape((1,) * (-extra) + arr.shape)
        extra = 0
    y = y.reshape(y.shape[:-1] + (1,) * extra + y.shape[-1:])
    if arr.shape[-1] == 1:
        return arr[..., 0] * y[..., 0]
    return np.einsum("...i,...i->...", arr, y)


def contract_slot(arr: np.ndarray, y: np.ndarray, slot: int, arity: int) -> np.ndarray:
    """Fix slot ``slot`` of a (batched) ``arity``-form to ``y``."""
    _check_slot(slot, arity)
    arr = np.asarray(arr)
    y = np.asarray(y)
    if arr.shape[-1] != y.shape[-1]:
        raise TensorShapeError(f"dim mismatch {arr.shape[-1]} vs {y.shape[-1]}")
    axis = arr.ndim - arity + slot - 1
    return _contract_last(np.moveaxis(arr, axis, -1), y)


def contract_two_slots(
    arr: np.ndarray, y: np.ndarray, z: np.ndarray, i: int, j: int, arity: int
) -> np.ndarray:
    """Fix slot ``i`` to ``y`` and slot ``j`` to ``z``; other slots keep their order."""
    if i == j:
        raise TensorShapeError("contract_two_slots needs distinct slots")
    _check_slot(i, arity)
    _check_slot(j, arity)
    if i > j:
        return contract_slot(contract_slot(arr, y, i, arity), z, j, arity - 1)
    return contract_slot(contract_slot(arr, z, j, arity), y, i, arity - 1)


def apply_form(arr: np.ndarray, vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Evaluate the last ``len(vectors)`` slots of ``arr`` at ``vectors`` (in order)."""
    out = np.asarray(arr)
    for v in reversed(vectors):
        out = _contract_last(out, np.asarray(v))
    return out


# a vector-valued map is evaluated by the same kernel: its codomain axis is left over
apply_map = apply_form


def slot_sum(arr: np.ndarray, x: np.ndarray, w: np.ndarray, arity: int) -> np.ndarray:
    """Sum over k of arr(x, .., w at slot k, .., x)."""
    total = 0.0
    for k in range(arity):
        vecs = [x] * arity
        vecs[k] = w
        total = total + apply_form(arr, vecs)
    return total


def pair_sum(arr: np.ndarray, x: np.ndarray, w: np.ndarray, arity: int) -> np.ndarray:
    """Sum over k < l of arr(x, .., w at k, .., w at l, .., x)."""
    return pair_sum_mixed(arr, x, w, w, arity)


def pair_sum_mixed(
    arr: np.ndarray, x: np.ndarray, w1: np.ndarray, w2: np.ndarray, arity: int
) -> np.ndarray:
    """Sum over k < l of arr with w1 at slot k, w2 at slot l and x elsewhere."""
    total = 0.0
    for k, l in combinations(range(arity), 2):
        vecs = [x] * arity
        vecs[k] = w1
        vecs[l] = w2
        total = total + apply_form(arr, vecs)
    return total


def compose_slot(
    arr: np.ndarray, gamma: np.ndarray, slot: int, arity: int, gamma_arity: int = 1
) -> np.ndarray:
    """Precompose slot ``slot`` of an ``arity``-form with an h-linear map.

    The result has arity ``arity + gamma_arity - 1``; the h arguments of
    ``gamma`` take the place of slot ``slot``.
    """
    _check_slot(slot, arity)
    arr = np.asarray(arr)
    gamma = np.asarray(gamma)
    if arr.shape[-1] != gamma.shape[-1]:
        raise TensorShapeError(f"dim mismatch {arr.shape[-1]} vs {gamma.shape[-1]}")
    form_idx = _LETTERS[:arity]
    hidx = _LETTERS[arity : arity + gamma_arity]
    a = form_idx[slot - 1]
    out_idx = form_idx[: slot - 1] + hidx + form_idx[slot:]
    spec = f"...{form_idx},...{a}{hidx}->...{out_idx}"
    return np.einsum(spec, arr, gamma)


def compose_two_slots(
    arr: np.ndarray,
    gamma: np.ndarray,
    theta: np.ndarray,
    i: int,
    j: int,
    arity: int,
    gamma_arity: int = 1,
    theta_arity: int = 1,
) -> np.ndarray:
    """Precompose slot ``i`` with ``gamma`` and slot ``j`` with ``theta``.

    Arguments of the two maps are laid out in slot order, so for ``i > j``
    the arguments of ``theta`` come first.
    """
    if i == j:
        raise TensorShapeError("compose_two_slots needs distinct slots")
    _check_slot(i, arity)
    _check_slot(j, arity)
    if i < j:
        inner = compose_slot(arr, theta, j, arity, theta_arity)
        return compose_slot(inner, gamma, i, arity + theta_arity - 1, gamma_arity)
    inner = compose_slot(arr, gamma, i, arity, gamma_arity)
    return compose_slot(inner, theta, j, arity + gamma_arity - 1, theta_arity)


def pair_codomain(p: np.ndarray, tensor: np.ndarray) -> np.ndarray:
    """<p, T> over the codomain axis of a vector-valued map T with trailing (n, n^h)."""
    p = np.asarray(p)
    tensor = np.asarray(tensor)
    h = tensor.ndim - p.ndim
    return _contract_last(np.moveaxis(tensor, -h - 1, -1), p) if h > 0 else (tensor * p).sum(-1)


# ---------------------------------------------------------------------------
# value type
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultilinearForm:
    """A d-linear real form on R^n stored densely, ``coefficients[j1..jd] = Λ(e_j1..e_jd)``."""

    coefficients: np.ndarray

    def __post_init__(self) -> None:
        c = np.array(self.coefficients, dtype=float)
        if c.ndim < 1 or c.ndim > 4:
            raise TensorShapeError(f"arity must be in 1..4, got {c.ndim}")
        if len(set(c.shape)) != 1:
            raise TensorShapeError(f"all slots need the same dimension, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @property
    def arity(self) -> int:
        return self.coefficients.ndim

    @property
    def dim(self) -> int:
        return self.coefficients.shape[0]

    @classmethod
    def zeros(cls, arity: int, dim: int) -> "MultilinearForm":
        return cls(np.zeros((dim,) * arity))

    def __call__(self, *vectors: np.ndarray) -> float:
        if len(vectors) != self.arity:
            raise TensorShapeError(f"expected {self.arity} arguments, got {len(vectors)}")
        for v in vectors:
            if np.shape(v)[-1] != self.dim:
                raise TensorShapeError("argument dimension mismatch")
        return apply_form(self.coefficients, vectors)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.coefficients**2)))

    def to_dict(self) -> dict:
        return {
            "arity": self.arity,
            "dim": self.dim,
            "coefficients": self.coefficients.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MultilinearForm":
        shape = (int(data["dim"]),) * int(data["arity"])
        return cls(np.asarray(data["coefficients"], dtype=float).reshape(shape))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_csv(self) -> str:
        """Flat layout: header row ``arity,dim`` then one coefficient per line (C order)."""
        lines = ["arity,dim", f"{self.arity},{self.dim}", "coefficient"]
        lines += [repr(float(c)) for c in self.coefficients.ravel()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "MultilinearForm":
        rows = [r for r in text.strip().splitlines()]
        arity, dim = (int(v) for v in rows[1].split(","))
        values = np.array([float(r) for r in rows[3:]])
        return cls(values.reshape((dim,) * arity))


def _as_map(gamma) -> tuple[np.ndarray, int]:
    g = np.asarray(gamma, dtype=float)
    if g.ndim < 2:
        raise TensorShapeError("a map needs a codomain axis and at least one slot")
    return g, g.ndim - 1


def contract_at(form: MultilinearForm, y: np.ndarray, i: int):
    """Λ•_i y. Returns a float when the result has arity 0."""
    out = contract_slot(form.coefficients, np.asarray(y, dtype=float), i, form.arity)
    return float(out) if out.ndim == 0 else MultilinearForm(out)


def contract_two_at(form: MultilinearForm, y: np.ndarray, z: np.ndarray, i: int, j: int):
    """Λ•_{i,j}(y, z)."""
    out = contract_two_slots(
        form.coefficients, np.asarray(y, dtype=float), np.asarray(z, dtype=float), i, j, form.arity
    )
    return float(out) if out.ndim == 0 else MultilinearForm(out)


def compose_at(form: MultilinearForm, gamma, i: int) -> MultilinearForm:
    """Λ∘_i Γ for a matrix (linear) or an h-linear R^n-valued map Γ."""
    g, h = _as_map(gamma)
    return MultilinearForm(compose_slot(form.coefficients, g, i, form.arity, h))


def compose_two_at(form: MultilinearForm, gamma, theta, i: int, j: int) -> MultilinearForm:
    """Λ∘_{i,j}(Γ, Θ)."""
    g, h = _as_map(gamma)
    th, l = _as_map(theta)
    return MultilinearForm(compose_two_slots(form.coefficients, g, th, i, j, form.arity, h, l))


@dataclass
class TensorProcess:
    """Grid-sampled tensor values: ``values`` has shape (N+1, [M,] n, ..., n)."""

    times: np.ndarray
    values: np.ndarray
    arity: int

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.times.shape[0]:
            raise TensorShapeError("one value per grid node required")
        tail = self.values.shape[self.values.ndim - self.arity :]
        if len(set(tail)) > 1:
            raise TensorShapeError(f"inconsistent slot dimensions {tail}")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def at(self, i: int) -> np.ndarray:
        return self.values[i]

    @property
    def per_path(self) -> bool:
        return self.values.ndim - 1 > self.arity


# ---------------------------------------------------------------------------
# multilinear Ito formula
# ---------------------------------------------------------------------------


@dataclass
class ItoInstance:
    """P(t) = P0 + ∫A dt + ∫B dW and x(t) = x0 + ∫f dt + ∫g dW on [0, T].

    ``A`` and ``B`` map a time to a d-form array; ``f`` and ``g`` map
    ``(t, x)`` with ``x`` of shape (M, n) to arrays of shape (M, n).
    """

    arity: int
    dim: int
    P0: np.ndarray
    A: Callable[[float], np.ndarray]
    B: Callable[[float], np.ndarray]
    f: Callable[[float, np.ndarray], np.ndarray]
    g: Callable[[float, np.ndarray], np.ndarray]
    x0: np.ndarray
    horizon: float = 1.0

    def __post_init__(self) -> None:
        self.P0 = np.asarray(self.P0, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.P0.shape != (self.dim,) * self.arity:
            raise TensorShapeError(f"P0 shape {self.P0.shape} does not match arity/dim")
        if self.x0.shape != (self.dim,):
            raise TensorShapeError("x0 dimension mismatch")


def random_ito_instance(arity: int, dim: int, rng: np.random.Generator) -> ItoInstance:
    """A random instance with smooth time-dependent A, B and affine f, g."""
    shape = (dim,) * arity
    P0 = rng.standard_normal(shape)
    A0, A1 = rng.standard_normal(shape), rng.standard_normal(shape)
    B0, B1 = rng.standard_normal(shape), rng.standard_normal(shape)
    F0, G0 = rng.standard_normal(dim), rng.standard_normal(dim)
    F1 = 0.5 * rng.standard_normal((dim, dim))
    G1 = 0.5 * rng.standard_normal((dim, dim))
    return ItoInstance(
        arity=arity,
        dim=dim,
        P0=P0,
        A=lambda t: A0 * np.cos(t) + A1,
        B=lambda t: B0 * np.sin(2.0 * t) + B1,
        f=lambda t, x: F0 + x @ F1.T,
        g=lambda t, x: G0 * np.cos(t) + x @ G1.T,
        x0=rng.standard_normal(dim),
    )


def multilinear_ito_residual(instance: ItoInstance, dW: np.ndarray) -> np.ndarray:
    """Per-path residual LHS - RHS of the multilinear Ito formula on the grid of ``dW``.

    ``dW`` has shape (M, N). Integrands are taken at the left end of each cell.
    """
    dW = np.asarray(dW, dtype=float)
    M, N = dW.shape
    dt = instance.horizon / N
    d = instance.arity
    x = np.broadcast_to(instance.x0, (M, instance.dim)).copy()
    P = np.broadcast_to(instance.P0, (M,) + instance.P0.shape).copy()
    lhs0 = apply_form(P, [x] * d)
    rhs = np.zeros(M)
    for i in range(N):
        t = i * dt
        A = np.asarray(instance.A(t), dtype=float)[None]
        B = np.asarray(instance.B(t), dtype=float)[None]
        f = instance.f(t, x)
        g = instance.g(t, x)
        dw = dW[:, i]
        drift = slot_sum(P, x, f, d) + apply_form(A, [x] * d) + slot_sum(B, x, g, d)
        if d >= 2:
            drift = drift + pair_sum(P, x, g, d)
        vol = apply_form(B, [x] * d) + slot_sum(P, x, g, d)
        rhs += drift * dt + vol * dw
        x = x + f * dt + g * dw[:, None]
        P = P + A * dt + B * dw.reshape((M,) + (1,) * d)
    lhs = apply_form(P, [x] * d) - lhs0
    return lhs - rhs


def ito_convergence(
    instance: ItoInstance,
    levels: Sequence[int] = (6, 7, 8, 9, 10),
    paths: int = 2000,
    seed: int = 0,
) -> dict:
    """Mean absolute residual over nested grids N = 2**level driven by one Brownian sample.

    Coarse increments are sums of fine ones, so every level sees the same paths.
    """
    levels = sorted(levels)
    finest = 2 ** levels[-1]
    rng = np.random.default_rng(seed)
    dW_fine = rng.standard_normal((paths, finest)) * np.sqrt(instance.horizon / finest)
    steps, means, errors = [], [], []
    for level in levels:
        N = 2**level
        dW = dW_fine.reshape(paths, N, finest // N).sum(axis=2)
        res = np.abs(multilinear_ito_residual(instance, dW))
        steps.append(N)
        means.append(float(res.mean()))
        errors.append(float(res.std(ddof=1) / np.sqrt(paths)))
    dts = instance.horizon / np.asarray(steps, dtype=float)
    positive = np.asarray(means) > 0
    slope = float("nan")
    if positive.sum() >= 2:
        slope = float(np.polyfit(np.log(dts[positive]), np.log(np.asarray(means)[positive]), 1)[0])
    return {"steps": steps, "mean_abs_residual": means, "std_error": errors, "slope": slope}
