"""Dynamical systems du/dt = f(u, s) and their time-averaged objectives.

Every callable accepts states with arbitrary leading (ensemble) axes, i.e.
``u.shape == (..., n)``.  Jacobian actions additionally accept a bundle of
directions stored as columns, ``w.shape == (..., n, k)``; columns are
processed independently with elementwise arithmetic only, so a bundle gives
bitwise the same result as ``k`` separate single-column calls.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import ConfigError, DimensionError


def _has_columns(u, w):
    if w.ndim == u.ndim + 1:
        return True
    if w.ndim == u.ndim:
        return False
    raise DimensionError(f"direction of shape {w.shape} incompatible with state {u.shape}")


class DynamicalSystem:
    """Base class for an autonomous system parametrised by a scalar ``s``.

    Subclasses are frozen dataclasses and implement :meth:`rhs`,
    :meth:`jacobian_apply`, :meth:`jacobian_transpose_apply` and :meth:`dfds`.
    """

    n: int
    s: float
    name = "system"
    description = ""

    def with_param(self, s):
        """Copy of the system with the parameter replaced."""
        return dataclasses.replace(self, s=float(s))

    def check_state(self, u):
        u = np.asarray(u, dtype=float)
        if u.ndim == 0 or u.shape[-1] != self.n:
            raise DimensionError(f"{self.name}: expected state of length {self.n}, got shape {u.shape}")
        return u

    def _check_pair(self, u, w):
        u = self.check_state(u)
        w = np.asarray(w, dtype=float)
        cols = _has_columns(u, w)
        axis = -2 if cols else -1
        if w.shape[axis] != self.n:
            raise DimensionError(f"{self.name}: expected direction of length {self.n}, got shape {w.shape}")
        return u, w, cols

    def rhs(self, u):
        raise NotImplementedError

    def jacobian_apply(self, u, v):
        raise NotImplementedError

    def jacobian_transpose_apply(self, u, w):
        raise NotImplementedError

    def dfds(self, u):
        raise NotImplementedError

    def sample_initial(self, rng, size=None):
        """Random initial condition(s) in a fixed box, shape ``(size, n)``."""
        raise NotImplementedError


@dataclass(frozen=True)
class Lorenz63(DynamicalSystem):
    """Lorenz 63 with the parameter acting as a shift of the z coordinate.

    f(u, s) = (sigma (y - x), x (rho - (z - s)) - y, x y - beta (z - s))
    """

    sigma: float = 10.0
    rho: float = 25.0
    beta: float = 8.0 / 3.0
    s: float = 0.0

    n = 3
    name = "lorenz63"
    description = "Lorenz 63 convection model with z-shift parameter"

    def rhs(self, u):
        u = self.check_state(u)
        x, y, z = u[..., 0], u[..., 1], u[..., 2] - self.s
        return np.stack(
            [self.sigma * (y - x), x * (self.rho - z) - y, x * y - self.beta * z], axis=-1
        )

    def _coords(self, u, cols):
        x, y, z = u[..., 0], u[..., 1], u[..., 2] - self.s
        if cols:
            x, y, z = x[..., None], y[..., None], z[..., None]
        return x, y, z

    def jacobian_apply(self, u, v):
        u, v, cols = self._check_pair(u, v)
        x, y, z = self._coords(u, cols)
        ax = -2 if cols else -1
        v0, v1, v2 = (np.take(v, j, axis=ax) for j in range(3))
        out = [
            self.sigma * (v1 - v0),
            (self.rho - z) * v0 - v1 - x * v2,
            y * v0 + x * v1 - self.beta * v2,
        ]
        return np.stack(out, axis=ax)

    def jacobian_transpose_apply(self, u, w):
        u, w, cols = self._check_pair(u, w)
        x, y, z = self._coords(u, cols)
        ax = -2 if cols else -1
        w0, w1, w2 = (np.take(w, j, axis=ax) for j in range(3))
        out = [
            -self.sigma * w0 + (self.rho - z) * w1 + y * w2,
            self.sigma * w0 - w1 + x * w2,
            -x * w1 - self.beta * w2,
        ]
        return np.stack(out, axis=ax)

    def dfds(self, u):
        u = self.check_state(u)
        x = u[..., 0]
        return np.stack([np.zeros_like(x), x, np.full_like(x, self.beta)], axis=-1)

    def sample_initial(self, rng, size=None):
        lo = np.array([-10.0, -10.0, 10.0])
        hi = np.array([10.0, 10.0, 40.0])
        shape = (3,) if size is None else (size, 3)
        return rng.uniform(lo, hi, size=shape)


@dataclass(frozen=True)
class KuramotoSivashinsky(DynamicalSystem):
    """Finite-difference Kuramoto-Sivashinsky on [0, L] with clamped ends.

    u_t = -(u + s) u_x - u_xx - u_xxxx,  u = u_x = 0 at x = 0 and x = L.

    The state holds the ``L/dx - 1`` interior nodes.  Second-order central
    differences are used throughout; the wall values are pinned to zero and
    the Neumann condition enters through the mirrored ghost node
    ``u_{-1} = u_1`` (and ``u_{n+2} = u_n`` at the right wall).  The
    nonlinear term is taken in conservative form, ``-(u^2)_x / 2 - s u_x``;
    the advective form ``-u u_x`` blows up on this grid.
    """

    L: float = 128.0
    dx: float = 1.0
    s: float = 0.0

    name = "ks"
    description = "Kuramoto-Sivashinsky, clamped ends, central differences"

    def __post_init__(self):
        cells = self.L / self.dx
        if self.L <= 0 or self.dx <= 0 or abs(cells - round(cells)) > 1e-9 * cells or round(cells) < 3:
            raise ConfigError(f"L/dx must be an integer >= 3, got L={self.L}, dx={self.dx}")

    @property
    def n(self):
        return int(round(self.L / self.dx)) - 1

    @property
    def x(self):
        """Interior node coordinates."""
        return self.dx * np.arange(1, self.n + 1)

    def _padded(self, u):
        # [u_{-1}, u_0, u_1, ..., u_n, u_{n+1}, u_{n+2}]
        zero = np.zeros_like(u[..., :1])
        return np.concatenate([u[..., :1], zero, u, zero, u[..., -1:]], axis=-1)

    def rhs(self, u):
        u = self.check_state(u)
        p = self._padded(u)
        dx = self.dx
        c, right, left = p[..., 2:-2], p[..., 3:-1], p[..., 1:-3]
        flux = (right * right - left * left) / (4 * dx)
        ux = (right - left) / (2 * dx)
        uxx = (right - 2 * c + left) / dx**2
        uxxxx = (p[..., 4:] - 4 * right + 6 * c - 4 * left + p[..., :-4]) / dx**4
        return -flux - self.s * ux - uxx - uxxxx

    def _linear_band(self):
        n, dx = self.n, self.dx
        d2, d4 = 1.0 / dx**2, 1.0 / dx**4
        main = np.full(n, 2 * d2 - 6 * d4)
        # mirrored ghost node folds onto the first/last interior node
        main[0] -= d4
        main[-1] -= d4
        return {
            -2: np.full(n, -d4),
            -1: np.full(n, -d2 + 4 * d4),
            0: main,
            1: np.full(n, -d2 + 4 * d4),
            2: np.full(n, -d4),
        }

    def jacobian_band(self, u):
        """Diagonals of f_u: ``band[k][..., i]`` multiplies ``v[i + k]`` in row ``i``."""
        u = self.check_state(u)
        band = self._linear_band()
        zero = np.zeros_like(u[..., :1])
        # row i depends on u_{i+1} and u_{i-1}; wall values are fixed at zero
        up = (np.concatenate([u[..., 1:], zero], axis=-1) + self.s) / (2 * self.dx)
        down = (np.concatenate([zero, u[..., :-1]], axis=-1) + self.s) / (2 * self.dx)
        band[1] = band[1] - up
        band[-1] = band[-1] + down
        return band

    def jacobian_apply(self, u, v):
        u, v, cols = self._check_pair(u, v)
        band = self.jacobian_band(u)
        if cols:
            band = {k: c[..., None] for k, c in band.items()}
            v = np.moveaxis(v, -1, 0)
            band = {k: np.moveaxis(c, -1, 0) for k, c in band.items()}
        n = self.n
        out = band[0] * v
        for k in (-2, -1, 1, 2):
            c = np.broadcast_to(band[k], out.shape)
            if k > 0:
                out[..., : n - k] += c[..., : n - k] * v[..., k:]
            else:
                out[..., -k:] += c[..., -k:] * v[..., : n + k]
        return np.moveaxis(out, 0, -1) if cols else out

    def jacobian_transpose_apply(self, u, w):
        u, w, cols = self._check_pair(u, w)
        band = self.jacobian_band(u)
        if cols:
            w = np.moveaxis(w, -1, 0)
            band = {k: np.moveaxis(c[..., None], -1, 0) for k, c in band.items()}
        n = self.n
        out = band[0] * w
        for k in (-2, -1, 1, 2):
            c = np.broadcast_to(band[k], out.shape)
            if k > 0:
                out[..., k:] += c[..., : n - k] * w[..., : n - k]
            else:
                out[..., : n + k] += c[..., -k:] * w[..., -k:]
        return np.moveaxis(out, 0, -1) if cols else out

    def dfds(self, u):
        u = self.check_state(u)
        zero = np.zeros_like(u[..., :1])
        nbr = np.concatenate([zero, u, zero], axis=-1)
        return -(nbr[..., 2:] - nbr[..., :-2]) / (2 * self.dx)

    def sample_initial(self, rng, size=None):
        shape = (self.n,) if size is None else (size, self.n)
        return rng.uniform(-0.5, 0.5, size=shape)


@dataclass(frozen=True, eq=False)
class LinearSystem(DynamicalSystem):
    """f(u, s) = A u + (1 + s) c.  Exactly integrable reference problem."""

    A: np.ndarray
    c: np.ndarray | None = None
    s: float = 0.0

    name = "linear"
    description = "constant-coefficient linear system"

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError("A must be square")
        c = np.zeros(A.shape[0]) if self.c is None else np.asarray(self.c, dtype=float)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)

    @property
    def n(self):
        return self.A.shape[0]

    def rhs(self, u):
        u = self.check_state(u)
        return u @ self.A.T + (1.0 + self.s) * self.c

    def _apply(self, M, w, cols):
        if cols:
            return np.einsum("ij,...jk->...ik", M, w)
        return w @ M.T

    def jacobian_apply(self, u, v):
        u, v, cols = self._check_pair(u, v)
        return self._apply(self.A, v, cols)

    def jacobian_transpose_apply(self, u, w):
        u, w, cols = self._check_pair(u, w)
        return self._apply(self.A.T, w, cols)

    def dfds(self, u):
        u = self.check_state(u)
        return np.broadcast_to(self.c, u.shape).copy()

    def sample_initial(self, rng, size=None):
        shape = (self.n,) if size is None else (size, self.n)
        return rng.uniform(-1.0, 1.0, size=shape)


@dataclass(frozen=True)
class Objective:
    """Instantaneous output J(u, s) with its state gradient and s-derivative."""

    value: Callable
    grad: Callable
    dparam: Callable
    name: str = "objective"


def linear_objective(g):
    """J = g^T u."""
    g = np.asarray(g, dtype=float)
    return Objective(
        value=lambda u: np.asarray(u) @ g,
        grad=lambda u: np.broadcast_to(g, np.shape(u)).copy(),
        dparam=lambda u: np.zeros(np.shape(u)[:-1]),
        name="linear",
    )


def lorenz_objective():
    """J = z."""
    unit = np.array([0.0, 0.0, 1.0])
    return Objective(
        value=lambda u: np.asarray(u)[..., 2].copy(),
        grad=lambda u: np.broadcast_to(unit, np.shape(u)).copy(),
        dparam=lambda u: np.zeros(np.shape(u)[:-1]),
        name="z",
    )


def ks_objective(grid):
    """Spatial mean (1/L) * int u dx, trapezoidal with zero wall values."""
    weights = np.full(grid.n, grid.dx / grid.L)
    return Objective(
        value=lambda u: np.asarray(u) @ weights,
        grad=lambda u: np.broadcast_to(weights, np.shape(u)).copy(),
        dparam=lambda u: np.zeros(np.shape(u)[:-1]),
        name="mean_u",
    )


SYSTEMS = {"lorenz63": Lorenz63, "ks": KuramotoSivashinsky}


def make_system(name, **params):
    try:
        cls = SYSTEMS[name]
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(params) - fields
    if unknown:
        raise ConfigError(f"unknown parameters for {name}: {sorted(unknown)}")
    return cls(**params)


def default_objective(system):
    if isinstance(system, Lorenz63):
        return lorenz_objective()
    if isinstance(system, KuramotoSivashinsky):
        return ks_objective(system)
    raise ConfigError(f"no default objective for {type(system).__name__}")
