"""
Closed-form problem data: the manufactured solution, the constant body
force used by the long-time experiments, and smooth / rough initial data.

All velocity callables take ``(x, y)`` (plus ``t`` for forcing) as numpy
arrays and return a pair ``(ux, uy)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PI = math.pi


@dataclass(frozen=True)
class ForcingSpec:
    kind: str = "zero"  # zero | constant | manufactured
    amplitude: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "manufactured"):
            raise ValueError(f"unknown forcing kind {self.kind!r}")


@dataclass(frozen=True)
class InitialDataSpec:
    kind: str = "zero"  # zero | smooth | rough | manufactured
    amplitude: float = 1.0
    modes: int = 0  # rough data: number of stream-function modes, 0 -> tied to mesh

    def __post_init__(self):
        if self.kind not in ("zero", "smooth", "rough", "manufactured"):
            raise ValueError(f"unknown initial data kind {self.kind!r}")


# ---------------------------------------------------------------------------
# stream function sin^2(pi x) sin^2(pi y)

def bubble_velocity(x, y):
    """curl of sin^2(pi x) sin^2(pi y): vanishes with its flux on the boundary."""
    sx, sy = np.sin(PI * x), np.sin(PI * y)
    return (PI * sx ** 2 * np.sin(2 * PI * y), -PI * np.sin(2 * PI * x) * sy ** 2)


def bubble_gradient(x, y):
    """((du1/dx, du1/dy), (du2/dx, du2/dy))."""
    s2x, s2y = np.sin(2 * PI * x), np.sin(2 * PI * y)
    c2x, c2y = np.cos(2 * PI * x), np.cos(2 * PI * y)
    sx2, sy2 = np.sin(PI * x) ** 2, np.sin(PI * y) ** 2
    u1x = PI * PI * s2x * s2y
    u1y = 2 * PI * PI * sx2 * c2y
    u2x = -2 * PI * PI * c2x * sy2
    u2y = -PI * PI * s2x * s2y
    return (u1x, u1y), (u2x, u2y)


def bubble_laplacian(x, y):
    s2x, s2y = np.sin(2 * PI * x), np.sin(2 * PI * y)
    c2x, c2y = np.cos(2 * PI * x), np.cos(2 * PI * y)
    sx2, sy2 = np.sin(PI * x) ** 2, np.sin(PI * y) ** 2
    lap1 = PI * (2 * PI ** 2 * c2x * s2y - 4 * PI ** 2 * sx2 * s2y)
    lap2 = -PI * (-4 * PI ** 2 * s2x * sy2 + 2 * PI ** 2 * s2x * c2y)
    return lap1, lap2


@dataclass(frozen=True)
class ManufacturedCase:
    """u = g(t) curl(sin^2 pi x sin^2 pi y), p = g(t) cos(pi x) cos(pi y) + shift.

    g(t) = exp(-rate t); the memory integral of g has the closed form
    G(t) = (e^{-rate t} - e^{-delta t}) / (delta - rate), or t e^{-delta t}
    in the confluent case delta = rate.
    """
    mu: float
    gamma: float
    delta: float
    rate: float = 1.0
    nonlinear: bool = True
    pressure_shift: float = 0.0

    def g(self, t):
        return math.exp(-self.rate * t)

    def dg(self, t):
        return -self.rate * math.exp(-self.rate * t)

    def memory_factor(self, t):
        """G(t) = int_0^t exp(-delta (t - s)) g(s) ds."""
        d = self.delta - self.rate
        if abs(d) < 1e-12:
            return t * math.exp(-self.delta * t)
        return (math.exp(-self.rate * t) - math.exp(-self.delta * t)) / d

    def velocity(self, x, y, t):
        u1, u2 = bubble_velocity(x, y)
        g = self.g(t)
        return g * u1, g * u2

    def initial_velocity(self, x, y):
        return self.velocity(x, y, 0.0)

    def velocity_gradient(self, x, y, t):
        (a, b), (c, d) = bubble_gradient(x, y)
        g = self.g(t)
        return (g * a, g * b), (g * c, g * d)

    def pressure(self, x, y, t):
        return self.g(t) * np.cos(PI * x) * np.cos(PI * y) + self.pressure_shift

    def forcing(self, x, y, t):
        g, dg = self.g(t), self.dg(t)
        mem = self.gamma * self.memory_factor(t)
        u1, u2 = bubble_velocity(x, y)
        l1, l2 = bubble_laplacian(x, y)
        px = -PI * np.sin(PI * x) * np.cos(PI * y)
        py = -PI * np.cos(PI * x) * np.sin(PI * y)
        f1 = dg * u1 - (self.mu * g + mem) * l1 + g * px
        f2 = dg * u2 - (self.mu * g + mem) * l2 + g * py
        if self.nonlinear:
            (a, b), (c, d) = bubble_gradient(x, y)
            f1 = f1 + g * g * (u1 * a + u2 * b)
            f2 = f2 + g * g * (u1 * c + u2 * d)
        return f1, f2


# ---------------------------------------------------------------------------
# body force and initial data for the long-time / nonsmooth experiments

def rotating_force(x, y):
    """Solid-body-rotation force (y - 1/2, 1/2 - x); L2 norm sqrt(1/6)."""
    return (y - 0.5) + 0.0 * x, (0.5 - x) + 0.0 * y


ROTATING_FORCE_L2 = math.sqrt(1.0 / 6.0)


def rough_modes(mesh_n):
    """Number of stream-function modes resolvable on an n x n mesh."""
    return max(1, mesh_n // 2)


def rough_velocity(modes, amplitude=1.0):
    """Divergence-free field in J_1 with growing discrete H^2 norm.

    Stream function sum_m c_m sin(pi x) sin(m pi x) sin(pi y) sin(m pi y)
    with c_m = m^{-7/2}: the velocity H^1 norms are summable while the H^2
    norms diverge logarithmically as modes are added.
    """
    def field(x, y):
        u1 = np.zeros(np.broadcast(x, y).shape)
        u2 = np.zeros_like(u1)
        s1x, c1x = np.sin(PI * x), np.cos(PI * x)
        s1y, c1y = np.sin(PI * y), np.cos(PI * y)
        for m in range(1, modes + 1):
            c = amplitude * m ** -3.5
            smx, cmx = np.sin(m * PI * x), np.cos(m * PI * x)
            smy, cmy = np.sin(m * PI * y), np.cos(m * PI * y)
            fx = s1x * smx
            fy = s1y * smy
            dfx = PI * (c1x * smx + m * s1x * cmx)
            dfy = PI * (c1y * smy + m * s1y * cmy)
            u1 += c * fx * dfy
            u2 -= c * dfx * fy
        return u1, u2
    return field


def resolve_forcing(spec, case=None):
    """Callable f(x, y, t) and whether it depends on time."""
    if spec.kind == "zero":
        return None, False
    if spec.kind == "constant":
        a = spec.amplitude

        def f(x, y, t):
            fx, fy = rotating_force(x, y)
            return a * fx, a * fy
        return f, False
    if case is None:
        raise ValueError("manufactured forcing needs a ManufacturedCase")
    return case.forcing, True


def resolve_initial(spec, mesh_n, case=None):
    if spec.kind == "zero":
        return None
    a = spec.amplitude
    if spec.kind == "smooth":
        return lambda x, y: tuple(a * c for c in bubble_velocity(x, y))
    if spec.kind == "rough":
        return rough_velocity(spec.modes or rough_modes(mesh_n), a)
    if case is None:
        raise ValueError("manufactured initial data needs a ManufacturedCase")
    return case.initial_velocity
