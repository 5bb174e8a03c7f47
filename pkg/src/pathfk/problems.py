"""Built-in problems, several with closed-form value functionals.

Closed forms are checked against the PDE with the analytic residual when an
entry is registered, so a wrong formula fails at import time rather than
silently serving as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .derivatives import DerivativeConfig, horizontal_derivative, vertical_derivative
from .forward import ProblemSpec
from .functionals import PathFunctional, constant, last_value, running_integral, running_max
from .paths import Path

__all__ = ["ProblemRegistryEntry", "UnknownProblem", "get_problem", "register", "registry_builtin", "HORIZON", "RATE"]

HORIZON = 1.0
RATE = 0.1

# histories on which closed forms are checked at registration
_PROBE_PATHS = (
    Path([0.0], [1.0]),
    Path([0.0, 0.2, 0.5], [0.3, -0.4, 1.2]),
    Path([0.0, 0.1, 0.35, 0.7], [2.0, 1.5, 0.8, -0.6]),
)
_PROBE_DERIV = DerivativeConfig(vertical_step=1e-4, horizontal_step=1e-6)


class UnknownProblem(KeyError):
    pass


@dataclass(frozen=True)
class ProblemRegistryEntry:
    """A named problem; ``u``, ``d_x`` and ``d_t`` are optional closed forms."""

    name: str
    build: Callable[[], ProblemSpec]
    description: str
    u: PathFunctional | None = None
    d_x: PathFunctional | None = None
    d_t: PathFunctional | None = None

    @property
    def has_closed_form(self) -> bool:
        return self.u is not None

    def spec(self) -> ProblemSpec:
        return self.build()

    def verify_closed_form(self) -> None:
        """Analytic residual on the probe paths, plus agreement of the given derivatives."""
        if self.u is None:
            return
        from .verify import ppde_residual  # local import: verify depends on the solver stack

        spec = self.spec()
        for p in _PROBE_PATHS:
            rep = ppde_residual(spec, p, deriv=_PROBE_DERIV, analytic_u=self.u)
            if not rep.passed:
                raise AssertionError(f"closed form for {self.name!r} violates the PDE at {p!r}: residual {rep.statistic:.3e}")
            if self.d_x is not None:
                fd = np.atleast_1d(vertical_derivative(self.u, p, _PROBE_DERIV))
                if not np.allclose(fd, self.d_x(p), atol=1e-6):
                    raise AssertionError(f"closed-form D_x for {self.name!r} disagrees with finite differences")
            if self.d_t is not None:
                fd = horizontal_derivative(self.u, p, _PROBE_DERIV, horizon=spec.T)
                if not np.allclose(fd, self.d_t(p), atol=1e-6):
                    raise AssertionError(f"closed-form D_t for {self.name!r} disagrees with finite differences")


_REGISTRY: dict[str, ProblemRegistryEntry] = {}


def register(entry: ProblemRegistryEntry, verify: bool = True) -> ProblemRegistryEntry:
    if verify:
        entry.verify_closed_form()
    _REGISTRY[entry.name] = entry
    return entry


def get_problem(name: str) -> ProblemRegistryEntry:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownProblem(name) from None


def registry_builtin() -> list[ProblemRegistryEntry]:
    return list(_REGISTRY.values())


def _scalar(fn, name):
    return PathFunctional(fn, (1,), name)


def _brownian(g: PathFunctional, name: str, h=None) -> Callable[[], ProblemSpec]:
    def build():
        kw = {"h": h} if h is not None else {}
        return ProblemSpec(constant(0.0, (1,)), constant(1.0, (1, 1)), g, HORIZON, name=name, **kw)

    return build


def _discount_driver(t, x, y, z):
    return RATE * y


def _funcvol_sigma(pb):
    return 1.0 + 0.1 * np.sin(pb.last())


def _funcvol() -> ProblemSpec:
    sigma = PathFunctional(_funcvol_sigma, (1, 1), "1 + 0.1 sin(gamma(t))")
    return ProblemSpec(constant(0.0, (1,)), sigma, last_value(), HORIZON, name="funcvol")


register(
    ProblemRegistryEntry(
        "terminal",
        _brownian(last_value(), "terminal"),
        "Brownian state, g = gamma(T), no driver; u = gamma(t)",
        u=last_value(),
        d_x=constant(1.0, (1,)),
        d_t=constant(0.0, (1,)),
    )
)

register(
    ProblemRegistryEntry(
        "integral",
        _brownian(running_integral(), "integral"),
        "Brownian state, g = int_0^T gamma; u = int_0^t gamma + gamma(t)(T - t)",
        u=_scalar(lambda pb: pb.integral()[:, 0] + pb.last()[:, 0] * (HORIZON - pb.time), "int gamma + gamma(t)(T-t)"),
        d_x=_scalar(lambda pb: np.full(pb.size, HORIZON - pb.time), "T - t"),
        d_t=constant(0.0, (1,)),
    )
)

register(
    ProblemRegistryEntry(
        "discounted",
        _brownian(last_value(), "discounted", h=_discount_driver),
        f"Brownian state, g = gamma(T), driver h = {RATE:g} y; u = exp(-{RATE:g}(T - t)) gamma(t)",
        u=_scalar(lambda pb: np.exp(-RATE * (HORIZON - pb.time)) * pb.last()[:, 0], "exp(-r(T-t)) gamma(t)"),
        d_x=_scalar(lambda pb: np.full(pb.size, np.exp(-RATE * (HORIZON - pb.time))), "exp(-r(T-t))"),
        d_t=_scalar(lambda pb: RATE * np.exp(-RATE * (HORIZON - pb.time)) * pb.last()[:, 0], "r exp(-r(T-t)) gamma(t)"),
    )
)

register(
    ProblemRegistryEntry(
        "quadratic",
        _brownian(_scalar(lambda pb: pb.last()[:, 0] ** 2, "gamma(T)^2"), "quadratic"),
        "Brownian state, g = gamma(T)^2, no driver; u = gamma(t)^2 + (T - t)",
        u=_scalar(lambda pb: pb.last()[:, 0] ** 2 + (HORIZON - pb.time), "gamma(t)^2 + (T-t)"),
        d_x=_scalar(lambda pb: 2.0 * pb.last()[:, 0], "2 gamma(t)"),
        d_t=constant(-1.0, (1,)),
    )
)

register(
    ProblemRegistryEntry(
        "runmax",
        _brownian(running_max(), "runmax"),
        "Brownian state, g = running maximum of the path; Monte Carlo only",
    )
)

register(
    ProblemRegistryEntry(
        "funcvol",
        _funcvol,
        "volatility 1 + 0.1 sin(gamma(t)), g = gamma(T); Monte Carlo only",
    )
)
