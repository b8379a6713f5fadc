"""Sim-to-real transfer diagnostics.

Evaluates the closed-form bound on the virtual-to-real return gap and the
lower bound on real-world improvement from virtual training::

    E      = delta*(1 - c_tool) + alpha*d_kl + beta*(1 - phi_plan*r_result)
    gamma  = c_tool * phi_plan * kappa
    gain  >= gamma * delta_r_vrt - E

These are formula evaluators and property checks, not proofs. The scaling
factors (delta, alpha, beta) and the anchoring strength kappa are
environment-specific inputs with no estimation procedure; callers supply
them (the CLI defaults them to 1 and prints a caveat).
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import fmean
from typing import Mapping, Optional, Sequence


class BoundInputError(ValueError):
    """Raised when a bound input violates its range constraint."""


@dataclass(frozen=True)
class BoundInputs:
    c_tool: float  # tool capability, [0, 1]
    d_kl: float  # policy divergence vs the supervised prior, >= 0
    phi_plan: float  # plan sufficiency, [0, 1]
    r_result: float  # result reward level, [0, 1]
    delta: float = 1.0  # dynamics-gap scaling, >= 0
    alpha: float = 1.0  # action-bias scaling, >= 0
    beta: float = 1.0  # goal-alignment scaling, >= 0
    kappa: float = 1.0  # prior anchoring strength, (0, 1]
    delta_r_vrt: float = 0.0  # expected virtual-reward increment, >= 0

    def validate(self) -> None:
        for name in ("c_tool", "phi_plan", "r_result"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise BoundInputError(f"{name} must be in [0, 1], got {value}")
        for name in ("d_kl", "delta", "alpha", "beta", "delta_r_vrt"):
            value = getattr(self, name)
            if value < 0.0:
                raise BoundInputError(f"{name} must be >= 0, got {value}")
        if not 0.0 < self.kappa <= 1.0:
            raise BoundInputError(f"kappa must be in (0, 1], got {self.kappa}")

    def replace_c_tool(self, c_tool: float) -> "BoundInputs":
        return BoundInputs(
            c_tool=c_tool,
            d_kl=self.d_kl,
            phi_plan=self.phi_plan,
            r_result=self.r_result,
            delta=self.delta,
            alpha=self.alpha,
            beta=self.beta,
            kappa=self.kappa,
            delta_r_vrt=self.delta_r_vrt,
        )

    @classmethod
    def from_dict(cls, raw: Mapping) -> "BoundInputs":
        known = {
            "c_tool", "d_kl", "phi_plan", "r_result",
            "delta", "alpha", "beta", "kappa", "delta_r_vrt",
        }
        unknown = set(raw) - known
        if unknown:
            raise BoundInputError(f"unknown bound input fields: {sorted(unknown)}")
        missing = {"c_tool", "d_kl", "phi_plan", "r_result"} - set(raw)
        if missing:
            raise BoundInputError(f"missing bound input fields: {sorted(missing)}")
        inputs = cls(**{k: float(v) for k, v in raw.items()})
        inputs.validate()
        return inputs


@dataclass(frozen=True)
class BoundReport:
    dynamics_gap: float
    action_bias_bound: float
    goal_alignment_error: float
    error_bound: float
    gamma_coeff: float
    causal_improvement: float
    improvement_lower_bound: float
    positive_transfer: bool

    def to_dict(self) -> dict:
        return {
            "dynamics_gap": self.dynamics_gap,
            "action_bias_bound": self.action_bias_bound,
            "goal_alignment_error": self.goal_alignment_error,
            "error_bound": self.error_bound,
            "gamma_coeff": self.gamma_coeff,
            "causal_improvement": self.causal_improvement,
            "improvement_lower_bound": self.improvement_lower_bound,
            "positive_transfer": self.positive_transfer,
        }


def error_bound(inputs: BoundInputs) -> tuple[float, dict[str, float]]:
    """Total transfer-error bound and its three-term decomposition."""
    inputs.validate()
    dynamics_gap = inputs.delta * (1.0 - inputs.c_tool)
    action_bias = inputs.alpha * inputs.d_kl
    goal_alignment = inputs.beta * (1.0 - inputs.phi_plan * inputs.r_result)
    total = dynamics_gap + action_bias + goal_alignment
    return total, {
        "dynamics_gap": dynamics_gap,
        "action_bias_bound": action_bias,
        "goal_alignment_error": goal_alignment,
    }


def improvement_lower_bound(inputs: BoundInputs) -> BoundReport:
    """Causal-improvement-vs-transfer-loss report.

    ``positive_transfer`` holds exactly when the causal improvement covers
    the error bound.
    """
    total, terms = error_bound(inputs)
    gamma = inputs.c_tool * inputs.phi_plan * inputs.kappa
    causal = gamma * inputs.delta_r_vrt
    return BoundReport(
        dynamics_gap=terms["dynamics_gap"],
        action_bias_bound=terms["action_bias_bound"],
        goal_alignment_error=terms["goal_alignment_error"],
        error_bound=total,
        gamma_coeff=gamma,
        causal_improvement=causal,
        improvement_lower_bound=causal - total,
        positive_transfer=causal >= total,
    )


def monotonicity_scan(
    inputs: BoundInputs, grid: Optional[Sequence[float]] = None
) -> list[tuple[float, float]]:
    """Improvement lower bound along an ascending tool-capability grid.

    The bound's derivative in the capability knob is
    ``phi_plan*kappa*delta_r_vrt + delta >= 0``, so the returned sequence is
    non-decreasing.
    """
    if grid is None:
        grid = [i / 10.0 for i in range(11)]
    values = list(grid)
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise BoundInputError("grid values must lie in [0, 1]")
    if any(b < a for a, b in zip(values, values[1:])):
        raise BoundInputError("grid must be ascending")
    return [
        (c, improvement_lower_bound(inputs.replace_c_tool(c)).improvement_lower_bound)
        for c in values
    ]


def aggregate_kl(per_step_divergences: Sequence[float]) -> float:
    """Scalar divergence for the bound: the mean of per-step values."""
    if not per_step_divergences:
        raise ValueError("aggregate_kl requires at least one divergence value")
    if any(v < 0 for v in per_step_divergences):
        raise BoundInputError("divergences must be >= 0")
    return fmean(per_step_divergences)
