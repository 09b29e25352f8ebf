"""
Dictionary-based loss-term registry.
Trainers assemble their objectives from registered, individually switchable terms.
"""

from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import torch


class LossStage(str, Enum):
    """Optimization stages a term can contribute to."""

    PLANNER = "planner"
    COARSE = "coarse"
    REFINE = "refine"


LossContext = dict[str, Any]


@dataclass
class LossTerm:
    """Definition of one weighted loss term."""

    term_id: str
    name: str
    description: str
    stages: tuple[LossStage, ...]
    weight: float = 1.0
    fn: Callable[[LossContext], torch.Tensor] | None = None
    enabled: bool = True
    metadata: dict[str, Any] = field(default_factory=dict)


@dataclass
class LossBreakdown:
    """Total objective plus the weighted value of every term."""

    total: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        row = {"loss": float(self.total.detach())}
        row.update(self.terms)
        return row


class LossRegistry:
    """
    Registry for managing and evaluating loss terms.

    Terms are indexed by stage and can be enabled, disabled or reweighted
    at runtime; zero-weight terms are not evaluated.
    """

    def __init__(self) -> None:
        self._terms: dict[str, LossTerm] = {}
        self._stage_index: dict[LossStage, list[str]] = {stage: [] for stage in LossStage}

    def add_term(self, term: LossTerm) -> None:
        """Add a term; re-adding an id replaces the previous definition."""
        if term.term_id in self._terms:
            self.remove_term(term.term_id)
        self._terms[term.term_id] = term
        for stage in term.stages:
            self._stage_index[stage].append(term.term_id)

    def remove_term(self, term_id: str) -> bool:
        if term_id not in self._terms:
            return False
        term = self._terms.pop(term_id)
        for stage in term.stages:
            self._stage_index[stage].remove(term_id)
        return True

    def get_term(self, term_id: str) -> LossTerm | None:
        return self._terms.get(term_id)

    def find(self, name: str) -> LossTerm | None:
        """Look a term up by its short name."""
        return next((t for t in self._terms.values() if t.name == name), None)

    def get_terms_by_stage(self, stage: LossStage) -> list[LossTerm]:
        """Enabled terms for a stage, in registration order."""
        return [
            self._terms[term_id]
            for term_id in self._stage_index[stage]
            if self._terms[term_id].enabled
        ]

    def enable_term(self, term_id: str) -> bool:
        if term_id in self._terms:
            self._terms[term_id].enabled = True
            return True
        return False

    def disable_term(self, term_id: str) -> bool:
        if term_id in self._terms:
            self._terms[term_id].enabled = False
            return True
        return False

    def set_weight(self, name: str, weight: float) -> None:
        term = self.find(name)
        if term is None:
            raise KeyError(name)
        term.weight = weight

    def evaluate(self, stage: LossStage, context: LossContext) -> LossBreakdown:
        """
        Evaluate every enabled term of a stage.

        Args:
            stage: which objective to assemble
            context: tensors and settings the term functions read

        Returns:
            Weighted total and per-term weighted values
        """
        total: torch.Tensor | None = None
        values: dict[str, float] = {}
        for term in self.get_terms_by_stage(stage):
            if term.fn is None or term.weight == 0.0:
                values[term.name] = 0.0
                continue
            value = term.weight * term.fn(context)
            values[term.name] = float(value.detach())
            total = value if total is None else total + value
        if total is None:
            total = torch.zeros((), dtype=context.get("dtype", torch.float32))
        return LossBreakdown(total=total, terms=values)

    def list_terms(self) -> list[dict[str, Any]]:
        return [
            {
                "term_id": term.term_id,
                "name": term.name,
                "stages": [s.value for s in term.stages],
                "weight": term.weight,
                "enabled": term.enabled,
                "description": term.description,
            }
            for term in self._terms.values()
        ]
