"""Omniscient Byzantine adversaries.

The adversary observes every vector the honest workers are about to
submit and forges the server-side aggregands of the malicious workers.
Attacks that deviate from an honest run (BF, LF, mimic) are defined
relative to shadow protocol state: malicious workers keep executing the
honest protocol on their own (possibly poisoned) data, and the crafted
submission is a transform of that shadow aggregand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import as_vector

DEFAULT_IPM_Z = 0.1
DEFAULT_ALIE_Z = 1.06


@dataclass(frozen=True)
class BitFlipping:
    """Each malicious worker submits the negation of its shadow aggregand."""


@dataclass(frozen=True)
class LabelFlipping:
    """Honest protocol on label-negated data; the shadow aggregand passes through."""


@dataclass(frozen=True)
class Mimic:
    """Malicious workers replay honest behavior of a chosen good group."""


@dataclass(frozen=True)
class InnerProductManipulation:
    z: float = DEFAULT_IPM_Z

    def __post_init__(self):
        if not self.z > 0:
            raise ValueError("IPM strength z must be positive")


@dataclass(frozen=True)
class ALittleIsEnough:
    z: float = DEFAULT_ALIE_Z


AttackKind = (BitFlipping | LabelFlipping | Mimic
              | InnerProductManipulation | ALittleIsEnough)


@dataclass
class AdversaryView:
    """Everything an omniscient adversary sees in one round.

    honest_aggregands: vectors the good workers will submit this round.
    honest_gradients: full-batch local gradients at the round's
        evaluation point, one per good worker.
    byz_aggregands: what each malicious worker would submit had it
        followed the protocol honestly on its own data.
    """

    honest_aggregands: Sequence[np.ndarray]
    honest_gradients: Sequence[np.ndarray]
    byz_aggregands: Sequence[np.ndarray]
    num_byz: int


def craft(attack: AttackKind, view: AdversaryView) -> list[np.ndarray]:
    """Build one forged aggregand per malicious worker."""
    if len(view.honest_aggregands) == 0:
        raise ValueError("adversary view has no honest aggregands")
    if isinstance(attack, BitFlipping):
        return [-as_vector(v) for v in view.byz_aggregands]
    if isinstance(attack, (LabelFlipping, Mimic)):
        # The poisoning lives in the shadow objective; submissions pass through.
        return [as_vector(v).copy() for v in view.byz_aggregands]
    if isinstance(attack, InnerProductManipulation):
        mean = np.mean(np.stack(view.honest_aggregands), axis=0)
        forged = -attack.z * mean
        return [forged.copy() for _ in range(view.num_byz)]
    if isinstance(attack, ALittleIsEnough):
        stack = np.stack(view.honest_aggregands)
        mu = stack.mean(axis=0)
        sigma = stack.std(axis=0)  # population std (divide by G)
        forged = mu - attack.z * sigma
        return [forged.copy() for _ in range(view.num_byz)]
    raise TypeError(f"unknown attack kind {attack!r}")
