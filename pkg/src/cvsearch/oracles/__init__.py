from .base import (
    EXISTENCE_TEMPLATE,
    PARSE_TEMPLATE,
    SUFFICIENCY_TEMPLATE,
    ExpertProposal,
    OracleSuite,
    ProposalBox,
    TracedOracles,
    check_confidence,
    existence_prompt,
    instrument,
    sufficiency_prompt,
)
from .scripted import ScriptedOracles, by_region, constant, region_key
from .simulated import Distractor, SceneTarget, SimulatedOracles, SimulatedScene

__all__ = [
    "EXISTENCE_TEMPLATE",
    "PARSE_TEMPLATE",
    "SUFFICIENCY_TEMPLATE",
    "Distractor",
    "ExpertProposal",
    "OracleSuite",
    "ProposalBox",
    "SceneTarget",
    "ScriptedOracles",
    "SimulatedOracles",
    "SimulatedScene",
    "TracedOracles",
    "by_region",
    "check_confidence",
    "constant",
    "existence_prompt",
    "instrument",
    "region_key",
    "sufficiency_prompt",
]
