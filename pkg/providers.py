"""
Instruction parser and instruction scorer providers.

The sampler talks to these through two small interfaces so an external
parser (an LLM, a rule engine) or scorer (a vision-language model) can be
registered under a new name and selected from configuration.
"""
import logging
import re
from typing import Callable, Dict, FrozenSet, List, Sequence, Tuple, Type

from errors import ConfigurationError

logger = logging.getLogger(__name__)

VIEWS: Tuple[str, ...] = ("front", "back", "left", "right")
ACTIONS: Tuple[str, ...] = ("raise-hand", "turn", "walk")

# Phrases are matched on lower-cased word sequences; punctuation and hyphens
# separate words, so "raise-hand" is matched as "raise hand".
VOCABULARY: Dict[str, Tuple[str, ...]] = {
    "front": ("front", "frontal"),
    "back": ("back", "backside"),
    "left": ("left",),
    "right": ("right",),
    "raise-hand": ("raise hand", "raise hands", "raising hand", "raising hands",
                   "raise arm", "raise arms", "hand up", "hands up"),
    "turn": ("turn", "turns", "turning", "turned"),
    "walk": ("walk", "walks", "walking"),
}


class InstructionParser:
    """Extracts target views and actions from free text."""

    name = "base"

    def parse(self, text: str) -> Tuple[List[str], List[str]]:
        raise NotImplementedError


class KeywordParser(InstructionParser):
    name = "keyword"

    def parse(self, text: str) -> Tuple[List[str], List[str]]:
        words = " " + " ".join(re.findall(r"[a-z]+", text.lower())) + " "
        found = [target for target, phrases in VOCABULARY.items()
                 if any(f" {phrase} " in words for phrase in phrases)]
        views = [t for t in VIEWS if t in found]
        actions = [t for t in ACTIONS if t in found]
        logger.debug(f"Parsed instruction {text!r}: views={views} actions={actions}")
        return views, actions


class InstructionScorer:
    """Scores how well a frame shows the requested targets, in [0, 1]."""

    name = "base"

    def score(self, labels: FrozenSet[str], targets: Sequence[str]) -> float:
        raise NotImplementedError


class LabelMatchScorer(InstructionScorer):
    """Fraction of targets present in the frame's ground-truth labels."""

    name = "labels"

    def score(self, labels: FrozenSet[str], targets: Sequence[str]) -> float:
        if not labels or not targets:
            return 0.0
        wanted = set(targets)
        return len(wanted & set(labels)) / len(wanted)


_PARSERS: Dict[str, Type[InstructionParser]] = {KeywordParser.name: KeywordParser}
_SCORERS: Dict[str, Type[InstructionScorer]] = {LabelMatchScorer.name: LabelMatchScorer}


def register_parser(name: str, factory: Callable[[], InstructionParser]):
    _PARSERS[name] = factory


def register_scorer(name: str, factory: Callable[[], InstructionScorer]):
    _SCORERS[name] = factory


def get_parser(name: str = "keyword") -> InstructionParser:
    try:
        return _PARSERS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown instruction parser {name!r}; known: {sorted(_PARSERS)}")


def get_scorer(name: str = "labels") -> InstructionScorer:
    try:
        return _SCORERS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown instruction scorer {name!r}; known: {sorted(_SCORERS)}")
