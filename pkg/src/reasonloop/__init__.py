"""Run image edits through a reasoner that plans the edit, reviews each result and asks for fixes."""

from .loop import SessionOutcome, cumulative_best, run_session, select_stopping_round
from .reasoner import Reasoner, load_templates, parse_conclusion
from .trace import TRACE_VERSION, parse_trace, serialize_trace
from .types import (
    Assessment,
    EditSession,
    ImageRef,
    Instruction,
    InstructionKind,
    LoopMode,
    LoopPolicy,
    ReflectionConclusion,
    ReflectionVariant,
    RoundRecord,
    SessionStatus,
    Tag,
    VIEScore,
)

__version__ = "0.1.0"
