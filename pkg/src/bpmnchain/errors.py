"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class BpmnChainError(Exception):
    """Base class. ``code`` is the stable name printed by the CLI."""

    code = "Error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg != self.code else msg


def _make(name: str, base: type = BpmnChainError) -> type:
    return type(name, (base,), {"code": name})


class ValidationError(BpmnChainError):
    code = "ValidationError"


class RuntimeFailure(BpmnChainError):
    code = "RuntimeFailure"


# model input
XmlMalformed = _make("XmlMalformed", ValidationError)
UnsupportedElement = _make("UnsupportedElement", ValidationError)
DanglingFlow = _make("DanglingFlow", ValidationError)
MissingAnnotation = _make("MissingAnnotation", ValidationError)
UnmatchedBoundaryLabel = _make("UnmatchedBoundaryLabel", ValidationError)
LoopingConstructUnsupported = _make("LoopingConstructUnsupported", ValidationError)
GuardOverlap = _make("GuardOverlap", ValidationError)
GuardSyntaxError = _make("GuardSyntaxError", ValidationError)
CycleDetected = _make("CycleDetected", ValidationError)
PoolViolation = _make("PoolViolation", ValidationError)

# analysis
NotNormalized = _make("NotNormalized", ValidationError)
NotADag = _make("NotADag", ValidationError)
TooLarge = _make("TooLarge", ValidationError)
TheoremViolation = _make("TheoremViolation", BpmnChainError)

# model construction
NotLsi = _make("NotLsi", ValidationError)
GuardMissing = _make("GuardMissing", ValidationError)
InterconnectLoop = _make("InterconnectLoop", ValidationError)
OrphanSubmodel = _make("OrphanSubmodel", ValidationError)

# contract generation
UnknownSubgraph = _make("UnknownSubgraph", ValidationError)
IllegalNesting = _make("IllegalNesting", ValidationError)
OverlappingSelections = _make("OverlappingSelections", ValidationError)
IndependenceViolation = _make("IndependenceViolation", ValidationError)
NoSuchSidechain = _make("NoSuchSidechain", ValidationError)
MissingCalibrationEntry = _make("MissingCalibrationEntry", ValidationError)

# ledger
NoExecutionContext = _make("NoExecutionContext", RuntimeFailure)
NotFound = _make("NotFound", RuntimeFailure)
ExecutionFailed = _make("ExecutionFailed", RuntimeFailure)
HashMismatch = _make("HashMismatch", RuntimeFailure)
UnknownHash = _make("UnknownHash", RuntimeFailure)

# runtime
ChainMissing = _make("ChainMissing", ValidationError)
PackageCorrupt = _make("PackageCorrupt", ValidationError)
UnknownCall = _make("UnknownCall", RuntimeFailure)
AccessDenied = _make("AccessDenied", RuntimeFailure)
NonConforming = _make("NonConforming", RuntimeFailure)
NoEnabledBranch = _make("NoEnabledBranch", RuntimeFailure)
GuardEvaluationError = _make("GuardEvaluationError", RuntimeFailure)
TxNotActive = _make("TxNotActive", RuntimeFailure)
BridgeFailure = _make("BridgeFailure", RuntimeFailure)
MethodNotOnChain = _make("MethodNotOnChain", RuntimeFailure)
AttestationRejected = _make("AttestationRejected", RuntimeFailure)
ParticipantUnresponsive = _make("ParticipantUnresponsive", RuntimeFailure)
TransactionAborted = _make("TransactionAborted", RuntimeFailure)
InstanceFailed = _make("InstanceFailed", RuntimeFailure)
