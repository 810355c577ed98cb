"""Execution of deployed contract packages on simulated chains."""

from .monitor import (DeEvent, Faults, Instance, StepReport, TraceResult, TwoPcOutcome, attest, bridge_call,
                      deploy, deploy_fresh, dump_trace, invoke_api, load_trace, run_2pc, run_trace, step, tx_begin,
                      tx_end, tx_read, tx_write)
from .oracle import Reject, TokenGame, enumerate_cases, generate_cases, mutate, random_walk
from .privacy import TxVisibility, attacker_view
from .workspace import Workspace

__all__ = [
    "DeEvent", "Faults", "Instance", "StepReport", "TraceResult", "TwoPcOutcome", "Workspace", "TxVisibility",
    "Reject", "TokenGame", "attest", "attacker_view", "bridge_call", "deploy", "deploy_fresh", "dump_trace",
    "enumerate_cases", "generate_cases", "invoke_api", "load_trace", "mutate", "random_walk", "run_2pc",
    "run_trace", "step", "tx_begin", "tx_end", "tx_read", "tx_write",
]
