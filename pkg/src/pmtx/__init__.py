"""Persistent-memory transactions with deferred cache-line flushing."""
from .allocator import Allocation, PoolKind, PoolSet, init_pools
from .checksum import correct, verify
from .emulator import CacheConfig, FlushCounters, NvmEmulator
from .errors import CrashInjected, PmtxError
from .recovery import RecoveryReport, classify_txns, recover
from .runtime import Mode, Runtime, TxnState, init
from .tracker import LocalityTracker
from .workload import WorkloadSpec, preset

__all__ = [
    "Allocation", "CacheConfig", "CrashInjected", "FlushCounters", "LocalityTracker", "Mode",
    "NvmEmulator", "PmtxError", "PoolKind", "PoolSet", "RecoveryReport", "Runtime", "TxnState",
    "WorkloadSpec", "classify_txns", "correct", "init", "init_pools", "preset", "recover", "verify",
]
__version__ = "0.1.0"
