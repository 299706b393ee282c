"""Binary rewriting passes (heap canaries, stack canaries, coverage)."""

from .coverage import apply_coverage_pass
from .heap_canary import HeapConfig, apply_heap_pass
from .sites import Site, SiteTable, collect_sites
from .stack_canary import CanaryConfig, apply_stack_pass

__all__ = [
    "apply_coverage_pass",
    "HeapConfig",
    "apply_heap_pass",
    "Site",
    "SiteTable",
    "collect_sites",
    "CanaryConfig",
    "apply_stack_pass",
]
