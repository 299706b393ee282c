"""Binary-only WebAssembly hardening and greybox fuzzing toolkit."""

from .ir import (
    FuncType,
    FunctionIR,
    Instr,
    MalformedBinary,
    ModuleIR,
    UnsupportedFeature,
    WasmError,
)
from .parser import parse_module
from .encoder import encode_module
from .validate import validate_module
from .interp import (
    CrashClass,
    Engine,
    ExecOutcome,
    RunLimits,
    WasiConfig,
    classify_crash,
)

__all__ = [
    "FuncType",
    "FunctionIR",
    "Instr",
    "MalformedBinary",
    "ModuleIR",
    "UnsupportedFeature",
    "WasmError",
    "parse_module",
    "encode_module",
    "validate_module",
    "CrashClass",
    "Engine",
    "ExecOutcome",
    "RunLimits",
    "WasiConfig",
    "classify_crash",
]

__version__ = "0.1.0"
