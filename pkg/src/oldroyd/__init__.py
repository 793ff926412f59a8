"""Backward Euler / Taylor-Hood solver for the 2D Oldroyd fluid of order one."""
from .fem_core import MixedSpace, build_unit_square_mesh, VelocityField, PressureField
from .memory_kernel import KernelParams, MemoryState, memory_advance
from .cases import ForcingSpec, InitialDataSpec, ManufacturedCase
from .stepper import SimConfig, OldroydSolver, run

__all__ = [
    "MixedSpace", "build_unit_square_mesh", "VelocityField", "PressureField",
    "KernelParams", "MemoryState", "memory_advance",
    "ForcingSpec", "InitialDataSpec", "ManufacturedCase",
    "SimConfig", "OldroydSolver", "run",
]
__version__ = "0.1.0"
