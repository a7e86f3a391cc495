"""Functional model of a streamed, instruction-driven JPCG accelerator."""

from .controller import SolverConfig, SolverReport, run_jpcg
from .matrix_io import CsrMatrix, load_csr, parse_matrix_market
from .reference import jpcg_reference, spmv_reference
from .spmv import PrecisionScheme

__all__ = ["CsrMatrix", "PrecisionScheme", "SolverConfig", "SolverReport", "jpcg_reference",
           "load_csr", "parse_matrix_market", "run_jpcg", "spmv_reference"]
__version__ = "0.1.0"
