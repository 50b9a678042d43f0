"""AC optimal power flow task: case files, admittance, completion and its gradient."""
from .case import (AdmittanceModel, PowerCase, build_admittance, format_matpower_case, load_case,
                   parse_matpower_case)
from .family import AcopfFamily, CompletionTrace, acopf_backward, complete_acopf

__all__ = [
    "AcopfFamily", "AdmittanceModel", "CompletionTrace", "PowerCase", "acopf_backward",
    "build_admittance", "complete_acopf", "format_matpower_case", "load_case", "parse_matpower_case",
]
