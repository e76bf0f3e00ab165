from .conjugate import (gaussian_target_model, normal_invgamma_model,
                        normal_normal_model)
from .microcredit import (DEFAULT_PRIORS, MicrocreditData, MicrocreditParams,
                          build_microcredit_model, load_microcredit_csv,
                          save_microcredit_csv, simulate_microcredit)

__all__ = [
    "normal_normal_model", "normal_invgamma_model", "gaussian_target_model",
    "MicrocreditData", "MicrocreditParams", "DEFAULT_PRIORS",
    "build_microcredit_model", "simulate_microcredit",
    "load_microcredit_csv", "save_microcredit_csv",
]
