"""Python interface to the KV-cache sharing / selective distillation core."""

from ._core import (
    combined_loss_value,
    evaluate_checkpoint,
    generate_samples,
    injection_identity_gap,
    preset_json,
    preset_names,
    recovery_csv,
    run_stage,
    vocab_symbols,
)

__all__ = [
    "combined_loss_value",
    "evaluate_checkpoint",
    "generate_samples",
    "injection_identity_gap",
    "preset_json",
    "preset_names",
    "recovery_csv",
    "run_stage",
    "vocab_symbols",
]
