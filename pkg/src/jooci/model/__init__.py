from .config import ModelConfig
from .modules import Initializer, Module
from .network import (ForwardOutput, JoociModel, apply_mask,
                      conv_stack_output_length, count_parameters,
                      is_pretrain_only, min_waveform_length, parameter_table,
                      split_and_append)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__all__ = [
    "ModelConfig", "Initializer", "Module", "ForwardOutput", "JoociModel",
    "apply_mask", "conv_stack_output_length", "count_parameters",
    "is_pretrain_only", "min_waveform_length", "parameter_table",
    "split_and_append", "Checkpoint", "load_checkpoint", "save_checkpoint",
]
