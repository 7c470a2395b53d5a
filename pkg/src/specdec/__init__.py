"""Speculative greedy decoding with multi-head drafting and static
tree-attention verification, at desk scale."""

from .tree import TreeSpec, StaticTreeBuffers, compile_tree, validate_buffers, default_tree
from .model import ModelConfig, ModelBundle, KvCache, init_bundle, load_bundle, save_bundle
from .engine import generate_autoregressive, generate_speculative, StepOutcome
from .bench import RunMetrics, SweepConfig, measure_run, sweep, arithmetic_intensity

__all__ = [
    "TreeSpec", "StaticTreeBuffers", "compile_tree", "validate_buffers", "default_tree",
    "ModelConfig", "ModelBundle", "KvCache", "init_bundle", "load_bundle", "save_bundle",
    "generate_autoregressive", "generate_speculative", "StepOutcome",
    "RunMetrics", "SweepConfig", "measure_run", "sweep", "arithmetic_intensity",
]
