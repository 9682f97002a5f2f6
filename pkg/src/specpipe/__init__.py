"""Speculative decoding with a parallel draft/verify pipeline, over synthetic model pairs."""

from .core import AllZero, Distribution, RunStats, SeededRng, TimingLedger, Vocab, normalize, sample, total_variation
from .models import (AlignmentSpec, MultimodalPrefix, NgramModel, ScriptedModel, autoregressive_generate,
                     load_scripted_pair, make_synthetic_pair, next_distribution)
from .specdec import (DraftZeroMass, VerifyOutcome, WindowConfig, accept_probability, measure_acceptance_ratio,
                      residual, vanilla_sd_generate, verify_window)
from .timing import TimingModel, load_presets, preset, select_window
from .pipeline import PipelineConfig, PipelineEngine, StartupOverflow, run_pipeline, stage1_prefill
from .trace import EventTrace, check_trace

__version__ = "0.1.0"
