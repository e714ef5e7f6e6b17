from .run import Diagnostics, Model, run_pipeline
from .scenes import BackboneOutput, SceneSample, default_long_side, synth_scene, synthetic_backbone
from .weights import load_model, save_model, zero_head_model
