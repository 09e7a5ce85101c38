"""Learned keypoint detection and description from image bursts."""

from .burstsynth import Burst, BurstPair, BurstSpec, FlowMap, compute_flow_map, make_burst_pair, synthesize_burst
from .extractor import ExtractParams, FeatureSet, extract_features
from .network import BurstNet, ModelConfig, forward, init_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
