"""Matching images with nonlinear intensity differences.

Keypoints come from phase congruency, patch pairs are scored by a small
2-channel convolutional network, and a random-sample consensus step keeps the
geometrically consistent matches.
"""
from .errors import InputError, PhaseMatchError, PipelineError
from .imaging import GrayImage, Patch, extract_patch, load_gray, save_gray, standardize
from .pc_detector import BankParams, Keypoint, PCMaps, build_bank, compute_pc_maps, detect, detect_keypoints
from .convnet import NetSpec, NetworkParams, TrainConfig, forward_two_channel, load_model, save_model, train
from .dataset import AlignedPair, Manifest, SampleRecord, SynthParams, Transform, build_dataset, synth_pair
from .matcher import DetectConfig, MatchResult, MatcherConfig, consensus_filter, match_pipeline

__version__ = "0.1.0"

__all__ = [
    "AlignedPair", "BankParams", "DetectConfig", "GrayImage", "InputError", "Keypoint", "Manifest",
    "MatchResult", "MatcherConfig", "NetSpec", "NetworkParams", "PCMaps", "Patch", "PhaseMatchError",
    "PipelineError", "SampleRecord", "SynthParams", "TrainConfig", "Transform", "build_bank",
    "build_dataset", "compute_pc_maps", "consensus_filter", "detect", "detect_keypoints",
    "extract_patch", "forward_two_channel", "load_gray", "load_model", "match_pipeline", "save_gray",
    "save_model", "standardize", "synth_pair", "train",
]
