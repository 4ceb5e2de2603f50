"""Gaussian class activation mapping (G-CAME) explanations for object detectors."""
from .baselines import DRiseConfig, drise_explain, generate_random_masks, gradcam_explain
from .core import (ChannelWeighting, EmptyExplanationError, ExplanationError, GaussianMaskSpec,
                   GradientCapture, NoSignalError, SaliencyMap, combine_saliency,
                   compute_gradient_maps, compute_sigma, explain, explain_detections,
                   generate_gaussian_mask, locate_center, weight_feature_maps)
from .detector import (CaptureSession, Detection, DetectionFormatError, Detector,
                       ExplanationTarget, ImageInput, ModelKind, ScoreKind, TargetLayerSet,
                       forward_with_capture, load_detector, parse_detections, select_target_layers)
from .metrics import (EvalRecord, GroundTruthBox, MetricReport, PerturbationSpec,
                      aggregate_report, confidence_drop, energy_based_pg, information_drop,
                      is_tiny, pairwise_iou, pointing_game)
from .sanity import RandomizationPlan, randomize, sanity_suite
from .toy import ToySpec, build_toy_detector

__version__ = "0.1.0"
