"""Referring audio-visual video segmentation at desk scale.

A self-contained pipeline: synthetic moving-shapes benchmark generation,
multimodal fusion of text/audio/video into a learnable prompt token,
promptable first-frame segmentation with memory-bank video propagation,
end-to-end training on a minimal float64 autodiff engine, and J/F metric
reporting.
"""

from lavseg.estimator import ReferringVideoSegmenter

__all__ = ["ReferringVideoSegmenter"]
__version__ = "0.1.0"
