"""Dual-branch audio-visual slide-video QA, desk scale.

Submodules:
    tensor     reverse-mode autodiff over numpy
    model      two-branch encoder, bottleneck compressor, decoder
    lora       low-rank adapters for the decoder
    alignment  contrastive audio-visual objective
    corpus     deterministic synthetic slide-video generator
    trainer    staged training with parameter freezing
    evaluate   thresholded semantic-similarity accuracy
    cli        command-line entry point
"""

__version__ = "0.1.0"
