"""Transferability-weighted fine-tuning for registered image segmentation.

Modules, bottom-up: :mod:`autodiff` (tensors, tape, ops, Adam),
:mod:`segnet` (U-Net and checkpoints), :mod:`transferability` (LEEP and
per-pixel maps), :mod:`riskweight` (risk maps and weighted losses),
:mod:`dataio` (phantoms and rasters), :mod:`training` and :mod:`matrix`
(loops, evaluation, experiment runner) and :mod:`cli`.
"""

__version__ = "0.1.0"
