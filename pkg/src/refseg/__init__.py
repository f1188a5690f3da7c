"""Desk-scale referring image/video segmentation.

A micro multimodal language model emits a special ``[SEG]`` token whose
hidden state, projected into prompt space, drives a mask decoder; a memory
module propagates keyframe masks to the rest of the video. Includes the
joint training recipe, DAVIS-style metrics, a synthetic shapes corpus, and
a three-stage auto-annotation pipeline.
"""

__version__ = "0.1.0"
