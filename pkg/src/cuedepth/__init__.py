"""Cue-aware monocular depth estimation at desk scale.

Synthetic planar scenes provide ground-truth depth plus edge / normal /
layout cues with controllable noise; an uncertainty-gated fusion network
(V1 stem -> V2 integration -> V3 windowed attention with a key-value
working memory) decodes depth through adaptive bins and a guided-filter
upsampler. Everything differentiable runs on the tape engine in
``cuedepth.engine``.
"""

__version__ = "0.1.0"
