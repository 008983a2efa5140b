"""Two-stage HDR video reconstruction from alternating-exposure LDR frames.

Stage I estimates adapter-refined optical flow, warps the neighbor frames
into the reference view, and fuses five HDR-domain frames with learned
weight maps. Stage II extracts LDR/HDR features, modulates the flow-aligned
neighbor features with a physically derived soft motion mask, and decodes a
residual refinement on top of the coarse result.
"""

__version__ = "0.1.0"
