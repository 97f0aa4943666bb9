"""Sequential class-agnostic amodal segmentation with cumulative-guided
mask diffusion: synthetic layered scenes, occlusion ordering, DDPM core,
layer-ordered training and inference, and evaluation harnesses."""

__version__ = "0.1.0"
