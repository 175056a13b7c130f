"""Contrastive style finetuning with synthetic negatives on a toy diffusion model."""

__version__ = "0.1.0"
