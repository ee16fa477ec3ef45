"""Desk-scale autoregressive multi-image diffusion.

Image sets are generated one causal block at a time: a tiny latent
denoiser attends preceding clean context through blockwise causal
image-set attention (paired-latent or external-feature keys), trained
with condition dropout and sampled with classifier-free guidance under
a bounded context window.
"""

from .kernels import backend_name, compiled_available

__version__ = "0.1.0"

__all__ = ["backend_name", "compiled_available", "__version__"]
