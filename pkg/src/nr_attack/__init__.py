"""Fast adversarial perturbation attacks on no-reference image-quality metrics."""

__version__ = "0.1.0"
