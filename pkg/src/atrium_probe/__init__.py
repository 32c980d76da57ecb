"""Left-atrium segmentation at desk scale: frozen ViT probing, CNN baselines,
few-shot experiment harness, and metric reporting."""

__version__ = "0.1.0"
