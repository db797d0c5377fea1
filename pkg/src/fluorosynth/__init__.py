"""DRR to flat-panel-detector image synthesis with a style-regularized CycleGAN."""
__version__ = "0.1.0"
