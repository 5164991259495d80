"""STC-ViT: continuous spatio-temporal attention for gridded forecasting."""

__version__ = "0.1.0"
