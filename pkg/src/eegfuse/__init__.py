"""eegfuse: 1D vs fused 2D spatiotemporal convolution study kit."""

__version__ = "0.1.0"
