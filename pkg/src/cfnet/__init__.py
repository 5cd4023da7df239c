"""Learning-based subcarrier allocation and beamforming for cell-free MIMO downlinks."""

__version__ = "0.1.0"
