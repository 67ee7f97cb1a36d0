"""Mask-based MVDR beamforming jointly trained with a CTC-CRF acoustic model."""

__version__ = "0.1.0"
