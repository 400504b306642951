"""Domain-generalized 3D CNN experiments on synthetic two-domain MRI cohorts."""

__version__ = "0.1.0"
