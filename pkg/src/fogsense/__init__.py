"""Multi-modal freezing-of-gait characterization and detection."""

__version__ = "0.1.0"
