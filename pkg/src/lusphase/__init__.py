"""Local-phase feature extraction and multi-scale fusion CNN for lung ultrasound
COVID-19 classification."""

__version__ = "0.1.0"
