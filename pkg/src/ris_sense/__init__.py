"""RIS-assisted LOS/NLOS sensing: synthetic channel campaign, spectrogram
pipeline, and a from-scratch CNN classifier, all deterministic end to end."""

__version__ = "0.1.0"
