"""Multi-target cross-domain recommendation with neural node matching."""
__version__ = "0.1.0"
