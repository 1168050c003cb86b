"""Dense audio-visual event detection with local correspondence and adaptive windows."""
__version__ = "0.1.0"
