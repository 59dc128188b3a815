"""Ad-stream audit and demographic reconstruction pipeline."""

__version__ = "0.1.0"
