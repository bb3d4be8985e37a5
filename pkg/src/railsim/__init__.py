"""Flow-level simulator and rail scheduler for all-to-all traffic on rail-optimized fabrics."""

__version__ = "0.1.0"
