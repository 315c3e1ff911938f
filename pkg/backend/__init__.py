# Backend package: command line, run configuration, settings and storage

__version__ = "0.1.0"
