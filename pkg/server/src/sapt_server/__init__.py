"""Reference inference server for the text-generation wire protocol."""

__version__ = "0.1.0"
