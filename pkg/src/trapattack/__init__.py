"""Pattern-targeted data poisoning against LDP trajectory collection."""

__version__ = "0.1.0"
