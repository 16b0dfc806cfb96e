"""Modified Euler and competitor schemes for rough SDEs driven by fBm."""

__version__ = "0.1.0"
