"""
gossipqcd: distributed Bayesian quickest change detection over gossip sensor networks
"""

__version__ = "0.1.0"
