"""Simulator for a zero-copy log-structured key-value store on RDMA and NVM.

The package models three write schemes over the same discrete-event RDMA
fabric and simulated persistent memory: the one-sided log-structured
scheme ("erda"), two-sided redo logging ("redo"), and read-after-write
ring buffers ("raw").  All runs are deterministic per seed.
"""

__version__ = "0.1.0"
