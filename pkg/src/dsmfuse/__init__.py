"""dsmfuse: fuse stereo-derived depth maps into a single digital surface model.

The toolkit covers the full desk-scale pipeline: RPC sensor-model math with
bias compensation, stereo-pair gating and ranking, DSM-to-DSM least-squares
alignment, per-cell median and adaptive bilateral-weighted median fusion,
synthetic test scenes, and an evaluation CLI.
"""

__version__ = "0.1.0"
