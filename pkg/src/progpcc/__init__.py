"""Progressive point cloud geometry codec.

One trained model produces one embedded bitstream; decoding any prefix that
ends on a channel-group boundary reconstructs the full point count at a
quality that grows with the number of groups kept.
"""

__version__ = "0.1.0"
