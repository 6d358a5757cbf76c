"""
heightmap-eds
Multimodal terrain perception: LiDAR + depth sensing to robot-centric heightmaps
"""
__version__ = "1.0.0"
