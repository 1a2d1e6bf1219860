"""
Synthetic visuotactile sensor: scene geometry, rendering, scripted scenarios and datasets.
"""
