"""
Core module for Viko Contact.
Contains the contact pipeline: imaging, tracking, shear, segmentation, slip and the grasp controller.
"""
