"""
Services module for Viko Contact.
Contains clients for external processes such as the learned segmentation model.
"""
