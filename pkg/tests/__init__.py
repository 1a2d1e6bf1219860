"""
Test suite for Viko Contact.
"""
