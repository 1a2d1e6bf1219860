"""
Utilities module for Viko Contact.
Contains error handling, frame and export I/O, timing and the ordered worker pool.
"""
