"""
Viko Contact - Main Package
"""

__version__ = '1.0.0'
__author__ = 'Viko Contact Team'
