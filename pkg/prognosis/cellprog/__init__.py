"""
Battery health prognosis toolkit
"""

__version__ = "1.0.0"
