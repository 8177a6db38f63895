"""
Utilities package for the query pipeline.
"""
