"""
Utility modules for the pipeline: validation, run state, logging and seeding
"""
