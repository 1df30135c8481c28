# Utils package initialization
"""
File formats, seeding and reporting helpers for the evolq toolkit.
"""
