"""
shred-sensing package.
"""
