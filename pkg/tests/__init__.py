"""
Tests for the Articulated Splat Engine.
"""
