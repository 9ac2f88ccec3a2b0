"""
Test suite for densityfed
"""
