"""Collaborative decision tree learning over anatomized outsourced data."""
