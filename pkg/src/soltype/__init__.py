"""Geometry of higher-rank Sol-type groups: box geodesics, curve surgery, experiments."""
