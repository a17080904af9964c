"""
Experiment orchestration for teacher training and distillation runs.
"""
