"""Tensor-Train multimodal fusion of game, webcam and audio streams."""
