"""Hardware-aware design automation at desk scale: differentiable
architecture search, reinforcement-learned channel pruning and
mixed-precision quantization over simulated hardware."""

__version__ = "0.1.0"
