"""Summarization reference game on a synthetic grammar world.

A speaker model summarizes a passage, a frozen listener answers a question
from the summary alone, and the speaker is trained with PPO on the
communicative-success reward, optionally shaped by length- or
surprisal-based communication bottlenecks.
"""

__version__ = "0.1.0"
