"""Grounded visual reasoning with hierarchical GRPO rollouts.

Trace protocol, box geometry, rewards, group-normalized policy optimization,
a synthetic grounded-VQA lab, a chat-endpoint rollout driver and reporting.
"""

__version__ = "0.1.0"
