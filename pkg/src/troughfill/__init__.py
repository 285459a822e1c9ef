"""Cost-minimizing scheduling of delay-tolerant jobs across internet data centers.

Modules: ``model`` (costs, constraints, queues), ``solver`` (per-slot convex
program), ``controllers`` (SSTF, QTF, BES, OSSI), ``sim`` (slot simulator and
metrics), ``traces`` (scenario construction) and ``cli`` (batch runner).
"""

__version__ = "0.1.0"
