"""guardweave: guard-annotated workflow synthesis and self-recovering replay.

The package turns repeated executions of a parameterized web task into a
reusable workflow whose steps carry machine-checkable condition checks and
ranked fallback actions, then executes such workflows with bounded retries,
pause-for-guidance, and checkpointed resume.
"""

from __future__ import annotations

__version__ = "0.1.0"
