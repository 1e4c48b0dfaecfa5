"""repref: local-first evaluation of audio feature representations.

The pipeline, driven entirely by a TOML experiment plan, is:
deform audio -> extract features -> aggregate -> train probes -> metrics,
executed as a content-addressed DAG with caching and resumability, plus
tooling to turn the result store into tables and confusion reports.
"""

import logging

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())
