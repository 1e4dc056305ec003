"""Error taxonomy shared across the package.

Three failure classes cover everything:

* ``ConfigError`` -- a run cannot even be set up (bad counts, rates out of
  range, malformed config files).  CLI maps these to exit code 2.
* ``InputError`` -- a well-configured component was handed inconsistent data
  (length mismatch, duplicate observation, empty batch).  CLI exit code 1.
* built-in ``IndexError`` -- out-of-range client/expert indices.
"""


class ConfigError(ValueError):
    """Invalid configuration: wrong counts, rates outside their ranges."""


class InputError(ValueError):
    """Structurally invalid input to an otherwise valid component."""
