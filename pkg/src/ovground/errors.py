"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class InputError(ValueError):
    """A runtime input violates an operation's precondition."""


class AnnotationError(InputError):
    """A ground-truth annotation is unusable (e.g. zero-area target box)."""


class MatchingError(ValueError):
    """Query/target matching produced an empty or invalid positive set."""


class ManifestError(ValueError):
    """A dataset manifest failed to parse or validate.

    ``problems`` lists human-readable descriptions, each naming the offending
    record index and field where applicable.
    """

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems) if problems else []

    def __str__(self):
        base = super().__str__()
        if not self.problems:
            return base
        return base + "\n" + "\n".join("  - " + p for p in self.problems)
