"""Exception hierarchy shared by every clicklab module."""


class ClickLabError(Exception):
    pass


class NotInRanking(ClickLabError, KeyError):
    def __init__(self, item):
        super().__init__(item)
        self.item = item

    def __str__(self):
        return f"item {self.item!r} is not in the ranking"


class DuplicateItem(ClickLabError, ValueError):
    pass


class MissingRelevance(ClickLabError, KeyError):
    def __init__(self, query, item):
        super().__init__((query, item))
        self.query = query
        self.item = item

    def __str__(self):
        return f"no relevance declared for query {self.query!r}, item {self.item!r}"


class DegenerateChoiceSet(ClickLabError, ZeroDivisionError):
    pass


class InsufficientPoints(ClickLabError, ValueError):
    pass


class ZeroPropensity(ClickLabError, ValueError):
    pass


class DegenerateCorrection(ClickLabError, ZeroDivisionError):
    pass


class EmptyLog(ClickLabError, ValueError):
    pass


class MissingContext(ClickLabError, KeyError):
    def __init__(self, key):
        super().__init__(key)
        self.key = key

    def __str__(self):
        return f"correction function has no entry for context {self.key!r}"


class NeverDisplayed(ClickLabError, ValueError):
    pass


class MissingEstimate(ClickLabError, KeyError):
    pass


class EmptyScenario(ClickLabError, ValueError):
    pass


class ModelCoverage(ClickLabError, ValueError):
    pass


class FitDiverged(ClickLabError, FloatingPointError):
    def __init__(self, iteration, message="non-finite loss"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class Inconsistent(ClickLabError, ValueError):
    def __init__(self, relation, message=None):
        super().__init__(message or f"inconsistent probabilities: {relation}")
        self.relation = relation


class NoConvergence(ClickLabError, RuntimeError):
    pass


class BoundaryRelevance(ClickLabError, ValueError):
    pass


class EmptyRank(ClickLabError, ValueError):
    pass


class ConfigError(ClickLabError, ValueError):
    """Scenario file problem; ``where`` names the line and/or field path."""

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)
