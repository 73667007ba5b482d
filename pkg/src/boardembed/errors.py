"""Exception types raised across the package."""


class BoardEmbedError(Exception):
    """Base class for all package errors."""


class ShapeError(BoardEmbedError, ValueError):
    pass


class EmptyGraphError(BoardEmbedError, ValueError):
    pass


class NumericError(BoardEmbedError, ArithmeticError):
    pass


class DegenerateBatchError(BoardEmbedError, ValueError):
    pass


class LabelError(BoardEmbedError, ValueError):
    pass


class ConfigError(BoardEmbedError, ValueError):
    pass


class ParseError(BoardEmbedError, ValueError):
    pass


class MissingTemplateError(BoardEmbedError, KeyError):
    def __init__(self, categories):
        self.categories = sorted(categories)
        super().__init__(f"no template available for categories: {', '.join(self.categories)}")

    def __str__(self):
        return self.args[0]


class InfeasibleSplitError(BoardEmbedError, ValueError):
    pass
