"""Errors raised while reading metrics files."""


class PlotkitError(Exception):
    pass


class SchemaError(PlotkitError):
    """A CSV header differs from the documented schema."""


class DataError(PlotkitError):
    """A CSV parses but holds no usable rows."""
