"""Exception hierarchy shared across the toolkit.

DataError covers everything wrong with user-supplied inputs (images,
manifests, labels, dumps); ModelError covers weight directories, bundles
and forward-pass contract violations. The CLI maps them to exit codes
2 and 3 respectively.
"""


class CorrsegError(Exception):
    pass


class DataError(CorrsegError):
    pass


class ModelError(CorrsegError):
    pass
