# -*- coding: utf-8 -*-
"""
Console reporting shared by every pipeline stage.

Diagnostics go to standard error; machine output is only ever written to files.
"""
import sys

RULE_WIDTH = 70

_verbose = True


def set_verbose(flag):
    """Enable or silence progress output (warnings and errors always print)"""
    global _verbose
    _verbose = bool(flag)


def is_verbose():
    return _verbose


def _emit(text):
    print(text, file=sys.stderr)


def section(title):
    """Print a stage banner"""
    if _verbose:
        _emit("\n" + "=" * RULE_WIDTH)
        _emit(title)
        _emit("=" * RULE_WIDTH)


def subsection(title):
    if _verbose:
        _emit(title)
        _emit("-" * RULE_WIDTH)


def step(message):
    if _verbose:
        _emit(message)


def ok(message):
    if _verbose:
        _emit(f"  [OK] {message}")


def warn(message):
    _emit(f"  [WARNING] {message}")


def error(message):
    _emit(f"  [ERROR] {message}")


def summary(title, rows):
    """Print a block of `name: value` rows under a banner"""
    if not _verbose:
        return
    section(title)
    for name, value in rows:
        _emit(f"{name}: {value}")
    _emit("=" * RULE_WIDTH)
