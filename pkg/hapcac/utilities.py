import csv
import fnmatch
import hashlib
import logging
import os
import re

LOG = logging.getLogger(__name__)

##
# Exceptions
##


class HapcacError(Exception):
    """Exception: base class for every codec failure"""

    pass


class FormatError(HapcacError):
    """Exception: malformed or unsupported input (PLY, bitstream, checkpoint)"""

    pass


class IntegrityError(HapcacError):
    """Exception: hash/checksum mismatch, decoder desync or lossless check failure"""

    pass


class ConfigError(HapcacError):
    """Exception: invalid settings or incompatible parameter combination"""

    pass


##
# Settings
##

# Every recognised settings key, with the types it may take.
SETTINGS_TYPES = {
    "n1": (int,),
    "growth": (int,),
    "max_unit_points": (int,),
    "max_context_points": (int,),
    "slice_size": (int,),
    "seed": (int,),
    "random_first": (bool,),
    "k": (int,),
    "k1": (int,),
    "k2": (int,),
    "feature_dim": (int,),
    "hidden_dim": (int,),
    "threads": (int,),
    "baseline": (bool,),
    "input_mode": (str,),
    "learning_rate": (float, int),
    "epochs": (int,),
    "batch_units": (int,),
    "log_level": (str,),
}

INPUT_MODES = ("residual", "raw")


def validate_settings(settings):
    """
    Check a flat settings dictionary against SETTINGS_TYPES.

    Unknown keys are dropped with a warning, wrongly typed values raise.
    Returns the cleaned dictionary.
    """
    cleaned = {}
    for key, value in settings.items():
        if key == "extends":
            continue
        if key not in SETTINGS_TYPES:
            LOG.warning("Ignoring unknown setting '%s'", key)
            continue
        if value is None:
            continue
        allowed = SETTINGS_TYPES[key]
        # bool is an int subclass, keep them apart.
        if isinstance(value, bool) and bool not in allowed:
            raise ConfigError(
                "Setting '{}' must be {}, got a boolean.".format(
                    key, " or ".join(t.__name__ for t in allowed)
                )
            )
        if not isinstance(value, allowed):
            raise ConfigError(
                "Setting '{}' must be {}, got {}.".format(
                    key,
                    " or ".join(t.__name__ for t in allowed),
                    type(value).__name__,
                )
            )
        cleaned[key] = value

    if "input_mode" in cleaned and cleaned["input_mode"] not in INPUT_MODES:
        raise ConfigError(
            "Setting 'input_mode' must be one of {}.".format(", ".join(INPUT_MODES))
        )
    for key in ("threads", "epochs", "batch_units", "k", "k1", "k2"):
        if key in cleaned and cleaned[key] < 1:
            raise ConfigError("Setting '{}' must be at least 1.".format(key))
    return cleaned


def validate_profile_name(name):
    """
    Profile names are used in report rows and log lines.
    """
    if not re.match("^[a-zA-Z0-9_]+$", name):
        raise ConfigError(
            "Profile names must match a-zA-Z0-9_ ; '{0!s}' does not.".format(name)
        )
    return name


##
# Files and reports
##


def human_size(num, suffix="B"):
    """
    Convert bytes length to a human-readable version
    """
    for unit in ("", "Ki", "Mi", "Gi", "Ti", "Pi", "Ei", "Zi"):
        if abs(num) < 1024.0:
            return "{0:3.1f}{1!s}{2!s}".format(num, unit, suffix)
        num /= 1024.0
    return "{0:.1f}{1!s}{2!s}".format(num, "Yi", suffix)


def content_hash(*chunks):
    """
    SHA-256 over the concatenation of the given byte chunks.
    """
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(chunk)
    return digest.digest()


def find_ply_files(directory):
    """
    All *.ply files below `directory`, sorted by relative path so corpus
    order never depends on the filesystem.
    """
    if not os.path.isdir(directory):
        raise ConfigError("Corpus directory '{}' does not exist.".format(directory))

    matches = []
    for root, dirnames, filenames in os.walk(directory):
        dirnames.sort()
        for filename in fnmatch.filter(sorted(filenames), "*.ply"):
            matches.append(os.path.join(root, filename))
    return sorted(matches, key=lambda p: os.path.relpath(p, directory))


def write_csv(path, fieldnames, rows):
    """
    Write dictionaries as CSV with a fixed column order.
    """
    with open(path, "w", newline="") as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    LOG.debug("Wrote %d rows to %s", len(rows), path)
