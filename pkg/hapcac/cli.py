#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
hapcac CLI

Lossless compression of point cloud attributes.

"""
import argparse
import logging
import os
import sys
import time
from dataclasses import replace

import argcomplete
import click
import hjson as json
import toml
import yaml
from click import BaseCommand, Context
from click.exceptions import ClickException
from click.globals import push_context

from . import __version__
from .core import (
    EVAL_FIELDS,
    LOSS_FIELDS,
    REPORT_FIELDS,
    Codec,
    CodecConfig,
    load_corpus,
    logger,
    model_config_from_settings,
)
from .entropy import BitstreamHeader
from .lod import MAX_UNIT_POINTS_LIMIT
from .model import save_checkpoint
from .pointcloud import read_geometry, read_ply, write_ply
from .tensor import archive_hash
from .utilities import (
    ConfigError,
    FormatError,
    HapcacError,
    IntegrityError,
    human_size,
    validate_profile_name,
    validate_settings,
    write_csv,
)

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


class InputError(ClickException):
    """Bad input file, bitstream or settings."""

    exit_code = 2


class IntegrityFailure(ClickException):
    """Checksum/hash mismatch or decoder desync."""

    exit_code = 3


##
# Main Input Processing
##


class HapcacCLI:
    """
    HapcacCLI object is responsible for loading the settings,
    handling the input arguments and executing the calls to the core library.
    """

    # CLI
    vargs = None
    command = None
    disable_progress = False

    # Settings
    hapcac_settings = None
    profile = None
    settings_file = None

    def __init__(self):
        self._overrides = {}  # change using self.override_setting(key, val)

    @property
    def profile_config(self):
        """
        Settings of the selected profile, `extends` resolved, overrides applied.
        """

        def get_profile_setting(profile, extended_profiles=None):
            if extended_profiles is None:
                extended_profiles = []

            if profile in extended_profiles:
                raise ConfigError(
                    profile + " has already been extended to these settings. "
                    "There is a circular extends within the settings file."
                )
            extended_profiles.append(profile)

            try:
                profile_settings = dict(self.hapcac_settings[profile].copy())
            except KeyError:
                raise ConfigError(
                    "Cannot extend settings for undefined profile '" + profile + "'."
                )

            extends_profile = self.hapcac_settings[profile].get("extends", None)
            if not extends_profile:
                return profile_settings
            extended_settings = get_profile_setting(
                profile=extends_profile, extended_profiles=extended_profiles
            )
            extended_settings.update(profile_settings)
            return extended_settings

        settings = {}
        if self.profile is not None:
            settings = get_profile_setting(profile=self.profile)
        settings = validate_settings(settings)
        settings.update(self._overrides)
        return settings

    def override_setting(self, key, val):
        """
        Forcefully override a profile setting from the command line.
        """
        if val is not None:
            self._overrides[key] = val

    def handle(self, argv=None):
        """
        Main function.
        Parses command, load settings and dispatches accordingly.
        """

        desc = "hapcac - Lossless point cloud attribute compression.\n"
        parser = argparse.ArgumentParser(description=desc)
        parser.add_argument(
            "-v",
            "--version",
            action="version",
            version=__version__,
            help="Print the hapcac version",
        )
        parser.add_argument(
            "--color", default="auto", choices=["auto", "never", "always"]
        )

        env_parser = argparse.ArgumentParser(add_help=False)
        group = env_parser.add_argument_group()
        group.add_argument(
            "-s", "--settings_file", help="The path to a hapcac settings file."
        )
        group.add_argument("-p", "--profile", help="The settings profile to use.")
        group.add_argument(
            "-q", "--quiet", action="store_true", help="Silence all output."
        )
        group.add_argument(
            "-j",
            "--json",
            action="store_true",
            help="Make the output of this command be machine readable.",
        )
        group.add_argument(
            "--disable_progress", action="store_true", help="Disable progress bars."
        )
        group.add_argument("--log-level", choices=LOG_LEVELS, help="Package log level.")

        codec_parser = argparse.ArgumentParser(add_help=False)
        codec_group = codec_parser.add_argument_group("codec")
        codec_group.add_argument("--checkpoint", help="A trained model checkpoint.")
        codec_group.add_argument(
            "--baseline",
            action="store_true",
            default=None,
            help="Use the training-free adaptive Laplace predictor.",
        )
        codec_group.add_argument("--threads", type=positive_int, help="Worker threads.")
        codec_group.add_argument("--seed", type=int, help="LoD sampling seed.")
        codec_group.add_argument(
            "--slice-size", type=positive_int, help="Points per slice."
        )
        codec_group.add_argument(
            "--max-unit-points",
            type=positive_int,
            help="Largest coding unit in points, from n1 up to {}.".format(MAX_UNIT_POINTS_LIMIT),
        )

        subparsers = parser.add_subparsers(title="subcommands", dest="command")

        ##
        # Encode
        ##
        encode_parser = subparsers.add_parser(
            "encode", parents=[env_parser, codec_parser], help="Compress a PLY cloud."
        )
        encode_parser.add_argument("--input", required=True, help="Input PLY file.")
        encode_parser.add_argument("--output", required=True, help="Output bitstream.")
        encode_parser.add_argument("--report", help="Write a per-level CSV report.")

        ##
        # Decode
        ##
        decode_parser = subparsers.add_parser(
            "decode",
            parents=[env_parser, codec_parser],
            help="Restore attributes onto a geometry PLY.",
        )
        decode_parser.add_argument(
            "--geometry", required=True, help="PLY holding the cloud's positions."
        )
        decode_parser.add_argument("--input", required=True, help="Input bitstream.")
        decode_parser.add_argument("--output", required=True, help="Output PLY file.")

        ##
        # Train
        ##
        train_parser = subparsers.add_parser(
            "train",
            parents=[env_parser, codec_parser],
            help="Train a context model on a directory of PLY files.",
        )
        train_parser.add_argument("--input", required=True, help="Corpus directory.")
        train_parser.add_argument("--output", required=True, help="Checkpoint to write.")
        train_parser.add_argument("--epochs", type=positive_int, help="Training epochs.")
        train_parser.add_argument("--learning-rate", type=float, help="Adam step size.")
        train_parser.add_argument(
            "--batch-units", type=positive_int, help="Coding units per optimizer step."
        )
        train_parser.add_argument(
            "--input-mode",
            choices=["residual", "raw"],
            help="Feed attribute residuals (default) or raw attributes.",
        )
        train_parser.add_argument("--loss-curve", help="Write per-epoch loss as CSV.")

        ##
        # Eval
        ##
        eval_parser = subparsers.add_parser(
            "eval",
            parents=[env_parser, codec_parser],
            help="Encode, decode and verify a corpus under several settings.",
        )
        eval_parser.add_argument("--input", required=True, help="Corpus directory.")
        eval_parser.add_argument(
            "--quant-step",
            type=positive_int,
            action="append",
            help="Geometry quantization step; repeat for several.",
        )
        eval_parser.add_argument(
            "--refl-bits",
            type=positive_int,
            action="append",
            help="Reflectance bit depth; repeat for several.",
        )
        eval_parser.add_argument("--report", help="Write results as CSV.")

        ##
        # Info
        ##
        info_parser = subparsers.add_parser(
            "info", parents=[env_parser], help="Show a bitstream's header."
        )
        info_parser.add_argument("--input", required=True, help="Input bitstream.")

        argcomplete.autocomplete(parser)
        args = parser.parse_args(argv)
        self.vargs = vars(args)

        if args.color == "never":
            disable_click_colors()

        if not args.command:
            parser.print_help()
            return

        self.command = args.command
        self.disable_progress = self.vargs.get("disable_progress")
        if self.vargs.get("quiet"):
            self.silence()

        try:
            self.load_settings(self.vargs.get("settings_file"), self.vargs.get("profile"))
            self.dispatch_command(self.command)
        except ClickException as e:
            e.show()
            sys.exit(e.exit_code)

    def dispatch_command(self, command):
        """
        Given a command to execute, execute that command and turn library
        errors into exit codes.
        """

        try:
            self.apply_log_level()
            if command == "encode":
                self.encode()
            elif command == "decode":
                self.decode()
            elif command == "train":
                self.train()
            elif command == "eval":
                self.eval()
            elif command == "info":
                self.info(return_json=self.vargs.get("json"))
        except IntegrityError as e:
            raise IntegrityFailure(str(e))
        except (FormatError, ConfigError) as e:
            raise InputError(str(e))
        except HapcacError as e:  # pragma: no cover
            raise InputError(str(e))
        except (IOError, OSError) as e:
            raise InputError("{}: {}".format(getattr(e, "filename", None) or "I/O", e.strerror or e))

    ##
    # Settings
    ##

    def get_settings_file(self, settings_name="hapcac_settings"):
        """
        Return the hapcac_settings path as JSON, TOML or YAML, or None.
        """
        for ext in (".json", ".toml", ".yml", ".yaml"):
            if os.path.isfile(settings_name + ext):
                return settings_name + ext
        return None

    def load_settings_file(self, settings_file):
        """
        Load our settings file.
        """
        if not os.path.isfile(settings_file):
            raise ConfigError("Settings file '{}' does not exist.".format(settings_file))

        path, ext = os.path.splitext(settings_file)
        if ext == ".yml" or ext == ".yaml":
            with open(settings_file) as yaml_file:
                try:
                    self.hapcac_settings = yaml.safe_load(yaml_file)
                except yaml.YAMLError:
                    raise ConfigError(
                        "Unable to load the hapcac settings YAML. It may be malformed."
                    )
        elif ext == ".toml":
            with open(settings_file) as toml_file:
                try:
                    self.hapcac_settings = toml.load(toml_file)
                except ValueError:
                    raise ConfigError(
                        "Unable to load the hapcac settings TOML. It may be malformed."
                    )
        else:
            with open(settings_file) as json_file:
                try:
                    self.hapcac_settings = json.load(json_file)
                except ValueError:
                    raise ConfigError(
                        "Unable to load the hapcac settings JSON. It may be malformed."
                    )

        if not isinstance(self.hapcac_settings, dict):
            raise ConfigError("Settings must map profile names to settings.")

    def load_settings(self, settings_file=None, profile=None):
        """
        Load the settings file (if any), pick a profile and register the
        command-line overrides.
        """
        try:
            settings_file = settings_file or self.get_settings_file()
            if settings_file:
                self.load_settings_file(settings_file)
                for name in self.hapcac_settings:
                    validate_profile_name(name)
                if profile is None and len(self.hapcac_settings) == 1:
                    profile = list(self.hapcac_settings)[0]
                if profile is None and self.hapcac_settings:
                    raise ConfigError(
                        "Please choose one of the profiles {} with --profile.".format(
                            ", ".join(sorted(self.hapcac_settings))
                        )
                    )
                if profile is not None and profile not in self.hapcac_settings:
                    raise ConfigError(
                        "Please define profile '{0!s}' in your hapcac settings.".format(
                            profile
                        )
                    )
            elif profile is not None:
                raise ConfigError("No settings file found for profile '{}'.".format(profile))
        except ConfigError as e:
            raise InputError(str(e))

        self.settings_file = settings_file
        self.profile = profile

        self.override_setting("seed", self.vargs.get("seed"))
        self.override_setting("slice_size", self.vargs.get("slice_size"))
        self.override_setting("max_unit_points", self.vargs.get("max_unit_points"))
        self.override_setting("threads", self.vargs.get("threads"))
        self.override_setting("baseline", self.vargs.get("baseline"))
        self.override_setting("input_mode", self.vargs.get("input_mode"))
        self.override_setting("epochs", self.vargs.get("epochs"))
        self.override_setting("learning_rate", self.vargs.get("learning_rate"))
        self.override_setting("batch_units", self.vargs.get("batch_units"))
        self.override_setting("log_level", self.vargs.get("log_level"))

    def apply_log_level(self):
        level = self.profile_config.get("log_level")
        if level is None:
            return
        if level.upper() not in LOG_LEVELS:
            raise ConfigError("log_level must be one of {}.".format(", ".join(LOG_LEVELS)))
        logging.getLogger("hapcac").setLevel(level.upper())
        logger.setLevel(level.upper())

    def make_codec(self, use_checkpoint=True):
        settings = self.profile_config
        config = CodecConfig.from_settings(settings)
        checkpoint = self.vargs.get("checkpoint")
        if checkpoint and use_checkpoint and not settings.get("baseline"):
            with open(checkpoint, "rb") as f:
                return Codec.from_checkpoint(
                    f.read(), config, disable_progress=self.disable_progress
                )
        if checkpoint and use_checkpoint:
            logger.debug("Ignoring --checkpoint in baseline mode")
        return Codec(replace(config, baseline=True), disable_progress=self.disable_progress)

    ##
    # The Commands
    ##

    def encode(self):
        with open(self.vargs["input"], "rb") as f:
            pc = read_ply(f.read())
        codec = self.make_codec()
        data, report = codec.encode(pc)
        with open(self.vargs["output"], "wb") as f:
            f.write(data)

        if self.vargs.get("report"):
            started = time.time()
            decoded = codec.decode(pc.positions, data)
            report.decode_seconds = time.time() - started
            if decoded != pc:
                raise IntegrityError("Verification decode did not reproduce the input.")
            name = os.path.basename(self.vargs["input"])
            write_csv(self.vargs["report"], REPORT_FIELDS, report.rows(name))

        if self.vargs.get("json"):
            click.echo(
                json.dumpsJSON(
                    {
                        "points": report.point_count,
                        "bits": report.total_bits,
                        "bpp": report.bpp,
                        "level_bpp": {str(k): v for k, v in report.level_bpp().items()},
                        "encode_s": report.encode_seconds,
                    }
                )
            )
            return
        click.echo(
            "Encoded "
            + click.style(str(report.point_count), bold=True)
            + " points into "
            + click.style(human_size(len(data)), bold=True)
            + ": "
            + click.style("{:.4f} bpp".format(report.bpp), fg="green", bold=True)
        )

    def decode(self):
        with open(self.vargs["geometry"], "rb") as f:
            positions, _ = read_geometry(f.read())
        with open(self.vargs["input"], "rb") as f:
            data = f.read()
        codec = self.make_codec()
        started = time.time()
        pc = codec.decode(positions, data)
        elapsed = time.time() - started
        with open(self.vargs["output"], "wb") as f:
            f.write(write_ply(pc))

        if self.vargs.get("json"):
            click.echo(
                json.dumpsJSON(
                    {
                        "points": len(pc),
                        "bits": 8 * len(data),
                        "bpp": 8.0 * len(data) / max(len(pc), 1),
                        "attributes": pc.space.kind.name,
                        "output": self.vargs["output"],
                        "decode_s": elapsed,
                    }
                )
            )
            return
        click.echo(
            "Decoded "
            + click.style(str(len(pc)), bold=True)
            + " points to "
            + click.style(self.vargs["output"], bold=True)
        )

    def train(self):
        settings = self.profile_config
        corpus = load_corpus(self.vargs["input"])
        codec = Codec(
            CodecConfig.from_settings(dict(settings, baseline=True)),
            disable_progress=self.disable_progress,
        )
        model_config = model_config_from_settings(settings)

        model, losses = codec.train(
            [pc for _, pc in corpus],
            model_config,
            learning_rate=settings.get("learning_rate", 1e-3),
            epochs=settings.get("epochs", 1),
            batch_units=settings.get("batch_units", 8),
            seed=settings.get("seed", 0),
        )
        data = save_checkpoint(model)
        with open(self.vargs["output"], "wb") as f:
            f.write(data)

        if self.vargs.get("loss_curve"):
            write_csv(
                self.vargs["loss_curve"],
                LOSS_FIELDS,
                [
                    {"epoch": epoch, "bits_per_point": round(loss, 6)}
                    for epoch, loss in enumerate(losses, 1)
                ],
            )
        if not self.vargs.get("json"):
            click.echo(
                "Trained on "
                + click.style(str(len(corpus)), bold=True)
                + " file(s); final loss "
                + click.style("{:.4f} bits/point".format(losses[-1]), fg="green", bold=True)
                + ", checkpoint "
                + click.style(archive_hash(data).hex()[:16], bold=True)
            )

    def eval(self):
        corpus = load_corpus(self.vargs["input"])
        codec = self.make_codec()
        rows = codec.evaluate(
            corpus,
            quant_steps=self.vargs.get("quant_step") or [1],
            refl_bits=self.vargs.get("refl_bits") or [None],
        )
        if self.vargs.get("report"):
            write_csv(self.vargs["report"], EVAL_FIELDS, rows)

        summary = [row for row in rows if row["file"] == "ALL"]
        if self.vargs.get("json"):
            click.echo(json.dumpsJSON(summary))
            return
        for row in summary:
            click.echo(
                "step "
                + click.style(str(row["quant_step"]), bold=True)
                + " bits "
                + click.style(str(row["refl_bits"] or "-"), bold=True)
                + ": "
                + click.style("{:.4f} bpp".format(row["bpp"]), fg="green", bold=True)
                + " over {} points".format(row["points"])
            )

    def info(self, return_json=False):
        with open(self.vargs["input"], "rb") as f:
            header = BitstreamHeader.unpack(f.read())

        info = {
            "attributes": header.kind.name,
            "attribute_bits": header.attribute_bits,
            "geom_bits": header.geom_bits,
            "points": header.point_count,
            "n1": header.lod.n1,
            "growth": header.lod.growth,
            "max_unit_points": header.lod.max_unit_points,
            "max_context_points": header.lod.max_context_points,
            "slice_size": header.lod.slice_size,
            "seed": header.lod.seed,
            "random_first": header.lod.random_first,
            "k": header.neighborhood.k,
            "k1": header.neighborhood.k1,
            "k2": header.neighborhood.k2,
            "mode": "baseline" if header.baseline else "neural",
            "checkpoint": header.checkpoint_hash.hex(),
            "slices": [
                {"bytes": s.length, "checksum": s.checksum.hex()} for s in header.slices
            ],
        }
        if return_json:
            click.echo(json.dumpsJSON(info))
            return

        def tabular_print(title, value):
            click.echo("%-*s%s" % (22, click.style(title, bold=True) + ":", str(value)))

        for key, value in info.items():
            if key == "slices":
                continue
            tabular_print(key, value)
        for i, entry in enumerate(info["slices"]):
            tabular_print("slice {}".format(i), "{bytes} bytes {checksum}".format(**entry))

    def silence(self):
        """
        Route all stdout to null.
        """

        sys.stdout = open(os.devnull, "w")
        sys.stderr = open(os.devnull, "w")


####################################################################
# Main
####################################################################


def positive_int(s):
    """Ensure an arg is positive"""
    i = int(s)
    if i < 1:
        raise argparse.ArgumentTypeError("Value must be a positive integer.")
    return i


def disable_click_colors():
    """
    Set a Click context where colors are disabled. Creates a throwaway BaseCommand
    to play nicely with the Context constructor.
    The intended side-effect here is that click.echo() checks this context and will
    suppress colors.
    """

    ctx = Context(BaseCommand("hapcac"))
    ctx.color = False
    push_context(ctx)


def handle():  # pragma: no cover
    """
    Main program execution handler.
    """

    try:
        cli = HapcacCLI()
        sys.exit(cli.handle())
    except SystemExit as e:  # pragma: no cover
        sys.exit(e.code)

    except KeyboardInterrupt:  # pragma: no cover
        sys.exit(130)
    except Exception:
        click.echo(
            "Oh no! An " + click.style("error occurred", fg="red", bold=True) + "! :("
        )
        click.echo("\n==============\n")
        import traceback

        traceback.print_exc()
        click.echo("\n==============\n")

        sys.exit(-1)


if __name__ == "__main__":  # pragma: no cover
    handle()
