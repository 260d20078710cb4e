"""Minimal command routing on top of argparse.

Each command module owns a :class:`CommandRouter` and registers handlers on
it; ``main.py`` includes the routers into one :class:`CommandApp`.
"""

import argparse
import logging
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..config import RunConfig, describe_keys, load_config
from ..errors import ConfigError, MDFError
from ..settings import settings

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

Handler = Callable[[argparse.Namespace], int]


@dataclass
class Arg:
    flags: tuple[str, ...]
    options: dict


def arg(*flags: str, **options) -> Arg:
    return Arg(flags, options)


@dataclass
class Command:
    name: str
    help: str
    handler: Handler
    arguments: list[Arg] = field(default_factory=list)


class CommandRouter:
    def __init__(self, tags: Optional[list[str]] = None):
        self.tags = tags or []
        self.commands: list[Command] = []

    def command(self, name: str, help: str, arguments: Optional[list[Arg]] = None):
        def register(handler: Handler) -> Handler:
            self.commands.append(Command(name, help, handler, list(arguments or [])))
            return handler

        return register


def config_help() -> str:
    width = max(len(key) for key, _ in describe_keys())
    lines = ["configuration keys (set with --set key=value):"]
    lines += [f"  {key:<{width}}  {text}" for key, text in describe_keys()]
    return "\n".join(lines)


def add_shared_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help=f"JSON run configuration (default: $MDF_CONFIG or {settings.CONFIG_PATH})")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Override one configuration key; repeatable")
    parser.add_argument("--out", default=None, help="Output root (overrides the out key)")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out={args.out}")
    return load_config(args.config, overrides)


def banner(title: str, lines: Optional[list[str]] = None):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for line in lines or []:
        print(line)
    if lines:
        print("=" * 60 + "\n")


def configure_logging(level: Optional[str] = None):
    logging.basicConfig(level=level or settings.LOG_LEVEL, format=settings.LOG_FORMAT, force=True)


class CommandApp:
    def __init__(self, title: str, version: str):
        self.title = title
        self.version = version
        self.commands: dict[str, Command] = {}

    def include_router(self, router: CommandRouter):
        for command in router.commands:
            if command.name in self.commands:
                raise ValueError(f"command {command.name!r} registered twice")
            self.commands[command.name] = command

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog="mdf",
            description=self.title,
            epilog=config_help(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        parser.add_argument("--version", action="version", version=f"%(prog)s {self.version}")
        sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
        for command in self.commands.values():
            p = sub.add_parser(
                command.name,
                help=command.help,
                description=command.help,
                epilog=config_help(),
                formatter_class=argparse.RawDescriptionHelpFormatter,
            )
            add_shared_arguments(p)
            for a in command.arguments:
                p.add_argument(*a.flags, **a.options)
            p.set_defaults(handler=command.handler)
        return parser

    def run(self, argv: Optional[list[str]] = None) -> int:
        args = self.build_parser().parse_args(argv)
        configure_logging()
        try:
            return args.handler(args)
        except ConfigError as e:
            logger.error("%s", e)
            return EXIT_USAGE
        except MDFError as e:
            logger.error("%s: %s", type(e).__name__, e)
            return EXIT_FAILURE
        except OSError as e:
            logger.error("I/O failure: %s", e)
            return EXIT_FAILURE

    def __call__(self, argv: Optional[list[str]] = None):
        sys.exit(self.run(argv))
