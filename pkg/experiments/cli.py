# experiments/cli.py
"""
Command-line front end: ``python -m experiments.cli <subcommand> [flags]``.

Dispatches to the management commands of the same names, which are also
available through ``manage.py``. Exit codes: 0 success, 1 runtime or
numeric failure, 2 usage error, 3 verification negative.
"""

import logging
import os
import sys

PROG = 'lyapforge'
SUBCOMMANDS = ('fit', 'synth', 'simulate', 'verify', 'export')

USAGE = (
    f"usage: {PROG} {{{','.join(SUBCOMMANDS)}}} [--config PATH] [--checkpoint PATH] [--out DIR]\n"
    f"       [--seed N] [--grid N] [--preset NAME] [--quiet]\n"
)

logger = logging.getLogger('lyapforge')


def setup():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'lyapforge.settings')
    import django

    django.setup()


def run(argv=None) -> int:
    """Run one subcommand and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in SUBCOMMANDS:
        if argv and argv[0] in ('-h', '--help'):
            sys.stdout.write(USAGE)
            return 0
        sys.stderr.write(USAGE)
        sys.stderr.write(f"{PROG}: error: expected one of {', '.join(SUBCOMMANDS)}\n")
        return 2

    setup()
    from django.core.management import load_command_class
    from django.core.management.base import CommandError

    subcommand, rest = argv[0], argv[1:]
    command = load_command_class('experiments', subcommand)
    parser = command.create_parser(PROG, subcommand)
    try:
        options = parser.parse_args(rest)
    except CommandError as exc:
        sys.stderr.write(f"{exc}\n")
        return 2
    except SystemExit as exc:
        # --help
        return exc.code or 0

    cmd_options = vars(options)
    args = cmd_options.pop('args', ())
    try:
        command.execute(*args, **cmd_options)
    except CommandError as exc:
        sys.stderr.write(f"{PROG} {subcommand}: {exc}\n")
        return exc.returncode
    except Exception:
        logger.exception("%s %s crashed", PROG, subcommand)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(run())
