"""Main entry point for stitchkit."""

import sys
from typing import Optional, Sequence

import click

from .cli.commands import EXIT_OK, EXIT_USAGE, cli, exit_code_for
from .cli.interface import show_error_tui
from .exceptions import StitchKitError


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI on ``argv`` and return the exit code instead of exiting."""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="stitchkit", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("\nOperation cancelled by user.", err=True)
        return EXIT_USAGE
    except StitchKitError as e:
        show_error_tui(str(e))
        return exit_code_for(e)
    return result if isinstance(result, int) else EXIT_OK


def main() -> None:
    """Main entry point for the CLI."""
    try:
        sys.exit(run(sys.argv[1:]))
    except KeyboardInterrupt:
        click.echo("\nOperation cancelled by user.")
        sys.exit(EXIT_USAGE)


if __name__ == "__main__":
    main()
