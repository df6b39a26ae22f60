import sys


def main() -> None:
    from self_diffusion.cli import main as cli_main

    sys.exit(cli_main())
