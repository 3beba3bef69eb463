from . import create_cli
from .config import select_config

cli = create_cli(select_config())


def main():
    cli(prog_name="imprintfit")


if __name__ == "__main__":
    main()
