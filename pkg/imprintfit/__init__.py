import logging
import sys

# Load environment variables before importing Config, which reads os.environ
# at import time.
try:
    from dotenv import load_dotenv
    from pathlib import Path

    # Resolve env files relative to the project root, not the working directory.
    _ROOT = Path(__file__).resolve().parent.parent
    load_dotenv(_ROOT / ".env")       # optional
    load_dotenv(_ROOT / "env.local")  # local overrides (gitignored)
except Exception:
    pass

import click

from .config import Config
from .tasks import current_gene, register_cli

__version__ = "0.1.0"


class _GeneContextFilter(logging.Filter):
    """Stamp each record with the gene being fitted (`-` outside a fit)."""

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, "gene_id"):
            record.gene_id = current_gene.get()
        return True


def configure_logging(level: str = "INFO") -> logging.Logger:
    logger = logging.getLogger("imprintfit")
    logger.setLevel(level.upper())
    # one handler, rebound to the current stderr on every call; stdout carries TSV output
    for old in [h for h in logger.handlers if getattr(h, "_imprintfit", False)]:
        logger.removeHandler(old)
    handler = logging.StreamHandler(sys.stderr)
    handler._imprintfit = True
    handler.addFilter(_GeneContextFilter())
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s [%(gene_id)s] %(message)s"))
    logger.addHandler(handler)
    return logger


def create_cli(config_class=Config) -> click.Group:
    @click.group(help="Joint TReC + ASE fits of genetic and parent-of-origin effects.")
    @click.option(
        "--log-level",
        type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
        default=None,
        help=f"Override log level (default {config_class.LOG_LEVEL}).",
    )
    @click.version_option(__version__, prog_name="imprintfit")
    @click.pass_context
    def cli(ctx, log_level):
        ctx.obj = config_class
        logger = configure_logging(log_level or config_class.LOG_LEVEL)
        logger.debug(
            "Startup config: EPSILON=%s MAX_ITERS=%s MIN_ASE=%s THREADS=%s SEED=%s",
            config_class.EPSILON,
            config_class.MAX_ITERS,
            config_class.MIN_ASE,
            config_class.THREADS,
            config_class.SEED,
        )

    register_cli(cli)
    return cli
