"""
Coloured console output for the command-line assistant.

Library modules only use ``logging``; this module decides how those records
look on a terminal and renders result tables.
"""

import json
import logging
import sys

from colorama import Fore, Style, init
from tabulate import tabulate

# Initialize colorama for colored output
init()

LEVEL_COLOURS = {
    logging.DEBUG: Style.DIM,
    logging.INFO: Fore.GREEN,
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Fore.RED + Style.BRIGHT,
}


class ColourFormatter(logging.Formatter):
    """Prefix each record with a coloured level marker."""

    def format(self, record):
        colour = LEVEL_COLOURS.get(record.levelno, "")
        message = super().format(record)
        if record.levelno >= logging.WARNING:
            return f"{colour}{record.levelname.lower()}: {message}{Style.RESET_ALL}"
        return f"{colour}✓{Style.RESET_ALL} {message}"


def configure_logging(verbose=False):
    """Install the coloured handler on the root logger."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(ColourFormatter("%(message)s"))
    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    # matplotlib and PIL are chatty at debug level
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)


def banner(title):
    print(f"\n{Fore.CYAN}===== {title} ====={Style.RESET_ALL}")


def print_reports_table(reports):
    """Tabulate attack reports (method, pair, ASR, P_loss)."""
    if not reports:
        print(f"{Fore.YELLOW}No reports to display.{Style.RESET_ALL}")
        return

    rows = []
    for report in reports:
        rows.append([
            f"{Fore.CYAN}{report.method}{Style.RESET_ALL}",
            report.source,
            report.target,
            f"{report.p_loss:.2f}",
            f"{report.asr * 100:.1f}%",
            f"{report.n_success}/{report.n_eligible}",
        ])
    headers = ["Method", "Source", "Target", "P_loss", "ASR", "Success/Eligible"]
    print(tabulate(rows, headers=headers, tablefmt="grid"))


def print_frame(frame, title, tail=None):
    """Show a DataFrame (or its last ``tail`` rows) as a grid table."""
    banner(title)
    if tail is not None:
        frame = frame.tail(tail)
    print(tabulate(frame, headers="keys", tablefmt="grid", showindex=False, floatfmt=".4f"))


def print_error_record(command, error):
    """Red message on the terminal plus a JSON error record on stderr."""
    print(f"{Fore.RED}Error in {command}: {error}{Style.RESET_ALL}", file=sys.stderr)
    record = {
        "success": False,
        "command": command,
        "error_type": getattr(error, "error_type", "error"),
        "message": str(error),
    }
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return record
