"""Version information for :mod:`phsgp`.

Run with ``python -m phsgp.version``
"""

import os
from subprocess import CalledProcessError, check_output

__all__ = [
    "VERSION",
    "get_git_hash",
    "get_version",
]

VERSION = "0.1.0-dev"


def get_git_hash() -> str:
    """Get the :mod:`phsgp` git hash, or an empty string outside a checkout."""
    with open(os.devnull, "w") as devnull:
        try:
            ret = check_output(
                ["git", "rev-parse", "HEAD"],
                cwd=os.path.dirname(__file__),
                stderr=devnull,
            )
        except (CalledProcessError, FileNotFoundError):
            return ""
        else:
            return ret.strip().decode("utf-8")[:8]


def get_version(with_git_hash: bool = False) -> str:
    """Get the :mod:`phsgp` version string, including a git hash if requested."""
    if with_git_hash:
        git_hash = get_git_hash()
        if git_hash:
            return f"{VERSION}-{git_hash}"
    return VERSION


if __name__ == "__main__":
    print(get_version(with_git_hash=True))  # noqa:T201
