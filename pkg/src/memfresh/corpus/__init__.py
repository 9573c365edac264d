"""Bundled sample programs, one per leakage mechanism under study."""

from importlib import resources

PROGRAMS = (
    "ctswap",      # constant-time swap of two buffers under a secret bit
    "ctselect",    # constant-time select repeatedly storing one of two values
    "memops",      # memcpy/memset workload over globals and heap
    "twovalue",    # two known plaintexts at one address (dictionary target)
    "maskcancel",  # 0/1 toggle store at one address (mask cancellation target)
    "gofetch",     # pointer planted in one of two swapped slots (prefetcher target)
)


def load(name: str) -> str:
    if name not in PROGRAMS:
        raise KeyError(f"unknown corpus program '{name}' (have {', '.join(PROGRAMS)})")
    return resources.files(__package__).joinpath(f"{name}.zir").read_text()
