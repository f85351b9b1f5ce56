"""
Progress Bars
tqdm wrapper that stays quiet when logging is above INFO
"""
import logging

from tqdm import tqdm


def progress(iterable, desc: str = '', total: int = None, leave: bool = False):
    """Wrap an iterable in a tqdm bar unless the root logger is quieter than INFO"""
    quiet = logging.getLogger().getEffectiveLevel() > logging.INFO
    return tqdm(iterable, desc=desc, total=total, leave=leave, disable=quiet)
