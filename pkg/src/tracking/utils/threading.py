import contextlib
import io
from concurrent.futures import ThreadPoolExecutor
from threading import Event
from typing import Callable, Iterable, TypeVar

from inputimeout import TimeoutOccurred, inputimeout

T = TypeVar("T")
R = TypeVar("R")


class StopFlag:
    """Stop signal shared by the training loop and the input listener thread."""

    def __init__(self):
        self._event = Event()

    def request_stop(self) -> None:
        self._event.set()

    def is_requested(self) -> bool:
        return self._event.is_set()


def listen_for_quit(stop_flag: StopFlag, timeout: float = 1) -> None:
    """
    Poll stdin until the user types 'q' or the flag is set elsewhere.

    The prompt output of inputimeout is swallowed so tqdm bars stay intact.
    """
    print("Press 'q' and Enter at any time to stop after the current epoch.")
    while not stop_flag.is_requested():
        try:
            # Suppress unwanted output from inputimeout
            with contextlib.redirect_stdout(io.StringIO()):
                user_input = inputimeout(prompt="", timeout=timeout)
            if user_input.strip().lower() == "q":
                stop_flag.request_stop()
                print("\nStop requested by user.")
        except TimeoutOccurred:
            continue


def parallel_map(
    fn: Callable[[T], R], items: Iterable[T], threads: int = 1
) -> list[R]:
    """
    Apply fn to every item, optionally on a thread pool.

    Results always come back in input order, so reductions over them do not
    depend on the thread count. The first exception raised by fn propagates.
    """
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
