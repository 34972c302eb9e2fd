"""Small helpers: safe override parsing, digests, seeded torch RNG and the worker pool."""

import ast
import hashlib
import logging
import operator as op_lib
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterable, Iterator, List, Sequence, Tuple, TypeVar

import torch

from windfuse.errors import UsageError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "WINDFUSE_THREADS"

# Operators allowed in override values, e.g. "text.lr=3*10**-5"
SAFE_OPERATORS = {
    ast.Add: op_lib.add,
    ast.Sub: op_lib.sub,
    ast.Mult: op_lib.mul,
    ast.Div: op_lib.truediv,
    ast.Pow: op_lib.pow,
    ast.USub: op_lib.neg,
    ast.UAdd: op_lib.pos,
}

_NAMED_CONSTANTS = {
    "true": True, "false": False, "none": None, "null": None,
}


def _safe_eval(node):
    """Recursively evaluates a literal/arithmetic AST node."""
    if isinstance(node, ast.Expression):
        return _safe_eval(node.body)
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.Name):
        key = node.id.lower()
        if key in _NAMED_CONSTANTS:
            return _NAMED_CONSTANTS[key]
        return node.id
    if isinstance(node, ast.BinOp) and type(node.op) in SAFE_OPERATORS:
        return SAFE_OPERATORS[type(node.op)](
            _safe_eval(node.left), _safe_eval(node.right)
        )
    if isinstance(node, ast.UnaryOp) and type(node.op) in SAFE_OPERATORS:
        return SAFE_OPERATORS[type(node.op)](_safe_eval(node.operand))
    if isinstance(node, (ast.Tuple, ast.List)):
        return [_safe_eval(e) for e in node.elts]
    raise TypeError(f"Unsupported expression: {type(node).__name__}")


def parse_override(item: str) -> Tuple[str, Any]:
    """Parses one ``key=value`` override.

    The value is evaluated from its AST (numbers, booleans, lists and
    arithmetic only); anything that does not parse is kept as a string.

    Raises:
        UsageError: If the item has no '=' or an empty key.
    """
    if "=" not in item:
        raise UsageError(f"override must look like key=value: {item!r}")
    key, raw = (part.strip() for part in item.split("=", 1))
    if not key:
        raise UsageError(f"override has an empty key: {item!r}")
    try:
        value = _safe_eval(ast.parse(raw, mode="eval"))
    except (SyntaxError, TypeError, ValueError, ZeroDivisionError):
        value = raw
    return key, value


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    return dict(parse_override(item) for item in items)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str, chunk_size: int = 1 << 20) -> str:
    """SHA-256 of a file's contents."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def thread_cap() -> int:
    """Worker threads allowed by WINDFUSE_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        logger.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1
    return max(1, value)


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
    """Maps fn over items, in input order, on up to thread_cap() threads."""
    workers = min(thread_cap(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# torch's default generator is process-global; seeded construction holds this
_TORCH_SEED_LOCK = threading.Lock()


@contextmanager
def seeded_torch(seed: int) -> Iterator[None]:
    """Runs the block on torch's global RNG seeded with ``seed``, one thread at a time.

    The caller's RNG state is restored on exit.
    """
    with _TORCH_SEED_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
