"""Async helpers and utilities for the adaptive MRAG engine."""

import asyncio
import functools
from pathlib import Path
from typing import Any, Callable, Coroutine, List, TypeVar, Union

import aiofiles

from .logger import get_logger

T = TypeVar('T')

logger = get_logger(__name__)


class AsyncTaskManager:
    """Manages concurrent execution of async tasks with rate limiting."""

    def __init__(self, max_concurrent_tasks: int = 5):
        """Initialize the task manager.

        Args:
            max_concurrent_tasks: Maximum number of concurrent tasks.
        """
        if max_concurrent_tasks < 1:
            raise ValueError("max_concurrent_tasks must be >= 1")
        self.max_concurrent_tasks = max_concurrent_tasks
        self.semaphore = asyncio.Semaphore(max_concurrent_tasks)

    async def run_tasks(self,
                        tasks: List[Coroutine[Any, Any, T]]) -> List[Union[T, BaseException]]:
        """Run multiple tasks concurrently with rate limiting.

        Results come back in submission order. A failed task contributes its
        exception in place of a result so callers can record it.

        Args:
            tasks: List of coroutines to execute.

        Returns:
            One result or exception per task.
        """
        async def _run_with_semaphore(task: Coroutine[Any, Any, T]) -> T:
            async with self.semaphore:
                return await task

        logger.debug("Starting concurrent task execution", task_count=len(tasks),
                     max_concurrent=self.max_concurrent_tasks)

        results = await asyncio.gather(*[_run_with_semaphore(task) for task in tasks],
                                       return_exceptions=True)

        failed = [i for i, result in enumerate(results) if isinstance(result, BaseException)]
        for i in failed:
            logger.warning("Task failed", task_index=i, error=str(results[i]))

        logger.debug("Task execution completed",
                     successful=len(results) - len(failed),
                     failed=len(failed))

        return list(results)


def sync_to_async(func: Callable[..., T]) -> Callable[..., Coroutine[Any, Any, T]]:
    """Convert a synchronous function to async using the default thread pool.

    Args:
        func: Synchronous function to convert.

    Returns:
        Async wrapper function.
    """
    @functools.wraps(func)
    async def wrapper(*args, **kwargs):
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(None, functools.partial(func, *args, **kwargs))

    return wrapper


async def write_file_async(file_path: Union[str, Path], content: bytes) -> None:
    """Write content to a file asynchronously, creating parent directories.

    Args:
        file_path: Path to the file to write.
        content: Content to write.
    """
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    logger.debug("Writing file asynchronously", file_path=str(path), size=len(content))

    async with aiofiles.open(path, 'wb') as file:
        await file.write(content)
