"""Ключевые (counter-based) потоки случайных чисел.

Каждый поток однозначно задаётся мастер-сидом, строковой меткой назначения
и набором целых индексов (реплика, шаг, строка пары и т.д.). Ключ Philox
выводится стабильным хешированием этого кортежа, поэтому результат не
зависит от порядка вычислений и числа потоков.
"""

import hashlib

import numpy as np

__all__ = ['purpose_code', 'stream_key', 'keyed_generator']

_MASK64 = (1 << 64) - 1


def purpose_code(purpose: str) -> int:
    """Стабильный 64-битный код метки назначения"""
    digest = hashlib.blake2b(purpose.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


def stream_key(master_seed: int, purpose: str, *indices: int) -> np.ndarray:
    """Ключ Philox (2 x uint64) для кортежа (seed, purpose, indices)"""
    seq = np.random.SeedSequence(
        entropy=int(master_seed) & _MASK64,
        spawn_key=(purpose_code(purpose), *[int(i) for i in indices]),
    )
    return seq.generate_state(2, dtype=np.uint64)


def keyed_generator(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Генератор на Philox с ключом, зависящим только от аргументов"""
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, purpose, *indices)))

