"""
Conversões de unidade centralizadas.

Tempo virtual em microssegundos inteiros, tamanhos em bytes e larguras de
banda em bytes por segundo. Nenhum outro módulo converte float para µs por
conta própria.
"""
import math

US_PER_S = 1_000_000
US_PER_MS = 1_000
GB = 1_000_000_000
INFINITE_BANDWIDTH = math.inf

# tolerância para ruído de ponto flutuante antes do arredondamento para cima
_CEIL_EPSILON = 1e-6


def round_half_up_us(value):
    """Arredonda meio para cima (0.5 -> 1) para µs inteiros."""
    if value is None or value <= 0:
        return 0
    return int(math.floor(value + 0.5))


def ceil_us(value):
    """Arredonda para cima para µs inteiros, ignorando ruído de float."""
    if value is None or value <= 0:
        return 0
    return int(math.ceil(value - _CEIL_EPSILON))


def seconds_to_us(seconds):
    return round_half_up_us(seconds * US_PER_S)


def us_to_seconds(value_us):
    return value_us / US_PER_S


def gbps_to_bytes(gbytes_per_s):
    """GB/s (decimal) para bytes/s."""
    return float(gbytes_per_s) * GB


def gbit_to_bytes(gbit_per_s):
    """Gb/s (decimal) para bytes/s."""
    return float(gbit_per_s) * GB / 8


def transfer_exact_us(num_bytes, bandwidth_bps):
    """Tempo de transferência em µs sem arredondamento."""
    if num_bytes <= 0 or math.isinf(bandwidth_bps):
        return 0.0
    return num_bytes / bandwidth_bps * US_PER_S


def transfer_us(num_bytes, bandwidth_bps):
    """Duração inteira de uma transferência isolada: ceil(bytes / B)."""
    return ceil_us(transfer_exact_us(num_bytes, bandwidth_bps))
