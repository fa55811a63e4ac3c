"""
Modelo físico do cluster: dispositivos, enlaces, livro de memória e
perfis de custo (tabelas de computação por lote e comprimento).
"""
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from django.db import models

from utils.app_cluster.exceptions import (CapacityExhaustedError,
                                          EmptyProfileError, LedgerLeakError,
                                          ProfileError, UnknownDeviceError)
from utils.commons.units import round_half_up_us


class Phase(models.TextChoices):
    PREFILL = 'prefill', 'Prefill'
    DECODE = 'decode', 'Decode'


class LinkKind(models.TextChoices):
    INTRA = 'intra', 'Intra-servidor'
    INTER = 'inter', 'Inter-servidor'
    INGRESS = 'ingress', 'Entrada do escalonador'


class MemoryCategory(models.TextChoices):
    PARAMS = 'params', 'Parâmetros'
    KV = 'kv', 'Cache KV'
    ACTIVATIONS = 'activations', 'Ativações'


GATEWAY = 'gateway'


def _not_increasing(axis):
    return any(x >= y for x, y in zip(axis, axis[1:]))


class MemoryLedger:
    """
    Livro de memória de um dispositivo.

    Cada alocação tem categoria e chave; a soma nunca passa da capacidade
    e toda alocação precisa de uma liberação correspondente.
    """

    def __init__(self, device_id, capacity_bytes):
        self.device_id = device_id
        self.capacity = int(capacity_bytes)
        self._entries = {}
        self._by_category = {c.value: 0 for c in MemoryCategory}
        self.used = 0

    @property
    def free(self):
        return self.capacity - self.used

    def can_fit(self, nbytes):
        return nbytes <= self.free

    def category_used(self, category):
        return self._by_category.get(str(category), 0)

    def holds(self, category, key):
        return (str(category), key) in self._entries

    def get(self, category, key):
        return self._entries.get((str(category), key), 0)

    def allocate(self, category, key, nbytes):
        """
        Reserva (ou amplia) a entrada (categoria, chave).

        Raises:
            CapacityExhaustedError: sem espaço livre
        """
        nbytes = int(nbytes)
        if nbytes < 0:
            raise ValueError("alocação negativa")
        if nbytes > self.free:
            raise CapacityExhaustedError(
                self.device_id, str(category), nbytes, self.free
            )
        entry = (str(category), key)
        self._entries[entry] = self._entries.get(entry, 0) + nbytes
        self._by_category[str(category)] += nbytes
        self.used += nbytes
        return nbytes

    def shrink(self, category, key, nbytes):
        """Devolve parte de uma entrada; remove-a quando chega a zero."""
        entry = (str(category), key)
        current = self._entries.get(entry, 0)
        nbytes = min(int(nbytes), current)
        if nbytes <= 0:
            return 0
        remaining = current - nbytes
        if remaining:
            self._entries[entry] = remaining
        else:
            del self._entries[entry]
        self._by_category[str(category)] -= nbytes
        self.used -= nbytes
        return nbytes

    def release(self, category, key):
        """Libera a entrada inteira e retorna os bytes devolvidos."""
        return self.shrink(category, key, self.get(category, key))

    def entries(self, category=None):
        return {
            key: nbytes for (cat, key), nbytes in self._entries.items()
            if category is None or cat == str(category)
        }

    def assert_drained(self, categories=None):
        """
        Verifica ausência de vazamentos nas categorias informadas.

        Raises:
            LedgerLeakError: sobrou alguma alocação
        """
        wanted = {str(c) for c in (categories or MemoryCategory.values)}
        remaining = {
            f"{cat}:{key}": nbytes
            for (cat, key), nbytes in self._entries.items() if cat in wanted
        }
        if remaining:
            raise LedgerLeakError(self.device_id, remaining)


@dataclass
class Device:
    id: str
    server_id: str
    device_class: str
    mem_capacity_bytes: int
    mem_bandwidth_Bps: float
    store_bandwidth_Bps: float
    ledger: MemoryLedger = None
    busy_until: int = 0
    # trabalho concorrente (recomputação de KV, pista do substituto)
    co_running: int = 0
    kv_pool: Any = None

    def __post_init__(self):
        if self.ledger is None:
            self.ledger = MemoryLedger(self.id, self.mem_capacity_bytes)

    @property
    def free_bytes(self):
        return self.ledger.free

    @property
    def is_busy(self):
        return self.co_running > 0


@dataclass
class Link:
    key: str
    endpoints: tuple
    bandwidth_Bps: float
    kind: str

    def __post_init__(self):
        if not self.bandwidth_Bps > 0:
            raise ValueError(f"Enlace {self.key} sem banda positiva")


@dataclass
class TransferJob:
    """
    Transferência sob compartilhamento de banda (processor sharing).
    """
    id: int
    src: str
    dst: str
    bytes: int
    start: int
    link_key: str
    link_kind: str
    bandwidth_Bps: float
    tag: Any = None
    on_done: Any = None
    remaining: float = 0.0
    rate_Bps: float = 0.0
    last_update: int = 0
    end: int = None
    handle: Any = None

    @property
    def duration(self):
        return None if self.end is None else self.end - self.start


@dataclass
class ProfileGrid:
    """
    Tabela {(lote, comprimento) -> µs} com interpolação bilinear e
    extrapolação grampeada nas bordas.
    """
    batches: tuple
    lengths: tuple
    values: np.ndarray

    @classmethod
    def from_dict(cls, data, reference='perfil'):
        batches = tuple(int(b) for b in data.get('batches', ()))
        lengths = tuple(int(x) for x in data.get('lengths', ()))
        values = np.asarray(data.get('us', ()), dtype=float)
        grid = cls(batches, lengths, values)
        grid.validate(reference)
        return grid

    @property
    def empty(self):
        return not self.batches or not self.lengths or self.values.size == 0

    def validate(self, reference):
        if self.empty:
            return
        if self.values.shape != (len(self.batches), len(self.lengths)):
            raise ProfileError(reference, "dimensões da tabela")
        if _not_increasing(self.batches) or _not_increasing(self.lengths):
            raise ProfileError(reference, "eixos devem ser crescentes")
        if np.any(np.diff(self.values, axis=0) < 0) or \
                np.any(np.diff(self.values, axis=1) < 0):
            raise ProfileError(reference, "valores devem ser não decrescentes")

    def lookup(self, batch, length):
        """Valor interpolado (float, µs)."""
        rows = [
            np.interp(length, self.lengths, row) for row in self.values
        ]
        return float(np.interp(batch, self.batches, rows))

    def scaled(self, factor, offset=0.0):
        return ProfileGrid(
            self.batches, self.lengths, self.values * factor + offset
        )

    def as_dict(self):
        return {
            'batches': list(self.batches),
            'lengths': list(self.lengths),
            'us': self.values.tolist(),
        }

    @staticmethod
    def union(grids, factor=1.0):
        """Soma de várias tabelas sobre a união dos eixos."""
        grids = [g for g in grids if not g.empty]
        if not grids:
            return ProfileGrid((), (), np.zeros((0, 0)))
        batches = tuple(sorted({b for g in grids for b in g.batches}))
        lengths = tuple(sorted({x for g in grids for x in g.lengths}))
        values = np.array([
            [sum(g.lookup(b, x) for g in grids) * factor for x in lengths]
            for b in batches
        ])
        return ProfileGrid(batches, lengths, values)


@dataclass
class CostProfile:
    block_id: str
    device_class: str
    prefill: ProfileGrid
    decode: ProfileGrid
    kv_bytes_per_token: int = 0
    activation_bytes_per_token: int = 0
    param_bytes: int = 0
    surrogate_speedup: float = None
    surrogate_acceptance: float = None
    branches: int = 1
    surcharge_per_branch: float = 0.0

    @property
    def has_surrogate(self):
        return self.surrogate_speedup is not None and \
            self.surrogate_speedup > 1

    def grid(self, phase):
        grid = self.prefill if str(phase) == Phase.PREFILL else self.decode
        if grid.empty:
            raise EmptyProfileError(self.block_id, str(phase))
        return grid

    def scaled(self, factor):
        """Cópia com todas as entradas multiplicadas por `factor`."""
        return CostProfile(
            block_id=self.block_id,
            device_class=self.device_class,
            prefill=self.prefill.scaled(factor),
            decode=self.decode.scaled(factor),
            kv_bytes_per_token=self.kv_bytes_per_token,
            activation_bytes_per_token=self.activation_bytes_per_token,
            param_bytes=self.param_bytes,
            surrogate_speedup=self.surrogate_speedup,
            surrogate_acceptance=self.surrogate_acceptance,
            branches=self.branches,
            surcharge_per_branch=self.surcharge_per_branch,
        )


def comp_time(profile, batch, phase, length, branches=1):
    """
    Tempo de computação (µs inteiros) de um lote.

    Prefill: custo do lote inteiro no comprimento do prompt.
    Decode: custo de uma iteração (um token) no comprimento de contexto.
    Blocos mesclados pagam 1 + sobretaxa·(ramos − 1).

    Raises:
        EmptyProfileError: tabela da fase sem pontos
    """
    value = profile.grid(phase).lookup(max(1, batch), max(1, length))
    if branches > 1 and profile.surcharge_per_branch:
        value *= 1 + profile.surcharge_per_branch * (branches - 1)
    return round_half_up_us(value)


def path_is_free(bandwidth_Bps):
    return math.isinf(bandwidth_Bps)


@dataclass
class Cluster:
    devices: dict = field(default_factory=dict)
    servers: dict = field(default_factory=dict)
    intra_bandwidth: dict = field(default_factory=dict)
    inter_bandwidth: dict = field(default_factory=dict)
    default_inter_Bps: float = 12.5e9
    ingress_Bps: float = 12.5e9

    @property
    def device_ids(self):
        return sorted(self.devices)

    @property
    def server_ids(self):
        return sorted(self.servers)

    def device(self, device_id):
        try:
            return self.devices[device_id]
        except KeyError:
            raise UnknownDeviceError(device_id) from None

    def server_of(self, device_id):
        return self.device(device_id).server_id

    def inter_link(self, server_a, server_b):
        a, b = sorted((server_a, server_b))
        bandwidth = self.inter_bandwidth.get((a, b), self.default_inter_Bps)
        return Link(f"inter:{a}|{b}", (a, b), bandwidth, LinkKind.INTER)

    def path(self, src, dst):
        """
        Enlace gargalo do caminho src -> dst, ou None no mesmo dispositivo.
        `src` igual a GATEWAY (ou None) representa a entrada do escalonador.
        """
        target = self.device(dst)
        intra = self.intra_bandwidth[target.server_id]
        if src is None or src == GATEWAY:
            return Link(
                f"ingress:{target.server_id}", (GATEWAY, target.server_id),
                min(self.ingress_Bps, intra), LinkKind.INGRESS,
            )
        source = self.device(src)
        if source.id == target.id:
            return None
        if source.server_id == target.server_id:
            return Link(
                f"intra:{source.server_id}", (source.id, target.id),
                intra, LinkKind.INTRA,
            )
        link = self.inter_link(source.server_id, target.server_id)
        link.bandwidth_Bps = min(
            self.intra_bandwidth[source.server_id],
            link.bandwidth_Bps,
            intra,
        )
        return link
