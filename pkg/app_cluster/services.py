"""
Serviços do modelo físico: leitura da topologia, largura de banda de
caminho, tempo de troca de blocos, rede com compartilhamento de banda e
livro de perfis de custo.
"""
import logging
import math

from app_cluster.models import (GATEWAY, Cluster, CostProfile, Device,
                                LinkKind, Phase, ProfileGrid, TransferJob,
                                comp_time)
from app_engine.models import EventKind
from utils.app_cluster.exceptions import MissingProfileError
from utils.app_cluster.schemas import CLUSTER_SCHEMA, PROFILES_SCHEMA
from utils.commons.exceptions import ConfigError
from utils.commons.documents import validate_document
from utils.commons.units import (GB, INFINITE_BANDWIDTH, US_PER_S, ceil_us,
                                 gbit_to_bytes, gbps_to_bytes,
                                 round_half_up_us)

logger = logging.getLogger(__name__)

DEFAULT_STORE_GBPS = 20.0


# ============================================================================
# TOPOLOGIA
# ============================================================================


def load_cluster(document):
    """
    Constrói o Cluster a partir do documento cluster.json.

    Args:
        document: dict já carregado (ver utils.commons.documents)

    Returns:
        Cluster

    Raises:
        SchemaViolationError: documento fora do schema
        ConfigError: classe de dispositivo inexistente, banda inter maior
            que a intra
    """
    validate_document(document, CLUSTER_SCHEMA, 'cluster.json')
    classes = document['device_classes']
    inter = gbit_to_bytes(document.get('inter_server_bandwidth_gbit', 100))
    cluster = Cluster(
        default_inter_Bps=inter,
        ingress_Bps=gbit_to_bytes(
            document.get('ingress_bandwidth_gbit',
                         document.get('inter_server_bandwidth_gbit', 100))
        ),
    )

    for server in document['servers']:
        server_id = server['id']
        intra = gbps_to_bytes(server['intra_bandwidth_gbps'])
        if intra < inter:
            raise ConfigError(
                f"Servidor {server_id}: banda intra menor que a inter.",
                errors={f"servers.{server_id}.intra_bandwidth_gbps":
                        "deve ser >= banda inter-servidor"},
            )
        cluster.intra_bandwidth[server_id] = intra
        devices = server.get('devices')
        if devices is None:
            count = server.get('device_count', 1)
            devices = [
                {'id': f"{server_id}-d{i}",
                 'device_class': server.get('device_class')}
                for i in range(count)
            ]
        cluster.servers[server_id] = []
        for entry in devices:
            class_name = entry.get('device_class') or \
                server.get('device_class') or next(iter(classes))
            if class_name not in classes:
                raise ConfigError(
                    f"Classe de dispositivo desconhecida: {class_name}",
                    errors={f"servers.{server_id}.device_class": class_name},
                )
            spec = classes[class_name]
            device = Device(
                id=entry['id'],
                server_id=server_id,
                device_class=class_name,
                mem_capacity_bytes=int(spec['mem_capacity_gb'] * GB),
                mem_bandwidth_Bps=gbps_to_bytes(spec['mem_bandwidth_gbps']),
                store_bandwidth_Bps=gbps_to_bytes(
                    spec.get('store_bandwidth_gbps', DEFAULT_STORE_GBPS)
                ),
            )
            cluster.devices[device.id] = device
            cluster.servers[server_id].append(device.id)

    for link in document.get('inter_server_links', []):
        a, b = sorted((link['a'], link['b']))
        cluster.inter_bandwidth[(a, b)] = gbit_to_bytes(link['bandwidth_gbit'])

    logger.info(
        "Cluster com %d servidores e %d dispositivos",
        len(cluster.servers), len(cluster.devices)
    )
    return cluster


def default_testbed_document():
    """4 servidores (2x2 e 2x4 dispositivos de 80 GB), 100 Gb/s entre eles."""
    return {
        'schema_version': 1,
        'device_classes': {
            'a100-80g': {
                'mem_capacity_gb': 80,
                'mem_bandwidth_gbps': 2000,
                'store_bandwidth_gbps': DEFAULT_STORE_GBPS,
            },
        },
        'servers': [
            {'id': f"s{i}", 'intra_bandwidth_gbps': 200,
             'device_class': 'a100-80g', 'device_count': count}
            for i, count in enumerate((2, 2, 4, 4))
        ],
        'inter_server_bandwidth_gbit': 100,
    }


def default_testbed():
    return load_cluster(default_testbed_document())


def path_bandwidth(cluster, src, dst):
    """
    Largura de banda do caminho src -> dst em bytes/s.

    Mesmo dispositivo: infinito (transferência instantânea). Mesmo
    servidor: enlace intra. Caso contrário: mínimo entre as pernas intra
    e o enlace inter-servidor.

    Raises:
        UnknownDeviceError: id inexistente
    """
    if src is not None and src != GATEWAY:
        cluster.device(src)
    link = cluster.path(src, dst)
    return INFINITE_BANDWIDTH if link is None else link.bandwidth_Bps


def _bytes_of(block):
    if block is None:
        return 0
    if isinstance(block, (int, float)):
        return block
    return getattr(block, 'param_bytes', 0)


def swap_time(block_in, block_out, device):
    """
    T_swap = D_b'/B_mem + D_b/B_store, em µs.

    Args:
        block_in: bloco (ou bytes) que entra; D_b
        block_out: bloco(s) (ou bytes) despejados; D_b'. None -> 0
        device: Device de destino
    """
    if isinstance(block_out, (list, tuple)):
        out_bytes = sum(_bytes_of(b) for b in block_out)
    else:
        out_bytes = _bytes_of(block_out)
    in_bytes = _bytes_of(block_in)
    seconds = out_bytes / device.mem_bandwidth_Bps + \
        in_bytes / device.store_bandwidth_Bps
    return round_half_up_us(seconds * US_PER_S)


# ============================================================================
# REDE COM COMPARTILHAMENTO DE BANDA
# ============================================================================


class NetworkModel:
    """
    Transferências concorrentes em um mesmo enlace dividem a banda em
    partes iguais; as taxas são recalculadas a cada chegada ou saída.
    """

    def __init__(self, sim, cluster):
        self.sim = sim
        self.cluster = cluster
        self._next_id = 0
        self._active = {}
        self.bytes_moved = {kind.value: 0 for kind in LinkKind}
        self.completed = []
        sim.on(EventKind.TRANSFER_COMPLETE, self._on_complete)

    def active_on(self, link_key):
        return list(self._active.get(link_key, []))

    def start(self, src, dst, nbytes, on_done=None, tag=None):
        """
        Inicia uma transferência; `on_done(job)` é chamado ao concluir.
        Transferências sem bytes ou no mesmo dispositivo concluem no
        instante atual.
        """
        now = self.sim.now
        link = self.cluster.path(src, dst)
        job = TransferJob(
            id=self._next_id,
            src=src or GATEWAY,
            dst=dst,
            bytes=int(nbytes),
            start=now,
            link_key=link.key if link else None,
            link_kind=link.kind if link else None,
            bandwidth_Bps=link.bandwidth_Bps if link else math.inf,
            tag=tag,
            on_done=on_done,
            remaining=float(nbytes),
            last_update=now,
        )
        self._next_id += 1
        if link is None or job.bytes <= 0:
            job.handle = self.sim.at(now, EventKind.TRANSFER_COMPLETE, job)
            return job
        self._active.setdefault(job.link_key, []).append(job)
        self._reschedule(job.link_key)
        return job

    def _advance(self, jobs):
        now = self.sim.now
        for job in jobs:
            elapsed = now - job.last_update
            if elapsed > 0 and job.rate_Bps > 0:
                job.remaining = max(
                    0.0, job.remaining - job.rate_Bps * elapsed / US_PER_S
                )
            job.last_update = now

    def _reschedule(self, link_key):
        jobs = self._active.get(link_key, [])
        self._advance(jobs)
        share = len(jobs)
        for job in jobs:
            job.rate_Bps = job.bandwidth_Bps / share
            self.sim.cancel(job.handle)
            delay = ceil_us(job.remaining / job.rate_Bps * US_PER_S)
            job.handle = self.sim.at(
                self.sim.now + delay, EventKind.TRANSFER_COMPLETE, job
            )

    def _on_complete(self, event):
        job = event.payload
        job.end = self.sim.now
        if job.link_key is not None:
            jobs = self._active.get(job.link_key, [])
            self._advance(jobs)
            jobs.remove(job)
            job.remaining = 0.0
            self.bytes_moved[str(job.link_kind)] += job.bytes
            if jobs:
                self._reschedule(job.link_key)
            else:
                self._active.pop(job.link_key, None)
        self.completed.append(job)
        if job.on_done is not None:
            job.on_done(job)


# ============================================================================
# PERFIS DE CUSTO
# ============================================================================

SURROGATE_SHAPES = ('attention_only', 'ffn_only', 'single_layer',
                    'multi_layer')


def surrogate_shape(shape):
    """
    Classifica o bloco para escolher o fator de aceleração do substituto.
    Blocos com embedding, lm_head ou adaptadores não têm substituto.
    """
    if shape.get('embedding') or shape.get('lm_head') or \
            shape.get('adapter'):
        return None
    attention = shape.get('attention', 0)
    ffn = shape.get('ffn', 0)
    if attention and not ffn:
        return 'attention_only'
    if ffn and not attention:
        return 'ffn_only'
    if attention == 1 and ffn == 1:
        return 'single_layer'
    if attention or ffn:
        return 'multi_layer'
    return None


class ProfileBook:
    """
    Perfis de custo por bloco, derivados de modelos de camada (templates)
    escalados pelos bytes de parâmetros do bloco.
    """

    def __init__(self, document=None, surcharge_per_branch=0.0):
        document = document or {}
        self.document = document
        self.launch_overhead_us = float(document.get('launch_overhead_us', 0))
        self.templates = {}
        for name, spec in document.get('templates', {}).items():
            self.templates[name] = {
                'device_class': spec.get('device_class', 'default'),
                'layer_param_bytes': float(spec['layer_param_bytes']),
                'kv_per_attention': spec.get(
                    'kv_bytes_per_token_per_attention'
                ),
                'prefill': ProfileGrid.from_dict(
                    spec['prefill'], f"{name}.prefill"
                ),
                'decode': ProfileGrid.from_dict(
                    spec['decode'], f"{name}.decode"
                ),
            }
        self.default_template = document.get('default_template') or \
            next(iter(self.templates), None)
        self.families = dict(document.get('families', {}))
        self.surrogates = dict(document.get('surrogates', {}))
        stitch = document.get('stitch')
        self.stitch_grids = None
        if stitch:
            self.stitch_grids = (
                ProfileGrid.from_dict(stitch['prefill'], 'stitch.prefill'),
                ProfileGrid.from_dict(stitch['decode'], 'stitch.decode'),
            )
        self.surcharge_per_branch = surcharge_per_branch
        self._profiles = {}

    @classmethod
    def from_document(cls, document, surcharge_per_branch=0.0):
        validate_document(document, PROFILES_SCHEMA, 'profiles.json')
        return cls(document, surcharge_per_branch)

    def __contains__(self, block_id):
        return block_id in self._profiles

    def register(self, profile):
        self._profiles[profile.block_id] = profile
        return profile

    def profile(self, block_id, device_class=None):
        """
        Raises:
            MissingProfileError: bloco sem perfil
        """
        try:
            return self._profiles[block_id]
        except KeyError:
            raise MissingProfileError(block_id, device_class) from None

    def comp_time(self, block_id, device, batch, phase, length, branches=1):
        """Custo de computação do bloco no dispositivo (µs)."""
        profile = self.profile(block_id, getattr(device, 'device_class', None))
        return comp_time(profile, batch, phase, length, branches)

    def derive(self, block_id, param_bytes, embed_dim_in, embed_dim_out,
               family, shape, embedding_bytes=0):
        """
        Deriva e registra o perfil de um bloco.

        Args:
            shape: contagem de componentes por tipo
                (attention, ffn, embedding, lm_head, adapter)
            embedding_bytes: bytes de embedding (custo de leitura reduzido)
        """
        template_name = self.families.get(family, self.default_template)
        if template_name not in self.templates:
            raise MissingProfileError(block_id, template_name)
        template = self.templates[template_name]
        effective = max(0.0, param_bytes - 0.9 * embedding_bytes)
        scale = effective / template['layer_param_bytes']
        kv_per_attention = template['kv_per_attention'] or 4 * embed_dim_in

        speedup = None
        kind = surrogate_shape(shape)
        if kind is not None and self.surrogates.get(kind):
            speedup = float(self.surrogates[kind])

        profile = CostProfile(
            block_id=block_id,
            device_class=template['device_class'],
            prefill=template['prefill'].scaled(scale, self.launch_overhead_us),
            decode=template['decode'].scaled(scale, self.launch_overhead_us),
            kv_bytes_per_token=int(shape.get('attention', 0) *
                                   kv_per_attention),
            activation_bytes_per_token=2 * int(embed_dim_out),
            param_bytes=int(param_bytes),
            surrogate_speedup=speedup,
            surrogate_acceptance=(
                self.surrogates.get('acceptance') if speedup else None
            ),
        )
        return self.register(profile)

    def stitch_profile(self, stitch_id, dim_in, dim_out):
        """Perfil de um bloco de costura (dim_in -> dim_out)."""
        if stitch_id in self._profiles:
            return self._profiles[stitch_id]
        if self.stitch_grids is None:
            raise MissingProfileError(stitch_id, 'stitch')
        prefill, decode = self.stitch_grids
        return self.register(CostProfile(
            block_id=stitch_id,
            device_class='default',
            prefill=prefill,
            decode=decode,
            activation_bytes_per_token=2 * int(dim_out),
            param_bytes=4 * int(dim_in) * int(dim_out),
        ))

    def composite(self, block_id, member_ids, branches=1):
        """
        Perfil composto: soma dos perfis dos membros sobre a união das
        grades. Usado pelos modos por-modelo e compartilhamento de
        parâmetros.
        """
        members = [self.profile(member) for member in member_ids]
        profile = CostProfile(
            block_id=block_id,
            device_class=members[0].device_class,
            prefill=ProfileGrid.union([m.prefill for m in members]),
            decode=ProfileGrid.union([m.decode for m in members]),
            kv_bytes_per_token=sum(m.kv_bytes_per_token for m in members),
            activation_bytes_per_token=members[-1].activation_bytes_per_token,
            param_bytes=sum(m.param_bytes for m in members),
            branches=branches,
            surcharge_per_branch=self.surcharge_per_branch,
        )
        return self.register(profile)

    def scaled(self, factor):
        """Cópia do livro com todas as entradas multiplicadas."""
        book = ProfileBook.__new__(ProfileBook)
        book.__dict__.update(self.__dict__)
        book._profiles = {
            key: profile.scaled(factor)
            for key, profile in self._profiles.items()
        }
        return book


def phase_length(phase, prompt_tokens, generated_tokens):
    """Comprimento usado na consulta: prompt no prefill, contexto no decode."""
    if str(phase) == Phase.PREFILL:
        return prompt_tokens
    return prompt_tokens + generated_tokens
