"""
Tipos do zoológico de blocos: componentes, blocos, modelos, assinaturas
de camada, grafo de equivalência e blocos de costura.
"""
from dataclasses import dataclass, field

import numpy as np
from django.db import models


class ComponentKind(models.TextChoices):
    ATTENTION = 'attention', 'Attention'
    FFN = 'ffn', 'FFN'
    EMBEDDING = 'embedding', 'Embedding'
    LM_HEAD = 'lm_head', 'LM head'
    ADAPTER = 'adapter', 'Adaptador'


class TuningKind(models.TextChoices):
    FOUNDATION = 'foundation', 'Fundação'
    FULL_PARAMETER = 'full-parameter', 'Ajuste completo (FF)'
    LORA = 'lora', 'LoRA'
    ADAPTER = 'adapter', 'Adapter'
    PREFIX = 'prefix', 'Prefix-tuning'
    BITFIT = 'bitfit', 'BitFit'
    PROMPT = 'prompt', 'Prompt-tuning'


class AttachMode(models.TextChoices):
    # paralelo: o alvo também vira bloco próprio (corte antes e depois)
    PARALLEL = 'parallel', 'Paralelo ao alvo'
    # serial: corte apenas depois do alvo
    SERIAL = 'serial', 'Em série após o alvo'


PE_KINDS = frozenset({
    TuningKind.LORA, TuningKind.ADAPTER, TuningKind.PREFIX,
    TuningKind.BITFIT, TuningKind.PROMPT,
})

LAYER_SLOTS = (ComponentKind.ATTENTION, ComponentKind.FFN)
ATTACH_TARGETS = frozenset({
    ComponentKind.ATTENTION, ComponentKind.FFN, ComponentKind.EMBEDDING,
    ComponentKind.LM_HEAD,
})


def slot_position(layer, slot, num_layers):
    """
    Posição de um componente na sequência da fundação:
    embedding=0, attention_L=1+2L, ffn_L=2+2L, lm_head=2n+1.
    """
    slot = str(slot)
    if slot == ComponentKind.EMBEDDING:
        return 0
    if slot == ComponentKind.LM_HEAD:
        return 2 * num_layers + 1
    if slot == ComponentKind.ATTENTION:
        return 1 + 2 * layer
    return 2 + 2 * layer


def layer_span_positions(first_layer, last_layer, num_layers):
    """
    Faixa de posições de um grupo de camadas; o embedding acompanha o
    primeiro grupo e o lm_head o último.
    """
    start = 0 if first_layer == 0 else 1 + 2 * first_layer
    end = 2 * num_layers + 1 if last_layer == num_layers - 1 \
        else 2 + 2 * last_layer
    return start, end


@dataclass(frozen=True)
class ComponentDescriptor:
    id: str
    kind: str
    param_bytes: int
    embed_dim: int
    position: tuple
    content_id: str
    # posição na sequência do modelo base; None para adaptadores
    base_position: int = None

    @property
    def model_id(self):
        return self.position[0]

    @property
    def layer(self):
        return self.position[1]


@dataclass
class BlockDescriptor:
    id: str
    components: tuple
    param_bytes: int
    embed_dim_in: int
    embed_dim_out: int
    origin_models: set = field(default_factory=set)
    family: str = ''
    shape: dict = field(default_factory=dict)
    embedding_bytes: int = 0
    positions: tuple = ()
    owner: str = ''

    @property
    def is_adapter(self):
        return bool(self.shape.get(ComponentKind.ADAPTER.value))


@dataclass
class AdapterSpec:
    layer: int
    slot: str
    mode: str
    param_bytes: int


@dataclass
class ModelDescriptor:
    id: str
    foundation_id: str
    tuning_kind: str
    num_layers: int
    embed_dim: int
    components: list = field(default_factory=list)
    chain: list = field(default_factory=list)
    shared_fraction: float = 0.0
    serves_app: bool = True
    quality: float = 1.0

    @property
    def param_bytes(self):
        return sum(c.param_bytes for c in self.components)

    @property
    def is_base(self):
        """Fundações e modelos FF possuem sequência própria de posições."""
        return self.tuning_kind in (TuningKind.FOUNDATION,
                                    TuningKind.FULL_PARAMETER)

    @property
    def is_pe(self):
        return self.tuning_kind in PE_KINDS


@dataclass(frozen=True)
class LayerSignature:
    model_id: str
    layer: int
    probs: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class RangeEquivalence:
    """
    Equivalência registrada sobre faixas de posições de dois modelos base;
    projetada nos blocos do particionamento corrente.
    """
    model_a: str
    span_a: tuple
    model_b: str
    span_b: tuple
    score: float

    @property
    def key(self):
        left = (self.model_a, self.span_a)
        right = (self.model_b, self.span_b)
        return tuple(sorted((left, right)))


class EquivalenceGraph:
    """
    Grafo não direcionado de equivalência entre blocos. Toda aresta tem
    score >= limiar e não há laços.
    """

    def __init__(self, threshold=0.98):
        self.threshold = threshold
        self._edges = {}
        self.chain_equivalences = []
        self.warnings = []

    def add(self, a, b, score):
        if a == b or score < self.threshold:
            return False
        key = frozenset((a, b))
        self._edges[key] = max(score, self._edges.get(key, score))
        return True

    def score(self, a, b):
        return self._edges.get(frozenset((a, b)))

    def neighbors(self, block_id):
        result = []
        for key, score in self._edges.items():
            if block_id in key:
                (other,) = tuple(key - {block_id})
                result.append((other, score))
        return sorted(result)

    @property
    def edges(self):
        return sorted(
            (*sorted(key), score) for key, score in self._edges.items()
        )

    def __len__(self):
        return len(self._edges)


@dataclass(frozen=True)
class StitchDescriptor:
    id: str
    dim_in: int
    dim_out: int
    cost_profile_ref: str
    quality_score: float
