"""
Construção do zoológico de blocos.

O particionamento é preguiçoso: cada modelo base (fundação ou FF) guarda
um conjunto de fronteiras de posição; modelos PE e FF acrescentam
fronteiras e as cadeias de todos os modelos são recalculadas. Blocos são
identificados pela tupla de componentes, então um bloco usado por k
modelos existe uma única vez. Fronteiras só são acrescentadas, nunca
removidas.
"""
import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app_zoo.models import (ATTACH_TARGETS, AttachMode, BlockDescriptor,
                            ComponentDescriptor, ComponentKind,
                            EquivalenceGraph, ModelDescriptor,
                            RangeEquivalence, StitchDescriptor, TuningKind,
                            layer_span_positions, slot_position)
from utils.app_zoo.exceptions import (InvalidTuningError,
                                      SignatureMismatchError,
                                      SubComponentAttachError,
                                      UnknownBlockError, UnknownModelError,
                                      ZeroSignatureError)
from utils.app_zoo.schemas import ZOO_SCHEMA
from utils.commons.documents import validate_document
from utils.commons.validators import simulation_setting

logger = logging.getLogger(__name__)

# Tamanhos publicados de blocos de costura e similaridade de saída.
DEFAULT_STITCHES = (
    (2048, 4096, 0.9634),
    (4096, 5120, 0.9732),
    (5120, 4096, 0.9683),
    (4096, 8192, 0.9798),
    (5120, 8192, 0.9612),
)


# ============================================================================
# ASSINATURAS E SIMILARIDADE
# ============================================================================


def group_layers(n_a, n_b, groups=None):
    """
    Agrupa as camadas de dois modelos em G grupos contíguos.

    G = mdc(n_a, n_b) salvo `groups` explícito; camadas restantes da
    divisão vão para o último grupo.

    Returns:
        list[tuple[int, int]]: tamanhos (grupo_a, grupo_b)
    """
    if n_a < 1 or n_b < 1:
        raise ValueError("contagens de camadas devem ser >= 1")
    count = groups or math.gcd(n_a, n_b)
    count = max(1, min(count, n_a, n_b))
    size_a, size_b = n_a // count, n_b // count
    sizes = [(size_a, size_b)] * count
    sizes[-1] = (n_a - size_a * (count - 1), n_b - size_b * (count - 1))
    return sizes


def group_spans(sizes, side):
    """Faixas [primeira, última] de camadas de cada grupo de um dos lados."""
    spans, start = [], 0
    for pair in sizes:
        spans.append((start, start + pair[side] - 1))
        start += pair[side]
    return spans


def renormalized_mean(vectors):
    """Média aritmética renormalizada para somar 1."""
    mean = np.mean(np.asarray(vectors, dtype=float), axis=0)
    total = mean.sum()
    if total <= 0:
        raise ZeroSignatureError('média de grupo')
    return mean / total


def similarity(a, b):
    """
    Similaridade de cosseno entre dois vetores de probabilidade.

    Raises:
        ZeroSignatureError: algum vetor nulo
        SignatureMismatchError: vocabulários de tamanhos diferentes
    """
    a = np.asarray(getattr(a, 'probs', a), dtype=float)
    b = np.asarray(getattr(b, 'probs', b), dtype=float)
    if a.shape != b.shape:
        raise SignatureMismatchError(
            'similaridade', f"tamanhos {a.shape} e {b.shape}"
        )
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise ZeroSignatureError('similaridade')
    return float(np.dot(a, b) / (norm_a * norm_b))


def load_signatures(path):
    """
    Lê um arquivo de assinaturas: uma linha por camada, índice da camada
    seguido do vetor de probabilidades.

    Returns:
        dict[int, np.ndarray]
    """
    path = Path(path)
    try:
        table = np.loadtxt(path, ndmin=2, delimiter=None)
    except (OSError, ValueError) as exc:
        raise SignatureMismatchError(str(path), str(exc)) from exc
    signatures = {}
    for row in table:
        layer, probs = int(row[0]), row[1:]
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
            raise SignatureMismatchError(
                str(path), f"camada {layer} não normalizada"
            )
        signatures[layer] = probs
    lengths = {len(p) for p in signatures.values()}
    if len(lengths) > 1:
        raise SignatureMismatchError(str(path), "vocabulários diferentes")
    return signatures


def load_signature_dir(directory, model_ids):
    """Carrega `<model>.txt` de cada modelo presente no diretório."""
    result = {}
    for model_id in model_ids:
        path = Path(directory) / f"{model_id}.txt"
        if path.exists():
            result[model_id] = load_signatures(path)
    return result


# ============================================================================
# COSTURA
# ============================================================================


class StitchRegistry:
    """Blocos de costura indexados por (dim_in, dim_out)."""

    def __init__(self, defaults=DEFAULT_STITCHES):
        self._by_dims = {}
        for dim_in, dim_out, quality in defaults:
            self.register(dim_in, dim_out, quality)

    def register(self, dim_in, dim_out, quality):
        if dim_in == dim_out:
            raise ValueError("costura exige dimensões diferentes")
        stitch_id = f"stitch:{dim_in}x{dim_out}"
        descriptor = StitchDescriptor(
            id=stitch_id, dim_in=dim_in, dim_out=dim_out,
            cost_profile_ref=stitch_id, quality_score=quality,
        )
        self._by_dims[(dim_in, dim_out)] = descriptor
        return descriptor

    def get(self, dim_in, dim_out):
        return self._by_dims.get((dim_in, dim_out))

    def by_id(self, stitch_id):
        for descriptor in self._by_dims.values():
            if descriptor.id == stitch_id:
                return descriptor
        return None

    def __iter__(self):
        return iter(sorted(self._by_dims.values(), key=lambda s: s.id))


# ============================================================================
# DESCRITORES DE MODELO
# ============================================================================


def content_digest(*parts):
    return hashlib.sha256('|'.join(str(p) for p in parts).encode()) \
        .hexdigest()[:16]


def component_id(model_id, layer, slot):
    slot = str(slot)
    if slot in (ComponentKind.EMBEDDING, ComponentKind.LM_HEAD):
        return f"{model_id}.{slot}"
    return f"{model_id}.L{layer}.{slot}"


def build_foundation(model_id, num_layers, embed_dim, kind_bytes,
                     tuning_kind=TuningKind.FOUNDATION, foundation_id=None,
                     serves_app=False, quality=1.0):
    """
    Sequência completa de componentes de um modelo base:
    embedding, (attention, ffn) por camada, lm_head.
    """
    components = []

    def add(layer, slot):
        position = slot_position(layer, slot, num_layers)
        cid = component_id(model_id, layer, slot)
        components.append(ComponentDescriptor(
            id=cid,
            kind=str(slot),
            param_bytes=int(kind_bytes[str(slot)]),
            embed_dim=embed_dim,
            position=(model_id, layer, str(slot)),
            content_id=content_digest(cid),
            base_position=position,
        ))

    add(0, ComponentKind.EMBEDDING)
    for layer in range(num_layers):
        for slot in (ComponentKind.ATTENTION, ComponentKind.FFN):
            add(layer, slot)
    add(num_layers - 1, ComponentKind.LM_HEAD)
    return ModelDescriptor(
        id=model_id,
        foundation_id=foundation_id or model_id,
        tuning_kind=str(tuning_kind),
        num_layers=num_layers,
        embed_dim=embed_dim,
        components=components,
        shared_fraction=1.0 if tuning_kind == TuningKind.FOUNDATION else 0.0,
        serves_app=serves_app,
        quality=quality,
    )


def _check_target(model_id, slot):
    if str(slot) not in ATTACH_TARGETS:
        raise SubComponentAttachError(model_id, slot)


def build_pe_model(model_id, foundation, tuning_kind, adapters=(),
                   modified=(), serves_app=True, quality=1.0):
    """
    Modelo PE: componentes da fundação (compartilhados) com componentes
    modificados substituídos e adaptadores inseridos após o alvo.

    Raises:
        SubComponentAttachError: alvo fora de attention/ffn/embedding/lm_head
    """
    if str(tuning_kind) not in {k.value for k in TuningKind} or \
            tuning_kind in (TuningKind.FOUNDATION, TuningKind.FULL_PARAMETER):
        raise InvalidTuningError(model_id, tuning_kind, 'um ajuste PE')
    n = foundation.num_layers

    replaced = {}
    for entry in modified:
        _check_target(model_id, entry['slot'])
        layer = entry.get('layer', 0)
        position = slot_position(layer, entry['slot'], n)
        original = next(
            c for c in foundation.components if c.base_position == position
        )
        cid = component_id(model_id, layer, entry['slot'])
        replaced[position] = ComponentDescriptor(
            id=cid,
            kind=original.kind,
            param_bytes=original.param_bytes,
            embed_dim=original.embed_dim,
            position=(model_id, layer, original.kind),
            content_id=content_digest(cid),
            base_position=position,
        )

    inserted = {}
    for entry in adapters:
        _check_target(model_id, entry['slot'])
        layer = entry.get('layer', 0)
        position = slot_position(layer, entry['slot'], n)
        cid = f"{model_id}.adapter.L{layer}.{entry['slot']}"
        inserted.setdefault(position, []).append((
            entry.get('mode', AttachMode.SERIAL),
            ComponentDescriptor(
                id=cid,
                kind=ComponentKind.ADAPTER.value,
                param_bytes=int(entry['param_bytes']),
                embed_dim=foundation.embed_dim,
                position=(model_id, layer, ComponentKind.ADAPTER.value),
                content_id=content_digest(cid),
                base_position=None,
            ),
        ))

    components = []
    for component in foundation.components:
        position = component.base_position
        components.append(replaced.get(position, component))
        for _, adapter in inserted.get(position, []):
            components.append(adapter)

    model = ModelDescriptor(
        id=model_id,
        foundation_id=foundation.id,
        tuning_kind=str(tuning_kind),
        num_layers=n,
        embed_dim=foundation.embed_dim,
        components=components,
        serves_app=serves_app,
        quality=quality,
    )
    model.attach_modes = {
        position: [str(mode) for mode, _ in entries]
        for position, entries in inserted.items()
    }
    shared = sum(
        c.param_bytes for c in components
        if c.content_id in {f.content_id for f in foundation.components}
    )
    model.shared_fraction = shared / model.param_bytes \
        if model.param_bytes else 0.0
    return model


# ============================================================================
# ZOOLÓGICO
# ============================================================================


class BlockZoo:
    """
    Zoológico de blocos com particionamento preguiçoso e equivalências
    registradas sobre faixas de posições.
    """

    def __init__(self, threshold=None, group_override=None, stitches=None):
        self.threshold = threshold if threshold is not None \
            else simulation_setting('EQUIVALENCE_THRESHOLD')
        self.group_override = dict(group_override or {})
        self.stitches = stitches or StitchRegistry()
        self.models = {}
        self.boundaries = {}
        self.blocks = {}
        self.range_equivalences = {}
        self.graph = EquivalenceGraph(self.threshold)
        self.warnings = []
        self._block_by_key = {}

    # ------------------------------------------------------------------
    # Consultas
    # ------------------------------------------------------------------

    def model(self, model_id):
        try:
            return self.models[model_id]
        except KeyError:
            raise UnknownModelError(model_id) from None

    def block(self, block_id):
        try:
            return self.blocks[block_id]
        except KeyError:
            raise UnknownBlockError(block_id) from None

    def chain_of(self, model_id):
        return list(self.model(model_id).chain)

    def base_of(self, model):
        return model if model.is_base else self.model(model.foundation_id)

    def groups_for(self, n_a, n_b):
        override = self.group_override.get(f"{n_a}x{n_b}") or \
            self.group_override.get(f"{n_b}x{n_a}")
        return group_layers(n_a, n_b, override)

    def served_models(self):
        return [m for _, m in sorted(self.models.items()) if m.serves_app]

    def snapshot(self):
        """Estado comparável (usado para checar idempotência)."""
        return (
            tuple(sorted(
                (b.id, b.components, tuple(sorted(b.origin_models)))
                for b in self.blocks.values()
            )),
            tuple(sorted(
                (m.id, tuple(m.chain)) for m in self.models.values()
            )),
            tuple(self.graph.edges),
        )

    # ------------------------------------------------------------------
    # Registro e particionamento
    # ------------------------------------------------------------------

    def add_foundation(self, model):
        if model.tuning_kind != TuningKind.FOUNDATION:
            raise InvalidTuningError(model.id, model.tuning_kind, 'foundation')
        self.models[model.id] = model
        self.boundaries.setdefault(model.id, set())
        self.rebuild()
        return self

    def partition_pe(self, model, foundation):
        """
        Representa um modelo PE como blocos da fundação mais blocos
        próprios (adaptadores e componentes modificados). Blocos da
        fundação são divididos apenas onde o modelo se anexa.
        """
        if not model.is_pe:
            raise InvalidTuningError(model.id, model.tuning_kind, 'PE')
        if foundation.id not in self.models:
            raise UnknownModelError(foundation.id)
        base = self.base_of(foundation)
        n = base.num_layers
        limit = 2 * n + 1
        wanted = set()
        for component in model.components:
            if component.base_position is None:
                continue
            if component.content_id not in self._base_contents(base):
                p = component.base_position
                wanted.update({p, p + 1})
        for position, modes in getattr(model, 'attach_modes', {}).items():
            wanted.add(position + 1)
            if AttachMode.PARALLEL in modes:
                wanted.add(position)
        self.boundaries[base.id].update(
            b for b in wanted if 1 <= b <= limit
        )
        self.models[model.id] = model
        self.rebuild()
        logger.debug("PE %s particionado sobre %s", model.id, base.id)
        return self

    def partition_ff(self, model, foundation, signatures, threshold=None):
        """
        Particionamento de um modelo FF: grupos de camadas equivalentes
        (similaridade >= limiar) formam corridas máximas; cada corrida vira
        um bloco nos dois modelos e as corridas equivalentes ficam
        registradas como equivalências de faixa.
        """
        if model.tuning_kind != TuningKind.FULL_PARAMETER:
            raise InvalidTuningError(model.id, model.tuning_kind, 'FF')
        threshold = self.threshold if threshold is None else threshold
        base = self.base_of(self.model(foundation.id))
        self.models[model.id] = model
        self.boundaries.setdefault(model.id, set())

        sizes = self.groups_for(model.num_layers, base.num_layers)
        spans_m = group_spans(sizes, 0)
        spans_f = group_spans(sizes, 1)
        status = []
        for span_m, span_f in zip(spans_m, spans_f):
            score = self._group_similarity(
                signatures, model.id, span_m, base.id, span_f
            )
            status.append((score is not None and score >= threshold, score))

        runs = []
        for key, group in itertools.groupby(
                range(len(status)), key=lambda i: status[i][0]):
            indexes = list(group)
            runs.append((key, indexes[0], indexes[-1]))

        for equivalent, first, last in runs:
            if first > 0:
                self.boundaries[model.id].add(
                    layer_span_positions(
                        spans_m[first][0], spans_m[last][1], model.num_layers
                    )[0]
                )
                self.boundaries[base.id].add(
                    layer_span_positions(
                        spans_f[first][0], spans_f[last][1], base.num_layers
                    )[0]
                )
            if equivalent:
                score = min(status[i][1] for i in range(first, last + 1))
                self._record_range(
                    model.id,
                    layer_span_positions(spans_m[first][0], spans_m[last][1],
                                         model.num_layers),
                    base.id,
                    layer_span_positions(spans_f[first][0], spans_f[last][1],
                                         base.num_layers),
                    score,
                )
        self.rebuild()
        return self

    def build_equivalence(self, signatures, threshold=None, pairs=None):
        """
        Compara blocos alinhados a grupos de camadas entre pares de modelos
        base. Pares com similaridade >= limiar ganham aresta (ou
        equivalência de cadeia quando a projeção tem vários blocos).
        Blocos sem assinatura são excluídos com um aviso.
        """
        if threshold is not None:
            self.threshold = threshold
        bases = sorted(m.id for m in self.models.values() if m.is_base)
        if pairs is None:
            pairs = list(itertools.combinations(bases, 2))
        for x_id, y_id in pairs:
            x, y = self.model(x_id), self.model(y_id)
            sizes = self.groups_for(x.num_layers, y.num_layers)
            spans_x, spans_y = group_spans(sizes, 0), group_spans(sizes, 1)
            pos_x = [layer_span_positions(a, b, x.num_layers)
                     for a, b in spans_x]
            pos_y = [layer_span_positions(a, b, y.num_layers)
                     for a, b in spans_y]
            starts = {s: k for k, (s, _) in enumerate(pos_x)}
            ends = {e: k for k, (_, e) in enumerate(pos_x)}
            y_starts = {self.blocks[b].positions[0] for b in y.chain}
            y_ends = {self.blocks[b].positions[1] for b in y.chain}
            for block_id in x.chain:
                p0, p1 = self.blocks[block_id].positions
                if p0 not in starts or p1 not in ends:
                    continue
                k0, k1 = starts[p0], ends[p1]
                span_y = (pos_y[k0][0], pos_y[k1][1])
                if span_y[0] not in y_starts or span_y[1] not in y_ends:
                    continue
                score = self._group_similarity(
                    signatures, x.id, (spans_x[k0][0], spans_x[k1][1]),
                    y.id, (spans_y[k0][0], spans_y[k1][1]),
                )
                if score is None:
                    continue
                if score >= self.threshold:
                    self._record_range(x.id, (p0, p1), y.id, span_y, score)
        self.rebuild()
        return self.graph

    def _base_contents(self, base):
        return {c.content_id for c in base.components}

    def _group_similarity(self, signatures, model_a, span_a, model_b,
                          span_b):
        sig_a = signatures.get(model_a, {})
        sig_b = signatures.get(model_b, {})
        layers_a = range(span_a[0], span_a[1] + 1)
        layers_b = range(span_b[0], span_b[1] + 1)
        missing = [f"{model_a}:{i}" for i in layers_a if i not in sig_a] + \
            [f"{model_b}:{i}" for i in layers_b if i not in sig_b]
        if missing:
            warning = {
                'motivo': 'assinatura ausente',
                'camadas': missing,
            }
            self.warnings.append(warning)
            logger.warning("Assinaturas ausentes: %s", ', '.join(missing))
            return None
        return similarity(
            renormalized_mean([sig_a[i] for i in layers_a]),
            renormalized_mean([sig_b[i] for i in layers_b]),
        )

    def _record_range(self, model_a, span_a, model_b, span_b, score):
        entry = RangeEquivalence(model_a, tuple(span_a), model_b,
                                 tuple(span_b), float(score))
        self.range_equivalences[entry.key] = entry

    # ------------------------------------------------------------------
    # Recomputação de cadeias, blocos e projeções
    # ------------------------------------------------------------------

    def _segments(self, model):
        base = self.base_of(model)
        cuts = self.boundaries.get(base.id, set())
        base_contents = self._base_contents(base)

        def specific(component):
            if model.is_base:
                return False
            return component.base_position is None or \
                component.content_id not in base_contents

        segments = [[model.components[0]]]
        for prev, comp in zip(model.components, model.components[1:]):
            cut = specific(prev) or specific(comp) or \
                comp.base_position in cuts
            if cut:
                segments.append([comp])
            else:
                segments[-1].append(comp)
        return segments

    def _block_for(self, segment, model):
        key = tuple(c.id for c in segment)
        block = self._block_by_key.get(key)
        if block is None:
            first, last = segment[0], segment[-1]
            if len(segment) == 1:
                block_id = first.id
            else:
                suffix = last.id
                prefix = f"{first.model_id}."
                if suffix.startswith(prefix):
                    suffix = suffix[len(prefix):]
                block_id = f"{first.id}..{suffix}"
            shape = {}
            for component in segment:
                shape[component.kind] = shape.get(component.kind, 0) + 1
            owner = self.models.get(first.model_id, model)
            block = BlockDescriptor(
                id=block_id,
                components=key,
                param_bytes=sum(c.param_bytes for c in segment),
                embed_dim_in=first.embed_dim,
                embed_dim_out=last.embed_dim,
                family=self.base_of(owner).foundation_id,
                shape=shape,
                embedding_bytes=sum(
                    c.param_bytes for c in segment
                    if c.kind == ComponentKind.EMBEDDING
                ),
                positions=(first.base_position, last.base_position),
                owner=first.model_id,
            )
            self._block_by_key[key] = block
        return block

    def rebuild(self):
        blocks = {}
        for model_id in sorted(self.models):
            model = self.models[model_id]
            chain = []
            for segment in self._segments(model):
                block = self._block_for(segment, model)
                blocks.setdefault(block.id, block)
                chain.append(block.id)
            model.chain = chain
        for block in blocks.values():
            block.origin_models = {
                m.id for m in self.models.values() if block.id in m.chain
            }
        self.blocks = blocks
        self._block_by_key = {
            k: b for k, b in self._block_by_key.items() if b.id in blocks
        }
        self._project_equivalences()

    def _blocks_covering(self, model_id, span):
        chain = self.models[model_id].chain
        selected, inside = [], False
        for block_id in chain:
            p0, p1 = self.blocks[block_id].positions
            if p0 == span[0]:
                inside = True
            if inside:
                selected.append(block_id)
            if inside and p1 == span[1]:
                return tuple(selected)
        return None

    def _project_equivalences(self):
        graph = EquivalenceGraph(self.threshold)
        for key in sorted(self.range_equivalences):
            entry = self.range_equivalences[key]
            if entry.score < self.threshold:
                continue
            chain_a = self._blocks_covering(entry.model_a, entry.span_a)
            chain_b = self._blocks_covering(entry.model_b, entry.span_b)
            if not chain_a or not chain_b:
                continue
            if len(chain_a) == 1 and len(chain_b) == 1:
                graph.add(chain_a[0], chain_b[0], entry.score)
            else:
                graph.chain_equivalences.append(
                    (chain_a, chain_b, entry.score)
                )
        graph.warnings = list(self.warnings)
        self.graph = graph

    # ------------------------------------------------------------------
    # Análise de redundância
    # ------------------------------------------------------------------

    def redundancy_report(self, model_ids=None):
        """
        naive_bytes = soma dos tamanhos dos modelos servidos;
        dedup_bytes = soma dos content_ids distintos;
        redundancy_fraction = 1 - dedup/naive;
        duplicated_fraction = bytes presentes em >= 2 modelos / naive;
        switch_overhead_fraction = bytes redundantes movidos numa troca
        round-robin cíclica (ordem por id) / bytes movidos.
        """
        if model_ids is None:
            chosen = self.served_models() or \
                [m for _, m in sorted(self.models.items())]
        else:
            chosen = [self.model(m) for m in sorted(model_ids)]
        return redundancy_report(chosen)

    def to_dict(self):
        return {
            'blocks': [
                {
                    'id': b.id,
                    'components': list(b.components),
                    'param_bytes': b.param_bytes,
                    'embed_dim_in': b.embed_dim_in,
                    'embed_dim_out': b.embed_dim_out,
                    'origin_models': sorted(b.origin_models),
                }
                for _, b in sorted(self.blocks.items())
            ],
            'models': [
                {
                    'id': m.id,
                    'foundation_id': m.foundation_id,
                    'tuning_kind': m.tuning_kind,
                    'chain': list(m.chain),
                    'shared_fraction': round(m.shared_fraction, 6),
                }
                for _, m in sorted(self.models.items())
            ],
        }


def redundancy_report(models):
    """Relatório de redundância sobre uma lista de ModelDescriptor."""
    naive = sum(m.param_bytes for m in models)
    contents = {}
    holders = {}
    for model in models:
        for component in model.components:
            contents[component.content_id] = component.param_bytes
            holders.setdefault(component.content_id, set()).add(model.id)
    dedup = sum(contents.values())
    duplicated = sum(
        c.param_bytes for m in models for c in m.components
        if len(holders[c.content_id]) >= 2
    )

    ordered = sorted(models, key=lambda m: m.id)
    moved = redundant = 0
    if len(ordered) > 1:
        for outgoing, incoming in zip(ordered, ordered[1:] + ordered[:1]):
            out_contents = {c.content_id for c in outgoing.components}
            moved += incoming.param_bytes
            redundant += sum(
                c.param_bytes for c in incoming.components
                if c.content_id in out_contents
            )
    return {
        'models': [m.id for m in ordered],
        'naive_bytes': naive,
        'dedup_bytes': dedup,
        'redundancy_fraction': 1 - dedup / naive if naive else 0.0,
        'duplicated_fraction': duplicated / naive if naive else 0.0,
        'switch_overhead_fraction': redundant / moved if moved else 0.0,
        'naive_switch_bytes': moved,
        'blockwise_switch_bytes': moved - redundant,
    }


# ============================================================================
# CATÁLOGO DE SERVIÇO (MODOS)
# ============================================================================


@dataclass
class ServingCatalog:
    """
    O que o escalonador serve: cadeia por modelo, descritores de bloco,
    grafo de equivalência e blocos compostos (modos de referência).
    """
    mode: str
    blocks: dict
    chains: dict
    graph: EquivalenceGraph
    stitches: StitchRegistry
    composites: dict = field(default_factory=dict)
    branches: dict = field(default_factory=dict)
    quality: dict = field(default_factory=dict)

    def block(self, block_id):
        try:
            return self.blocks[block_id]
        except KeyError:
            raise UnknownBlockError(block_id) from None

    def chain_for(self, model_id):
        try:
            return list(self.chains[model_id])
        except KeyError:
            raise UnknownModelError(model_id) from None

    def candidate_instances(self, block_id, adaptive=True):
        if not adaptive:
            self.block(block_id)
            return [(block_id, None)]
        return candidate_instances(self.blocks, block_id, self.graph,
                                   self.stitches)


def candidate_instances(blocks, block_id, graph, stitches):
    """
    O próprio bloco mais cada equivalente; equivalentes com dimensão
    diferente levam a costura necessária, e ficam de fora se ela não
    estiver registrada.

    Returns:
        list[tuple[str, str | None]]
    """
    try:
        source = blocks[block_id]
    except KeyError:
        raise UnknownBlockError(block_id) from None
    candidates = [(block_id, None)]
    for other_id, _ in graph.neighbors(block_id):
        other = blocks.get(other_id)
        if other is None:
            continue
        if other.embed_dim_in == source.embed_dim_in:
            candidates.append((other_id, None))
            continue
        stitch = stitches.get(source.embed_dim_in, other.embed_dim_in)
        if stitch is not None:
            candidates.append((other_id, stitch.id))
    return candidates


def block_catalog(zoo):
    """Modo por blocos: cadeias do zoológico, equivalências ativas."""
    served = zoo.served_models()
    return ServingCatalog(
        mode='block',
        blocks=dict(zoo.blocks),
        chains={m.id: list(m.chain) for m in served},
        graph=zoo.graph,
        stitches=zoo.stitches,
        quality={m.id: m.quality for m in served},
    )


def _monolithic(model, block_id, zoo):
    components = tuple(c.id for c in model.components)
    shape = {}
    for component in model.components:
        shape[component.kind] = shape.get(component.kind, 0) + 1
    return BlockDescriptor(
        id=block_id,
        components=components,
        param_bytes=model.param_bytes,
        embed_dim_in=model.embed_dim,
        embed_dim_out=model.embed_dim,
        origin_models={model.id},
        family=zoo.base_of(model).id if model.is_pe else model.id,
        shape=shape,
        positions=(0, 2 * model.num_layers + 1),
        owner=model.id,
    )


def per_model_catalog(zoo):
    """
    Modo por modelo: um bloco inteiro por modelo servido, sem
    compartilhamento nem roteamento por equivalência.
    """
    blocks, chains, composites = {}, {}, {}
    for model in zoo.served_models():
        block_id = f"pm:{model.id}"
        blocks[block_id] = _monolithic(model, block_id, zoo)
        chains[model.id] = [block_id]
        composites[block_id] = (list(model.chain), 1)
    return ServingCatalog(
        mode='per-model',
        blocks=blocks,
        chains=chains,
        graph=EquivalenceGraph(zoo.threshold),
        stitches=StitchRegistry(defaults=()),
        composites=composites,
        quality={m.id: m.quality for m in zoo.served_models()},
    )


def param_share_catalog(zoo):
    """
    Compartilhamento de parâmetros: modelos PE de uma mesma fundação são
    mesclados numa única instância com um ramo por aplicação; modelos FF
    e fundações sem PE são implantados inteiros.
    """
    blocks, chains, composites, branches = {}, {}, {}, {}
    served = zoo.served_models()
    by_foundation = {}
    for model in served:
        if model.is_pe or model.tuning_kind == TuningKind.FOUNDATION:
            by_foundation.setdefault(
                zoo.base_of(model).id, []
            ).append(model)
        else:
            block_id = f"pm:{model.id}"
            blocks[block_id] = _monolithic(model, block_id, zoo)
            chains[model.id] = [block_id]
            composites[block_id] = (list(model.chain), 1)

    for foundation_id, members in sorted(by_foundation.items()):
        foundation = zoo.model(foundation_id)
        block_id = f"ps:{foundation_id}"
        seen, components, size = set(), [], 0
        member_blocks = []
        for model in [foundation] + members:
            for component in model.components:
                if component.content_id not in seen:
                    seen.add(component.content_id)
                    components.append(component.id)
                    size += component.param_bytes
            for chain_block in model.chain:
                if chain_block not in member_blocks:
                    member_blocks.append(chain_block)
        base_foundation_blocks = set(foundation.chain)
        extra = [b for b in member_blocks if b not in base_foundation_blocks]
        shape = {}
        for component in foundation.components:
            shape[component.kind] = shape.get(component.kind, 0) + 1
        blocks[block_id] = BlockDescriptor(
            id=block_id,
            components=tuple(components),
            param_bytes=size,
            embed_dim_in=foundation.embed_dim,
            embed_dim_out=foundation.embed_dim,
            origin_models={m.id for m in members},
            family=foundation_id,
            shape=shape,
            positions=(0, 2 * foundation.num_layers + 1),
            owner=foundation_id,
        )
        # custo: cadeia da fundação + o maior ramo (adaptadores ficam em
        # paralelo); a sobretaxa por ramo cobre o resto
        composites[block_id] = (
            list(foundation.chain) + _largest_branch(zoo, members, extra),
            len(members),
        )
        for model in members:
            chains[model.id] = [block_id]
            branches[model.id] = block_id
    return ServingCatalog(
        mode='param-share',
        blocks=blocks,
        chains=chains,
        graph=EquivalenceGraph(zoo.threshold),
        stitches=StitchRegistry(defaults=()),
        composites=composites,
        branches=branches,
        quality={m.id: m.quality for m in served},
    )


def _largest_branch(zoo, members, extra):
    best, best_bytes = [], -1
    for model in members:
        own = [b for b in model.chain if b in extra]
        size = sum(zoo.blocks[b].param_bytes for b in own)
        if size > best_bytes:
            best, best_bytes = own, size
    return best


# ============================================================================
# LEITURA DO zoo.json
# ============================================================================


def load_zoo(document, base_dir='.', signatures=None):
    """
    Constrói o zoológico a partir do documento compacto.

    Args:
        document: conteúdo de zoo.json
        base_dir: pasta para resolver `signatures_dir`
        signatures: assinaturas já carregadas (sobrepõe o diretório)

    Returns:
        tuple[BlockZoo, dict]: zoológico e assinaturas usadas
    """
    validate_document(document, ZOO_SCHEMA, 'zoo.json')
    stitches = StitchRegistry()
    for entry in document.get('stitches', []):
        stitches.register(
            entry['dim_in'], entry['dim_out'], entry.get('quality', 1.0)
        )
    zoo = BlockZoo(
        threshold=document.get('threshold'),
        group_override=document.get('group_override'),
        stitches=stitches,
    )

    model_ids = [f['id'] for f in document['foundations']] + \
        [m['id'] for m in document.get('models', [])]
    if signatures is None:
        signatures = {}
        if document.get('signatures_dir'):
            signatures = load_signature_dir(
                Path(base_dir) / document['signatures_dir'], model_ids
            )

    for spec in document['foundations']:
        zoo.add_foundation(build_foundation(
            spec['id'], spec['layers'], spec['embed_dim'], spec['bytes'],
            serves_app=spec.get('serves_app', False),
        ))

    foundation_specs = {f['id']: f for f in document['foundations']}
    specs = document.get('models', [])
    # FF primeiro: PE pode se apoiar em modelos FF
    ordered = sorted(
        specs, key=lambda s: (s['tuning_kind'] != 'full-parameter', s['id'])
    )
    for spec in ordered:
        foundation = zoo.model(spec['foundation'])
        if spec['tuning_kind'] == TuningKind.FULL_PARAMETER:
            base_spec = foundation_specs.get(foundation.id, {})
            model = build_foundation(
                spec['id'],
                spec.get('layers', foundation.num_layers),
                spec.get('embed_dim', foundation.embed_dim),
                spec.get('bytes', base_spec.get('bytes')),
                tuning_kind=TuningKind.FULL_PARAMETER,
                foundation_id=foundation.id,
                serves_app=spec.get('serves_app', True),
                quality=spec.get('quality', 1.0),
            )
            zoo.partition_ff(model, foundation, signatures)
        else:
            model = build_pe_model(
                spec['id'], foundation, spec['tuning_kind'],
                adapters=spec.get('adapters', []),
                modified=spec.get('modified', []),
                serves_app=spec.get('serves_app', True),
                quality=spec.get('quality', 1.0),
            )
            zoo.partition_pe(model, foundation)

    pairs = [tuple(p) for p in document.get('cross_equivalence', [])]
    if pairs:
        zoo.build_equivalence(signatures, pairs=pairs)
    logger.info(
        "Zoológico com %d modelos e %d blocos",
        len(zoo.models), len(zoo.blocks)
    )
    return zoo, signatures
