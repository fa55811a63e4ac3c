import numpy as np
from django.test import SimpleTestCase

from app_zoo.models import EquivalenceGraph, ModelDescriptor, TuningKind
from app_zoo.services import (BlockZoo, StitchRegistry, build_foundation,
                              build_pe_model, block_catalog,
                              candidate_instances, group_layers,
                              param_share_catalog, per_model_catalog,
                              redundancy_report, renormalized_mean,
                              similarity)
from app_engine.services import make_rng
from utils.app_zoo.exceptions import (InvalidTuningError,
                                      SignatureMismatchError,
                                      SubComponentAttachError,
                                      ZeroSignatureError)

BYTES = {'embedding': 100, 'attention': 40, 'ffn': 80, 'lm_head': 100}


def assinaturas(model_id, layers, vetores):
    return {model_id: {i: np.asarray(v, float) for i, v in
                       zip(range(layers), vetores)}}


def zoo_da_figura():
    """
    Fundação com 2 camadas e um modelo FF cuja camada 0 é equivalente e
    a camada 1 não.
    """
    zoo = BlockZoo(threshold=0.98)
    base = build_foundation('base', 2, 64, BYTES)
    zoo.add_foundation(base)
    ff = build_foundation('ff', 2, 64, BYTES,
                          tuning_kind=TuningKind.FULL_PARAMETER,
                          foundation_id='base', serves_app=True)
    sig = {}
    sig.update(assinaturas('base', 2, [[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]]))
    sig.update(assinaturas('ff', 2, [[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]))
    zoo.partition_ff(ff, base, sig)
    return zoo, base


def candidatos(zoo, block_id='a.embedding..lm_head'):
    return candidate_instances(zoo.blocks, block_id, zoo.graph, zoo.stitches)


def cobertura_exata(zoo):
    for model in zoo.models.values():
        componentes = [
            c for block_id in model.chain
            for c in zoo.blocks[block_id].components
        ]
        if componentes != [c.id for c in model.components]:
            return False
    return True


class GroupLayersTests(SimpleTestCase):
    """
    Testes do agrupamento de camadas por mdc.
    """

    def test_identidade(self):
        self.assertEqual(group_layers(32, 32), [(1, 1)] * 32)

    def test_seis_por_oito(self):
        self.assertEqual(group_layers(6, 8), [(3, 4), (3, 4)])

    def test_trinta_e_dois_por_quarenta(self):
        self.assertEqual(group_layers(32, 40), [(4, 5)] * 8)

    def test_override_com_resto_no_ultimo_grupo(self):
        grupos = group_layers(32, 40, groups=3)
        self.assertEqual(len(grupos), 3)
        self.assertEqual(grupos[-1], (12, 14))
        self.assertEqual(sum(a for a, _ in grupos), 32)
        self.assertEqual(sum(b for _, b in grupos), 40)

    def test_contagem_invalida(self):
        with self.assertRaises(ValueError):
            group_layers(0, 4)


class SimilarityTests(SimpleTestCase):
    """
    Testes da similaridade de cosseno.
    """

    def test_vetores_identicos(self):
        self.assertAlmostEqual(similarity([0.2, 0.8], [0.2, 0.8]), 1.0)

    def test_suportes_disjuntos(self):
        self.assertEqual(similarity([1.0, 0.0], [0.0, 1.0]), 0.0)

    def test_meio(self):
        self.assertAlmostEqual(
            similarity([0.5, 0.5, 0.0], [0.5, 0.0, 0.5]), 0.5
        )

    def test_vetor_nulo(self):
        with self.assertRaises(ZeroSignatureError):
            similarity([0.0, 0.0], [0.5, 0.5])

    def test_vocabularios_diferentes(self):
        with self.assertRaises(SignatureMismatchError):
            similarity([1.0], [0.5, 0.5])

    def test_media_renormalizada(self):
        media = renormalized_mean([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(media, [0.5, 0.5])


class PartitionTests(SimpleTestCase):
    """
    Testes do particionamento preguiçoso.
    """

    def test_ff_gera_quatro_blocos_e_um_par_equivalente(self):
        zoo, _ = zoo_da_figura()
        self.assertEqual(len(zoo.blocks), 4)
        self.assertEqual(len(zoo.graph), 1)
        (a, b, score) = zoo.graph.edges[0]
        self.assertEqual({a, b}, {'base.embedding..L0.ffn',
                                  'ff.embedding..L0.ffn'})
        self.assertAlmostEqual(score, 1.0)

    def test_lora_com_attention_modificada_gera_nove_blocos(self):
        zoo, base = zoo_da_figura()
        lora = build_pe_model(
            'lora', base, TuningKind.LORA,
            modified=[{'layer': 0, 'slot': 'attention'},
                      {'layer': 1, 'slot': 'attention'}],
        )
        zoo.partition_pe(lora, base)
        self.assertEqual(len(zoo.blocks), 9)
        self.assertIn('base.L0.ffn', zoo.chain_of('lora'))
        self.assertIn('base.L0.ffn', zoo.chain_of('base'))
        # a equivalência da faixa agora cobre vários blocos da fundação
        self.assertEqual(len(zoo.graph), 0)
        self.assertEqual(len(zoo.graph.chain_equivalences), 1)
        self.assertTrue(cobertura_exata(zoo))

    def test_adaptador_no_lm_head_acrescenta_um_bloco(self):
        zoo = BlockZoo()
        base = build_foundation('base', 2, 64, BYTES)
        zoo.add_foundation(base)
        antes = set(zoo.blocks)
        pe = build_pe_model(
            'pe', base, TuningKind.ADAPTER,
            adapters=[{'layer': 1, 'slot': 'lm_head', 'mode': 'serial',
                       'param_bytes': 7}],
        )
        zoo.partition_pe(pe, base)
        self.assertEqual(set(zoo.blocks) - antes,
                         {'pe.adapter.L1.lm_head'})
        self.assertEqual(zoo.chain_of('base'), list(antes))

    def test_idempotencia(self):
        zoo, base = zoo_da_figura()
        lora = build_pe_model(
            'lora', base, TuningKind.LORA,
            adapters=[{'layer': 0, 'slot': 'attention', 'mode': 'parallel',
                       'param_bytes': 4}],
        )
        zoo.partition_pe(lora, base)
        primeiro = zoo.snapshot()
        zoo.partition_pe(lora, base)
        self.assertEqual(zoo.snapshot(), primeiro)

    def test_adaptador_paralelo_isola_o_alvo(self):
        zoo = BlockZoo()
        base = build_foundation('base', 2, 64, BYTES)
        zoo.add_foundation(base)
        pe = build_pe_model(
            'pe', base, TuningKind.PREFIX,
            adapters=[{'layer': 0, 'slot': 'attention', 'mode': 'parallel',
                       'param_bytes': 4}],
        )
        zoo.partition_pe(pe, base)
        self.assertEqual(
            zoo.chain_of('pe'),
            ['base.embedding', 'base.L0.attention', 'pe.adapter.L0.attention',
             'base.L0.ffn..lm_head'],
        )

    def test_anexo_em_sub_componente(self):
        base = build_foundation('base', 2, 64, BYTES)
        with self.assertRaises(SubComponentAttachError):
            build_pe_model(
                'pe', base, TuningKind.LORA,
                adapters=[{'layer': 0, 'slot': 'attention.q_proj',
                           'param_bytes': 4}],
            )

    def test_pe_exige_ajuste_pe(self):
        zoo, base = zoo_da_figura()
        with self.assertRaises(InvalidTuningError):
            zoo.partition_pe(zoo.model('ff'), base)

    def test_assinatura_ausente_vira_aviso(self):
        zoo = BlockZoo()
        base = build_foundation('base', 2, 64, BYTES)
        zoo.add_foundation(base)
        ff = build_foundation('ff', 2, 64, BYTES,
                              tuning_kind=TuningKind.FULL_PARAMETER,
                              foundation_id='base')
        zoo.partition_ff(ff, base, assinaturas('base', 2, [[1.0], [1.0]]))
        self.assertEqual(len(zoo.graph), 0)
        self.assertTrue(zoo.warnings)

    def test_particao_monotona_em_zoos_aleatorios(self):
        rng = make_rng(7, 'zoo-aleatorio')
        for _ in range(30):
            zoo = BlockZoo()
            layers = int(rng.integers(1, 6))
            base = build_foundation('base', layers, 64, BYTES)
            zoo.add_foundation(base)
            for k in range(int(rng.integers(1, 5))):
                layer = int(rng.integers(0, layers))
                slot = ['attention', 'ffn', 'embedding', 'lm_head'][
                    int(rng.integers(0, 4))]
                mode = ['serial', 'parallel'][int(rng.integers(0, 2))]
                antes = {
                    m: len(zoo.chain_of(m)) for m in zoo.models
                }
                pe = build_pe_model(
                    f"pe{k}", base, TuningKind.ADAPTER,
                    adapters=[{'layer': layer, 'slot': slot, 'mode': mode,
                               'param_bytes': 3}],
                )
                zoo.partition_pe(pe, base)
                for model_id, tamanho in antes.items():
                    self.assertGreaterEqual(
                        len(zoo.chain_of(model_id)), tamanho
                    )
                self.assertTrue(cobertura_exata(zoo))


class EquivalenceTests(SimpleTestCase):
    """
    Testes do grafo de equivalência e das instâncias candidatas.
    """

    def test_limiar(self):
        grafo = EquivalenceGraph(0.98)
        grafo.add('a', 'b', 0.99)
        grafo.add('a', 'c', 0.97)
        grafo.add('a', 'a', 1.0)
        self.assertEqual(len(grafo), 1)
        self.assertEqual(grafo.score('b', 'a'), 0.99)

    def _par(self, dim_b, stitches=None):
        zoo = BlockZoo(stitches=stitches)
        zoo.add_foundation(build_foundation('a', 4, 4096, BYTES))
        zoo.add_foundation(build_foundation('b', 5, dim_b, BYTES))
        vetor = [0.25, 0.25, 0.5]
        sig = {}
        sig.update(assinaturas('a', 4, [vetor] * 4))
        sig.update(assinaturas('b', 5, [vetor] * 5))
        zoo.build_equivalence(sig)
        return zoo

    def test_grafo_completo_com_similaridade_um(self):
        zoo = self._par(4096)
        self.assertEqual(len(zoo.graph), 1)

    def test_bloco_sem_arestas(self):
        zoo = BlockZoo()
        zoo.add_foundation(build_foundation('a', 2, 64, BYTES))
        self.assertEqual(
            candidatos(zoo),
            [('a.embedding..lm_head', None)],
        )

    def test_mesma_dimensao_sem_costura(self):
        zoo = self._par(4096)
        self.assertEqual(
            candidatos(zoo),
            [('a.embedding..lm_head', None), ('b.embedding..lm_head', None)],
        )

    def test_dimensao_diferente_leva_costura(self):
        zoo = self._par(5120)
        self.assertEqual(
            candidatos(zoo),
            [('a.embedding..lm_head', None),
             ('b.embedding..lm_head', 'stitch:4096x5120')],
        )

    def test_sem_costura_registrada(self):
        zoo = self._par(5120, stitches=StitchRegistry(defaults=()))
        self.assertEqual(
            candidatos(zoo),
            [('a.embedding..lm_head', None)],
        )


class RedundancyTests(SimpleTestCase):
    """
    Testes da análise de redundância.
    """

    def test_duas_copias_identicas(self):
        base = build_foundation('base', 2, 64, BYTES)
        copias = [
            ModelDescriptor(id=f"ff{i}", foundation_id='base',
                            tuning_kind=TuningKind.FULL_PARAMETER,
                            num_layers=2, embed_dim=64,
                            components=list(base.components))
            for i in range(2)
        ]
        relatorio = redundancy_report(copias)
        self.assertAlmostEqual(relatorio['redundancy_fraction'], 0.5)
        self.assertAlmostEqual(relatorio['switch_overhead_fraction'], 1.0)
        self.assertEqual(relatorio['blockwise_switch_bytes'], 0)

    def test_tres_lora(self):
        zoo = BlockZoo()
        base = build_foundation(
            'base', 1, 64,
            {'embedding': 4000, 'attention': 6, 'ffn': 4000,
             'lm_head': 1994},
        )
        zoo.add_foundation(base)
        for i in range(3):
            lora = build_pe_model(
                f"lora{i}", base, TuningKind.LORA,
                modified=[{'layer': 0, 'slot': 'attention'}],
            )
            self.assertAlmostEqual(lora.shared_fraction, 0.9994)
            zoo.partition_pe(lora, base)
        relatorio = zoo.redundancy_report()
        self.assertAlmostEqual(
            relatorio['redundancy_fraction'], 0.6663, delta=1e-4
        )

    def test_mistura_tres_por_cinco(self):
        """
        Cinco técnicas PE por fundação com as frações compartilhadas da
        tabela de técnicas. Com y modelos por fundação a deduplicação por
        content_id não passa de (y - 1)/y; a visão de bytes duplicados é a
        que fica acima de 0.85.
        """
        zoo = BlockZoo()
        partes = {'embedding': 500, 'attention': 400, 'ffn': 800,
                  'lm_head': 500}
        tecnicas = [
            (TuningKind.LORA, [{'layer': 2, 'slot': 'attention',
                                'mode': 'parallel', 'param_bytes': 6}],
             0.9994),
            (TuningKind.ADAPTER, [{'layer': 1, 'slot': 'ffn',
                                   'param_bytes': 422},
                                  {'layer': 5, 'slot': 'ffn',
                                   'param_bytes': 423}], 0.9262),
            (TuningKind.PREFIX, [{'layer': 0, 'slot': 'attention',
                                  'mode': 'parallel', 'param_bytes': 13}],
             0.9988),
            (TuningKind.PROMPT, [{'slot': 'embedding', 'param_bytes': 2}],
             0.9998),
            (TuningKind.BITFIT, [{'layer': 3, 'slot': 'ffn',
                                  'mode': 'parallel', 'param_bytes': 10}],
             0.9991),
        ]
        for f in range(3):
            base = build_foundation(f"f{f}", 8, 64, partes)
            zoo.add_foundation(base)
            for tipo, adaptadores, compartilhado in tecnicas:
                pe = build_pe_model(f"f{f}-{tipo.value}", base, tipo,
                                    adapters=adaptadores)
                self.assertAlmostEqual(pe.shared_fraction, compartilhado,
                                       delta=1e-4)
                zoo.partition_pe(pe, base)
        relatorio = zoo.redundancy_report()
        self.assertEqual(len(relatorio['models']), 15)
        self.assertEqual(relatorio['naive_bytes'], 3 * 53_876)
        self.assertEqual(relatorio['dedup_bytes'], 3 * 11_476)
        self.assertAlmostEqual(relatorio['redundancy_fraction'],
                               1 - 11_476 / 53_876)
        self.assertLessEqual(relatorio['redundancy_fraction'], 4 / 5)
        self.assertGreaterEqual(relatorio['duplicated_fraction'], 0.85)

    def test_oraculo_por_content_id(self):
        rng = make_rng(11, 'redundancia')
        for _ in range(50):
            zoo = BlockZoo()
            base = build_foundation(
                'base', int(rng.integers(1, 4)), 64,
                {k: int(rng.integers(1, 500)) for k in BYTES},
            )
            zoo.add_foundation(base)
            for k in range(int(rng.integers(1, 6))):
                layer = int(rng.integers(0, base.num_layers))
                pe = build_pe_model(
                    f"pe{k}", base, TuningKind.LORA,
                    adapters=[{'layer': layer, 'slot': 'attention',
                               'mode': 'parallel',
                               'param_bytes': int(rng.integers(1, 50))}],
                    modified=[{'layer': layer, 'slot': 'ffn'}]
                    if rng.random() < 0.5 else [],
                )
                zoo.partition_pe(pe, base)
            servidos = zoo.served_models()
            distintos = {
                (c.content_id, c.param_bytes)
                for m in servidos for c in m.components
            }
            relatorio = zoo.redundancy_report()
            self.assertEqual(
                relatorio['dedup_bytes'], sum(b for _, b in distintos)
            )
            self.assertEqual(
                relatorio['naive_bytes'],
                sum(m.param_bytes for m in servidos),
            )


class CatalogTests(SimpleTestCase):
    """
    Testes das visões de serviço (por blocos, por modelo e compartilhada).
    """

    def setUp(self):
        self.zoo = BlockZoo()
        base = build_foundation('base', 2, 64, BYTES)
        self.zoo.add_foundation(base)
        for i in range(2):
            self.zoo.partition_pe(build_pe_model(
                f"pe{i}", base, TuningKind.LORA,
                adapters=[{'layer': i, 'slot': 'attention',
                           'mode': 'parallel', 'param_bytes': 10}],
            ), base)

    def test_por_blocos_usa_cadeias_do_zoo(self):
        catalogo = block_catalog(self.zoo)
        self.assertEqual(catalogo.chain_for('pe0'), self.zoo.chain_of('pe0'))

    def test_por_modelo_um_bloco_inteiro(self):
        catalogo = per_model_catalog(self.zoo)
        self.assertEqual(catalogo.chain_for('pe1'), ['pm:pe1'])
        self.assertEqual(
            catalogo.block('pm:pe1').param_bytes,
            self.zoo.model('pe1').param_bytes,
        )
        self.assertEqual(
            catalogo.candidate_instances('pm:pe1'), [('pm:pe1', None)]
        )

    def test_compartilhado_mescla_ramos(self):
        catalogo = param_share_catalog(self.zoo)
        self.assertEqual(catalogo.chain_for('pe0'), ['ps:base'])
        self.assertEqual(catalogo.chain_for('pe1'), ['ps:base'])
        bloco = catalogo.block('ps:base')
        self.assertEqual(bloco.param_bytes,
                         self.zoo.model('base').param_bytes + 20)
        _, ramos = catalogo.composites['ps:base']
        self.assertEqual(ramos, 2)
