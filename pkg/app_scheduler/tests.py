import math

import numpy as np
from django.test import SimpleTestCase

from app_agents.models import Batch, Request
from app_agents.services import forward
from app_cluster.models import (GATEWAY, CostProfile, MemoryCategory,
                                ProfileGrid)
from app_cluster.services import ProfileBook, load_cluster
from app_engine.services import Simulation, make_rng
from app_kv.models import KvPolicy
from app_scheduler.models import (LocalityCounter, PlacementMode,
                                  SchedulerConfig, SpeculationMode,
                                  SpeculationPlan)
from app_scheduler.services import (Scheduler, combine_latency,
                                    expected_counters, place_blocks,
                                    select_speculation, speculation_harness,
                                    surrogate_similarity, validate_plan)
from app_workload.models import Arrival
from app_zoo.models import BlockDescriptor, EquivalenceGraph
from app_zoo.services import ServingCatalog, StitchRegistry
from utils.app_scheduler.exceptions import InvalidSpeculationPlanError
from utils.commons.exceptions import ConfigError


def documento_cluster(servidores=1, por_servidor=2, capacidade_gb=1):
    return {
        'schema_version': 1,
        'device_classes': {
            'g': {'mem_capacity_gb': capacidade_gb,
                  'mem_bandwidth_gbps': 1000, 'store_bandwidth_gbps': 10},
        },
        'servers': [
            {'id': f"s{i}", 'intra_bandwidth_gbps': 100,
             'device_class': 'g', 'device_count': por_servidor}
            for i in range(servidores)
        ],
        'inter_server_bandwidth_gbit': 100,
    }


def grade(base, por_lote=0, por_token=0.0):
    lotes, comprimentos = (1, 64), (1, 4096)
    valores = [
        [base + por_lote * (b - 1) + por_token * (c - 1) for c in comprimentos]
        for b in lotes
    ]
    return ProfileGrid(lotes, comprimentos, np.array(valores, float))


def perfil(block_id, base=1000, por_lote=0, por_token=0.0, params=1000,
           kv=0, act=0, speedup=None, aceite=None):
    tabela = grade(base, por_lote, por_token)
    return CostProfile(
        block_id=block_id, device_class='g', prefill=tabela, decode=tabela,
        kv_bytes_per_token=kv, activation_bytes_per_token=act,
        param_bytes=params, surrogate_speedup=speedup,
        surrogate_acceptance=aceite,
    )


def catalogo(cadeias, equivalentes=()):
    blocos = {b for cadeia in cadeias.values() for b in cadeia}
    blocos |= {b for par in equivalentes for b in par}
    grafo = EquivalenceGraph(0.98)
    for a, b in equivalentes:
        grafo.add(a, b, 0.99)
    return ServingCatalog(
        mode='block',
        blocks={
            b: BlockDescriptor(id=b, components=(), param_bytes=1000,
                               embed_dim_in=64, embed_dim_out=64)
            for b in sorted(blocos)
        },
        chains={m: list(c) for m, c in cadeias.items()},
        graph=grafo,
        stitches=StitchRegistry(defaults=()),
    )


def montar(cadeias, perfis, config=None, equivalentes=(), **cluster):
    sim = Simulation(seed=7)
    livro = ProfileBook()
    for p in perfis:
        livro.register(p)
    escalonador = Scheduler(
        sim, load_cluster(documento_cluster(**cluster)),
        catalogo(cadeias, equivalentes), livro, config or SchedulerConfig(),
    )
    return sim, escalonador


def requisicao(escalonador, rid, app='m', prompt=16, alvo=1, local=GATEWAY,
               gerados=0, registrar=True):
    r = Request(
        id=rid, app_id=app, arrival=escalonador.sim.now,
        prompt_tokens=prompt, target_output_tokens=alvo,
        chain=escalonador.chain_for(app), generated_tokens=gerados,
        location=local,
    )
    if registrar:
        escalonador.requests[rid] = r
        escalonador.metrics.arrival(escalonador.sim.now, rid, app)
    return r


def lote(requisicoes, block_id='a', **extra):
    return Batch(
        block_id=block_id,
        phase=str(requisicoes[0].phase),
        members=list(requisicoes),
        formed_at=0,
        epochs={r.id: r.epoch for r in requisicoes},
        steps={r.id: r.step for r in requisicoes},
        **extra,
    )


class CombineLatencyTests(SimpleTestCase):
    """
    Testes da soma dos quatro fatores.
    """

    def test_dispositivo_ocioso(self):
        """10 + 5 + 0,1 + max(3 - 0,1, 0) = 18,0 ms."""
        estimativa = combine_latency(10_000, 5_000, 100, 3_000,
                                     resident=False, device_busy=False,
                                     block_id='a', device_id='d')
        self.assertEqual(estimativa.total, 18_000)

    def test_dispositivo_ocupado(self):
        estimativa = combine_latency(10_000, 5_000, 100, 3_000,
                                     resident=False, device_busy=True,
                                     block_id='a', device_id='d')
        self.assertEqual(estimativa.load_us, 3_000)
        self.assertEqual(estimativa.total, 18_100)

    def test_residente_sem_fila(self):
        estimativa = combine_latency(0, 5_000, 0, 3_000, resident=True,
                                     device_busy=True, block_id='a',
                                     device_id='d')
        self.assertEqual(estimativa.total, 5_000)

    def test_desempate_por_transferencia(self):
        a = combine_latency(0, 100, 50, 0, True, False, 'a', 'd1', 'x')
        b = combine_latency(0, 120, 30, 0, True, False, 'a', 'd0', 'y')
        self.assertEqual(a.total, b.total)
        self.assertEqual(min((a, b), key=lambda e: e.sort_key()), b)


class EstimatorOracleTests(SimpleTestCase):
    """
    A estimativa de uma requisição isolada diante de uma fila estática
    coincide com a conclusão reproduzida no motor.
    """

    def _caso(self, rng):
        params = int(rng.integers(1, 50)) * 10_000_000
        residente = bool(rng.integers(0, 2))
        sim, escalonador = montar(
            {'m': ['a']},
            [perfil('a', int(rng.integers(200, 5000)),
                    int(rng.integers(0, 200)), float(rng.integers(0, 5)),
                    params=params)],
            config=SchedulerConfig(max_batch=8),
            por_servidor=1,
        )
        instancia = escalonador.create_instance('a', 's0-d0',
                                                resident=residente)
        if residente:
            for i in range(int(rng.integers(0, 5))):
                membros = [
                    requisicao(escalonador, f"q{i}-{j}",
                               prompt=int(rng.integers(1, 512)),
                               local='s0-d0')
                    for j in range(8)
                ]
                instancia.queue.append(lote(membros))
        prompt = int(rng.integers(1, 2048))
        isolada = requisicao(escalonador, 'alvo', prompt=prompt,
                             registrar=False)
        estimativa = escalonador.estimate_latency(lote([isolada]), instancia)
        escalonador.load([Arrival('alvo', 0, 'm', prompt, 1)])
        sim.run()
        return estimativa, escalonador.requests['alvo'].completion

    def test_duzentos_cenarios(self):
        rng = make_rng(11, 'estimador')
        for _ in range(200):
            estimativa, conclusao = self._caso(rng)
            self.assertLessEqual(abs(estimativa.total - conclusao), 1)

    def test_termos_nao_negativos(self):
        rng = make_rng(12, 'estimador')
        for _ in range(20):
            estimativa, _ = self._caso(rng)
            for termo in (estimativa.queue_us, estimativa.compute_us,
                          estimativa.transfer_us, estimativa.load_us):
                self.assertGreaterEqual(termo, 0)


class DispatchTests(SimpleTestCase):
    """
    Testes do despacho: regra do dono do KV, criação de instâncias e
    serviço adaptativo.
    """

    def _dois_dispositivos(self, config=None):
        sim, escalonador = montar(
            {'m': ['a']}, [perfil('a', 1000, params=1000, act=1000)],
            config=config, por_servidor=2,
        )
        x = escalonador.create_instance('a', 's0-d0', resident=True)
        y = escalonador.create_instance('a', 's0-d1', resident=True)
        return escalonador, x, y

    def _encher_fila(self, escalonador, instancia, tamanho):
        for i in range(tamanho):
            r = requisicao(escalonador, f"{instancia.id}-q{i}",
                           local=instancia.device_id)
            instancia.queue.append(lote([r]))

    def test_regra_do_dono_aleatoria(self):
        rng = make_rng(13, 'regra-do-dono')
        for _ in range(1000):
            n = int(rng.integers(2, 5))
            _, escalonador = montar(
                {'m': ['a']}, [perfil('a', 1000, params=1000, act=1000)],
                por_servidor=n,
            )
            instancias = [
                escalonador.create_instance('a', f"s0-d{d}", resident=True)
                for d in range(n)
            ]
            for instancia in instancias:
                self._encher_fila(escalonador, instancia,
                                  int(rng.integers(0, 6)))
            dono = instancias[int(rng.integers(0, n))]
            cheio = bool(rng.random() < 0.5)
            if cheio:
                ledger = escalonador.cluster.device(dono.device_id).ledger
                ledger.allocate(MemoryCategory.PARAMS, 'enchimento',
                                ledger.free - 500)
            membros = []
            for k in range(int(rng.integers(1, 5))):
                r = requisicao(escalonador, f"r{k}", gerados=1,
                               local=dono.device_id)
                r.kv_owner['a'] = dono.id
                membros.append(r)
            escolhido = escalonador.dispatch(lote(membros, kv_owner=dono.id))
            if cheio:
                self.assertIsNotNone(escolhido)
                self.assertIsNot(escolhido, dono)
            else:
                self.assertIs(escolhido, dono)

    def test_dono_mais_lento_ainda_escolhido(self):
        escalonador, x, y = self._dois_dispositivos()
        self._encher_fila(escalonador, x, 2)
        r = requisicao(escalonador, 'r', gerados=1, local='s0-d0')
        escolhido = escalonador.dispatch(lote([r], kv_owner=x.id))
        self.assertIs(escolhido, x)

    def test_least_busy_ignora_o_dono(self):
        escalonador, x, y = self._dois_dispositivos(
            SchedulerConfig(kv_policy=KvPolicy.LEAST_BUSY)
        )
        self._encher_fila(escalonador, x, 2)
        r = requisicao(escalonador, 'r', gerados=1, local='s0-d0')
        escolhido = escalonador.dispatch(lote([r], kv_owner=x.id))
        self.assertIs(escolhido, y)

    def test_cria_instancia_no_unico_dispositivo(self):
        _, escalonador = montar({'m': ['a']}, [perfil('a')], por_servidor=1)
        r = requisicao(escalonador, 'r')
        escolhido = escalonador.dispatch(lote([r]))
        self.assertEqual(escolhido.device_id, 's0-d0')
        self.assertEqual(list(escalonador.instances), [escolhido.id])
        self.assertFalse(escolhido.resident)

    def test_sem_opcao_viavel(self):
        _, escalonador = montar(
            {'m': ['a']}, [perfil('a', params=2 * 10 ** 9)], por_servidor=1
        )
        r = requisicao(escalonador, 'r')
        self.assertIsNone(escalonador.dispatch(lote([r])))
        self.assertIsNone(escalonador.submit(lote([r])))
        self.assertEqual(escalonador.metrics.counters['retries'], 1)
        self.assertEqual(escalonador.sim.pending, 1)

    def test_servico_adaptativo(self):
        _, escalonador = montar(
            {'m': ['a']}, [perfil('a', params=10 ** 8),
                           perfil('a2', params=10 ** 8)],
            equivalentes=[('a', 'a2')], por_servidor=1,
        )
        equivalente = escalonador.create_instance('a2', 's0-d0',
                                                  resident=True)
        r = requisicao(escalonador, 'r', local='s0-d0')
        escolhido = escalonador.dispatch(lote([r]))
        self.assertIs(escolhido, equivalente)
        self.assertTrue(r.adaptive)
        self.assertEqual(escalonador.metrics.counters['adaptive'], 1)

    def test_sem_adaptativo_nao_usa_equivalente(self):
        _, escalonador = montar(
            {'m': ['a']}, [perfil('a', params=10 ** 8),
                           perfil('a2', params=10 ** 8)],
            config=SchedulerConfig(adaptive=False),
            equivalentes=[('a', 'a2')], por_servidor=1,
        )
        escalonador.create_instance('a2', 's0-d0', resident=True)
        escolhido = escalonador.dispatch(
            lote([requisicao(escalonador, 'r', local='s0-d0')])
        )
        self.assertEqual(escolhido.block_id, 'a')

    def test_invariancia_de_escala(self):
        rng = make_rng(5, 'escala')
        for _ in range(50):
            filas = [int(rng.integers(0, 4)) for _ in range(2)]
            base = [int(rng.integers(100, 3000)) for _ in range(2)]
            escolhas = []
            for fator in (1, 3):
                _, escalonador = montar(
                    {'m': ['a']},
                    [perfil('a', base[0], 10).scaled(fator),
                     perfil('a2', base[1], 10).scaled(fator)],
                    equivalentes=[('a', 'a2')], por_servidor=1,
                )
                instancias = [
                    escalonador.create_instance(b, 's0-d0', resident=True)
                    for b in ('a', 'a2')
                ]
                for instancia, tamanho in zip(instancias, filas):
                    self._encher_fila(escalonador, instancia, tamanho)
                r = requisicao(escalonador, 'r', local='s0-d0')
                escolhas.append(escalonador.dispatch(lote([r])).id)
            self.assertEqual(escolhas[0], escolhas[1])

    def test_dono_com_fila_longa_e_rebaixado(self):
        escalonador, x, y = self._dois_dispositivos(
            SchedulerConfig(downgrade_queue_ms=3)
        )
        self._encher_fila(escalonador, x, 5)
        r = requisicao(escalonador, 'r', gerados=1, local='s0-d0')
        escolhido = escalonador.dispatch(lote([r], kv_owner=x.id))
        self.assertIs(escolhido, y)

    def test_rebaixamento_desligado_com_zero(self):
        escalonador, x, y = self._dois_dispositivos(
            SchedulerConfig(downgrade_queue_ms=0)
        )
        self._encher_fila(escalonador, x, 5)
        r = requisicao(escalonador, 'r', gerados=1, local='s0-d0')
        self.assertIs(escalonador.dispatch(lote([r], kv_owner=x.id)), x)

    def test_rebaixamento_ligado_por_padrao(self):
        self.assertIsNotNone(SchedulerConfig().downgrade_queue_us)

    def test_uma_instancia_nova_por_servidor(self):
        _, escalonador = montar(
            {'m': ['a'], 'n': ['b']}, [perfil('a'), perfil('b')],
            servidores=3, por_servidor=4,
        )
        ocupada = escalonador.create_instance('b', 's0-d0', resident=True)
        self._encher_fila(escalonador, ocupada, 3)
        estimativas = escalonador.options(lote([requisicao(escalonador, 'r')]))
        self.assertEqual(len(estimativas), 3)
        self.assertTrue(all(e.is_new for e in estimativas))
        self.assertEqual(sorted(e.device_id for e in estimativas),
                         ['s0-d1', 's1-d0', 's2-d0'])

    def test_dispositivo_da_requisicao_tambem_avaliado(self):
        _, escalonador = montar({'m': ['a']}, [perfil('a')], por_servidor=4)
        r = requisicao(escalonador, 'r', local='s0-d2')
        estimativas = escalonador.options(lote([r]))
        self.assertEqual(sorted(e.device_id for e in estimativas),
                         ['s0-d0', 's0-d2'])
        self.assertEqual(escalonador.dispatch(lote([r])).device_id, 's0-d2')

    def test_dispositivo_cheio_cede_ao_seguinte(self):
        _, escalonador = montar(
            {'m': ['a']}, [perfil('a', params=10 ** 8)], por_servidor=3
        )
        ledger = escalonador.cluster.device('s0-d0').ledger
        ledger.allocate(MemoryCategory.PARAMS, 'enchimento', ledger.free)
        estimativas = escalonador.options(lote([requisicao(escalonador,
                                                           'r')]))
        self.assertEqual([e.device_id for e in estimativas], ['s0-d1'])


class ScalingTests(SimpleTestCase):
    """
    Testes da escala por limiar: max_queue = 20 lotes.
    """

    def _montar(self, dispositivos=2, params=0, por_token=6250, **extra):
        config = SchedulerConfig(max_batch=4, max_sequence_length=1000,
                                 **extra)
        return montar(
            {'m': ['a'], 'n': ['b']},
            [perfil('a', params=params, kv=por_token, act=por_token),
             perfil('b', params=params, kv=por_token, act=por_token)],
            config=config, por_servidor=dispositivos,
        )[1]

    def _fila(self, escalonador, instancia, tamanho):
        for i in range(tamanho):
            r = requisicao(escalonador, f"{instancia.id}-{i}",
                           app='m' if instancia.block_id == 'a' else 'n',
                           local=instancia.device_id)
            instancia.queue.append(lote([r], block_id=instancia.block_id))

    def test_max_queue(self):
        escalonador = self._montar()
        instancia = escalonador.create_instance('a', 's0-d0', resident=True)
        self.assertEqual(escalonador.max_queue_length(instancia), 20)

    def test_oitenta_e_cinco_por_cento_escala(self):
        escalonador = self._montar()
        instancia = escalonador.create_instance('a', 's0-d0', resident=True)
        self._fila(escalonador, instancia, 17)
        acoes = escalonador.check_scaling(0)
        self.assertEqual(len(acoes), 1)
        self.assertTrue(acoes[0]['scaled'])
        self.assertEqual(acoes[0]['device'], 's0-d1')
        self.assertEqual(acoes[0]['moved'], 8)
        replica = escalonador.instances[acoes[0]['replica']]
        self.assertEqual(len(replica.queue), 8)
        self.assertEqual(len(instancia.queue), 9)
        self.assertEqual(escalonador.metrics.counters['scale_actions'], 1)

    def test_oitenta_por_cento_exato_nao_escala(self):
        escalonador = self._montar()
        instancia = escalonador.create_instance('a', 's0-d0', resident=True)
        self._fila(escalonador, instancia, 16)
        self.assertEqual(escalonador.check_scaling(0), [])

    def test_mais_carregada_primeiro(self):
        escalonador = self._montar(dispositivos=3, params=600_000_000,
                                   por_token=2500)
        a = escalonador.create_instance('a', 's0-d0', resident=True)
        b = escalonador.create_instance('b', 's0-d1', resident=True)
        self.assertEqual(escalonador.max_queue_length(a), 20)
        self._fila(escalonador, a, 18)
        self._fila(escalonador, b, 17)
        acoes = escalonador.check_scaling(0)
        self.assertEqual([x['instance'] for x in acoes], [a.id, b.id])
        self.assertTrue(acoes[0]['scaled'])
        self.assertEqual(acoes[0]['device'], 's0-d2')
        self.assertFalse(acoes[1]['scaled'])

    def test_fila_longa_em_tempo_escala(self):
        """Dois lotes de 1 ms passam de 0,8 x 2 ms."""
        escalonador = self._montar(max_queue_delay_ms=2)
        instancia = escalonador.create_instance('a', 's0-d0', resident=True)
        self._fila(escalonador, instancia, 2)
        self.assertTrue(escalonador.needs_scaling(instancia))
        acoes = escalonador.check_scaling(0)
        self.assertTrue(acoes[0]['scaled'])
        self.assertEqual(acoes[0]['moved'], 1)

    def test_fila_curta_em_tempo_nao_escala(self):
        escalonador = self._montar(max_queue_delay_ms=2)
        instancia = escalonador.create_instance('a', 's0-d0', resident=True)
        self._fila(escalonador, instancia, 1)
        self.assertFalse(escalonador.needs_scaling(instancia))
        self.assertEqual(escalonador.check_scaling(0), [])


class BatchLimitTests(SimpleTestCase):
    """
    Lote máximo por bloco: no modo por blocos cresce com as aplicações que
    compartilham o bloco.
    """

    CADEIAS = {'m': ['a', 'b'], 'n': ['a', 'c'], 'o': ['a', 'd'],
               'p': ['e'], 'q': ['e'], 'r': ['e'], 's': ['e'], 't': ['e']}

    def _escalonador(self, modo='block'):
        _, escalonador = montar(
            self.CADEIAS, [perfil(b) for b in 'abcde'],
            config=SchedulerConfig(max_batch=32, max_shared_batch=128),
        )
        escalonador.catalog.mode = modo
        return escalonador

    def test_bloco_compartilhado_junta_aplicacoes(self):
        escalonador = self._escalonador()
        self.assertEqual(escalonador.batch_limit('a'), 96)
        self.assertEqual(escalonador.batch_limit('b'), 32)
        self.assertEqual(escalonador.batch_limit('e'), 128)

    def test_bloco_fora_das_cadeias(self):
        self.assertEqual(self._escalonador().batch_limit('x'), 32)

    def test_referencias_mantem_max_batch(self):
        for modo in ('per-model', 'param-share'):
            self.assertEqual(self._escalonador(modo).batch_limit('e'), 32)

    def test_instancia_nasce_com_o_limite(self):
        instancia = self._escalonador().create_instance('a', 's0-d0')
        self.assertEqual(instancia.max_batch, 96)

    def test_forward_divide_no_limite_do_bloco(self):
        escalonador = self._escalonador()
        requisicoes = [requisicao(escalonador, f"r{i}", app='p')
                       for i in range(130)]
        lotes = forward(escalonador, requisicoes)
        self.assertEqual([b.size for b in lotes], [128, 2])


class SpeculationPlanTests(SimpleTestCase):
    """
    Testes da escolha dos gargalos especulados.
    """

    def test_cota_de_dez_por_cento(self):
        _, escalonador = montar({'m': ['a']}, [perfil('a')], por_servidor=2)
        for i in range(20):
            escalonador.create_instance('a', f"s0-d{i % 2}")
        self.assertEqual(escalonador.speculation_quota(), 2)

    def test_adjacente_descartado(self):
        cadeias = [('a', 'b', 'c', 'd', 'e')]
        ranking = [('i1', 'b'), ('i2', 'c'), ('i3', 'd')]
        self.assertEqual(select_speculation(ranking, 2, cadeias),
                         ['i1', 'i3'])

    def test_bloco_final_pulado(self):
        cadeias = [('a', 'b', 'e')]
        ranking = [('i1', 'e'), ('i2', 'a')]
        self.assertEqual(select_speculation(ranking, 1, cadeias), ['i2'])

    def test_sem_substituto_pulado(self):
        cadeias = [('a', 'b', 'c')]
        ranking = [('i1', 'a'), ('i2', 'b')]
        escolha = select_speculation(ranking, 1, cadeias,
                                     eligible=lambda b: b == 'b')
        self.assertEqual(escolha, ['i2'])

    def test_plano_invalido(self):
        plano = SpeculationPlan(('x', 'y'), {'x': 10, 'y': 10})
        with self.assertRaises(InvalidSpeculationPlanError):
            validate_plan(plano, {'x': 'a', 'y': 'b'}, [('a', 'b', 'c')], 2)
        with self.assertRaises(InvalidSpeculationPlanError):
            validate_plan(plano, {'x': 'a', 'y': 'c'}, [('a', 'b', 'c')], 2)
        with self.assertRaises(InvalidSpeculationPlanError):
            validate_plan(plano, {'x': 'a', 'y': 'c'},
                          [('a', 'b', 'c', 'd')], 1)

    def test_propriedade_plano_valido(self):
        rng = make_rng(9, 'especulacao')
        letras = 'abcdefghij'
        for _ in range(1000):
            cadeias = []
            for _ in range(int(rng.integers(1, 4))):
                tamanho = int(rng.integers(1, 6))
                escolhidas = rng.choice(len(letras), tamanho, replace=False)
                cadeias.append(tuple(letras[i] for i in escolhidas))
            n = int(rng.integers(1, 25))
            blocos = {f"i{k}": letras[int(rng.integers(0, len(letras)))]
                      for k in range(n)}
            ranking = sorted(blocos.items(),
                             key=lambda _: float(rng.random()))
            cota = math.ceil(float(rng.choice([0.1, 0.3, 1.0])) * n)
            escolha = select_speculation(ranking, cota, cadeias)
            plano = SpeculationPlan(tuple(escolha),
                                    {i: 10.0 for i in escolha})
            self.assertTrue(validate_plan(plano, blocos, cadeias, cota))

    def test_plano_do_escalonador(self):
        _, escalonador = montar(
            {'m': ['a', 'b', 'c']},
            [perfil('a', speedup=10), perfil('b', speedup=10),
             perfil('c', speedup=10)],
            config=SchedulerConfig(speculation=SpeculationMode.ON,
                                   speculation_top_k=1.0),
            por_servidor=3,
        )
        for i, b in enumerate('abc'):
            escalonador.create_instance(b, f"s0-d{i}", resident=True)
        plano = escalonador.plan_speculation(0)
        self.assertEqual([escalonador.instances[i].block_id
                          for i in plano.instance_ids], ['a'])
        self.assertEqual(plano.bindings[plano.instance_ids[0]], 10)


class SpeculatedChainTests(SimpleTestCase):
    """
    Cadeia A, B, C de 10 ms cada, substituto 10x mais rápido.
    """

    custos = [10_000, 10_000, 10_000]

    def test_somente_b_correto(self):
        resultado = speculation_harness(self.custos, speculated={1})
        self.assertEqual(resultado['baseline_us'], 30_000)
        self.assertEqual(resultado['completion_us'], 21_000)

    def test_somente_b_errado(self):
        resultado = speculation_harness(self.custos, speculated={1}, wrong_at={1})
        self.assertEqual(resultado['completion_us'], 30_000)
        self.assertEqual(resultado['reduction_us'], 0)

    def test_todos_corretos_limitado_pela_verificacao(self):
        resultado = speculation_harness(self.custos, speculated={0, 1, 2})
        self.assertEqual(resultado['ideal_us'], 3_000)
        self.assertEqual(resultado['completion_us'], 12_000)
        self.assertEqual(resultado['completion_us'], resultado['bound_us'])

    def test_erro_no_primeiro_preserva_mais_que_no_ultimo(self):
        primeiro = speculation_harness(self.custos, speculated={0, 1, 2},
                                       wrong_at={0})
        ultimo = speculation_harness(self.custos, speculated={0, 1, 2},
                                     wrong_at={2})
        self.assertEqual(primeiro['completion_us'], 21_000)
        self.assertEqual(ultimo['reduction_us'], 0)
        self.assertGreater(primeiro['reduction_us'], ultimo['reduction_us'])

    def test_erro_no_ultimo_sem_reducao_em_cadeias_aleatorias(self):
        rng = make_rng(11, 'harness')
        for _ in range(1000):
            n = int(rng.integers(1, 7))
            custos = [int(c) for c in rng.integers(100, 50_000, n)]
            especulados = {i for i in range(n - 1) if rng.random() < 0.5}
            especulados.add(n - 1)
            resultado = speculation_harness(
                custos, speculated=especulados, wrong_at={n - 1},
                speedups=int(rng.integers(2, 20)),
            )
            self.assertEqual(resultado['reduction_us'], 0)
            self.assertLessEqual(resultado['bound_us'],
                                 resultado['baseline_us'])

    def test_aceleracao_por_passo(self):
        resultado = speculation_harness(self.custos, speculated={0},
                                        speedups={0: 2})
        self.assertEqual(resultado['completion_us'], 25_000)


class SurrogateSimilarityTests(SimpleTestCase):

    def test_limiar_de_referencia_reproduz_a_taxa(self):
        sorteios = make_rng(2, 'similaridade').random(1000)
        aceitos = sum(surrogate_similarity(0.3, u) >= 0.95 for u in sorteios)
        self.assertEqual(aceitos, int((sorteios < 0.3).sum()))

    def test_limiar_mais_exigente_aceita_menos(self):
        sorteios = make_rng(2, 'similaridade').random(1000)
        contagens = [
            sum(surrogate_similarity(0.8, u) >= limiar for u in sorteios)
            for limiar in (0.9, 0.95, 0.98, 0.999)
        ]
        self.assertEqual(contagens, sorted(contagens, reverse=True))
        self.assertEqual(contagens[0], 1000)
        self.assertLess(contagens[-1], contagens[1])

    def test_sem_aceite_nunca_passa(self):
        self.assertLess(surrogate_similarity(0.0, 0.0), 0.5)

    def test_limiar_da_configuracao_rejeita_substituto_perfeito(self):
        config = SchedulerConfig(
            speculation=SpeculationMode.ON, speculation_top_k=1.0,
            surrogate_accept_threshold=1.0,
        )
        sim, escalonador = montar(
            {'m': ['a', 'b', 'c']},
            [perfil(b, 10_000, params=10 ** 8, act=64, speedup=10,
                    aceite=1.0) for b in 'abc'],
            config=config, por_servidor=3,
        )
        for i, b in enumerate('abc'):
            escalonador.create_instance(b, f"s0-d{i}", resident=True)
        escalonador.plan_speculation(0)
        escalonador.load([Arrival('r', 0, 'm', 32, 2)])
        sim.run()
        contadores = escalonador.metrics.counters
        self.assertTrue(escalonador.requests['r'].done)
        self.assertGreater(contadores['speculation_attempts'], 0)
        self.assertEqual(contadores['speculation_rejects'],
                         contadores['speculation_attempts'])


class SpeculationRuntimeTests(SimpleTestCase):
    """
    Com aceite certo e α = 1 a especulação nunca atrasa uma requisição.
    """

    def _rodar(self, especular, custos, saida):
        config = SchedulerConfig(
            speculation=SpeculationMode.ON if especular
            else SpeculationMode.OFF,
            speculation_top_k=1.0, alpha=1.0,
        )
        sim, escalonador = montar(
            {'m': ['a', 'b', 'c']},
            [perfil(b, custo, params=10 ** 8, act=64, speedup=10, aceite=1.0)
             for b, custo in zip('abc', custos)],
            config=config, por_servidor=3,
        )
        for i, b in enumerate('abc'):
            escalonador.create_instance(b, f"s0-d{i}", resident=True)
        if especular:
            escalonador.plan_speculation(0)
        escalonador.load([Arrival('r', 0, 'm', 32, saida)])
        sim.run()
        return escalonador

    def test_nunca_mais_lento(self):
        rng = make_rng(21, 'especulacao-runtime')
        for _ in range(10):
            custos = [int(rng.integers(1000, 20000)) for _ in range(3)]
            saida = int(rng.integers(1, 4))
            sem = self._rodar(False, custos, saida)
            com = self._rodar(True, custos, saida)
            self.assertTrue(com.requests['r'].done)
            self.assertLessEqual(com.requests['r'].completion,
                                 sem.requests['r'].completion)
            self.assertGreater(
                com.metrics.counters['speculation_attempts'], 0
            )
            self.assertEqual(com.metrics.counters['speculation_rejects'], 0)
            com.assert_drained()

    def test_rejeicao_refaz_a_jusante(self):
        escalonador = self._rodar(False, [5000, 5000, 5000], 1)
        self.assertEqual(escalonador.metrics.counters['speculation_attempts'],
                         0)
        config = SchedulerConfig(speculation=SpeculationMode.ON,
                                 speculation_top_k=1.0,
                                 surrogate_acceptance=0.0)
        sim, escalonador = montar(
            {'m': ['a', 'b', 'c']},
            [perfil(b, 5000, params=10 ** 8, act=64, speedup=10)
             for b in 'abc'],
            config=config, por_servidor=3,
        )
        for i, b in enumerate('abc'):
            escalonador.create_instance(b, f"s0-d{i}", resident=True)
        escalonador.plan_speculation(0)
        escalonador.load([Arrival('r', 0, 'm', 32, 2)])
        sim.run()
        r = escalonador.requests['r']
        self.assertTrue(r.done)
        self.assertEqual(r.generated_tokens, 2)
        self.assertEqual(escalonador.metrics.counters['speculation_rejects'],
                         escalonador.metrics.counters['speculation_attempts'])
        self.assertGreater(r.epoch, 0)


class PlacementTests(SimpleTestCase):
    """
    Testes do posicionamento por localidade e do first-fit-decreasing.
    """

    def setUp(self):
        self.servidores = {
            's0-d0': 's0', 's0-d1': 's0', 's1-d0': 's1', 's1-d1': 's1',
        }

    def test_par_no_mesmo_servidor(self):
        livre = {d: 500 for d in self.servidores}
        posicao = place_blocks(PlacementMode.LOCALITY, {('A', 'B'): 10},
                               {'A': 400, 'B': 400}, livre, self.servidores)
        servidores = {self.servidores[d] for _, d in posicao.assignments}
        self.assertEqual(len(posicao.assignments), 2)
        self.assertEqual(len(servidores), 1)

    def test_par_grande_demais_pulado(self):
        servidores = {'s0-d0': 's0', 's1-d0': 's1'}
        livre = {'s0-d0': 1000, 's1-d0': 1000}
        blocos = {'A': 900, 'B': 900, 'C': 50, 'D': 50}
        posicao = place_blocks(
            PlacementMode.LOCALITY, {('A', 'B'): 100, ('C', 'D'): 10},
            blocos, livre, servidores,
        )
        self.assertIn(('A', 'B'), posicao.skipped)
        c, d = posicao.devices_of('C'), posicao.devices_of('D')
        self.assertEqual(servidores[c[0]], servidores[d[0]])
        self.assertEqual(len(posicao.devices_of('A')), 1)
        self.assertEqual(len(posicao.devices_of('B')), 1)

    def test_par_mais_quente_primeiro(self):
        livre = {d: 1000 for d in self.servidores}
        posicao = place_blocks(
            PlacementMode.LOCALITY, {('A', 'B'): 1000, ('C', 'D'): 10},
            {b: 100 for b in 'ABCD'}, livre, self.servidores,
        )
        self.assertEqual({b for b, _ in posicao.assignments[:2]}, {'A', 'B'})

    def test_par_separado_ganha_replica(self):
        livre = {d: 1000 for d in self.servidores}
        posicao = place_blocks(
            PlacementMode.LOCALITY, {('A', 'B'): 5},
            {'A': 300, 'B': 100}, livre, self.servidores,
            existing={'A': ['s0-d0'], 'B': ['s1-d0']},
        )
        self.assertEqual(posicao.assignments, [('B', 's0-d0')])

    def test_first_fit_decreasing(self):
        livre = {'s0-d0': 500, 's0-d1': 500}
        posicao = place_blocks(
            PlacementMode.FRAG_MIN, {('A', 'B'): 1000},
            {'A': 100, 'B': 300, 'C': 250}, livre,
            {'s0-d0': 's0', 's0-d1': 's0'},
        )
        self.assertEqual(posicao.assignments,
                         [('B', 's0-d0'), ('C', 's0-d1'), ('A', 's0-d0')])

    def test_contadores_esperados(self):
        chegadas = [Arrival('r0', 0, 'm', 8, 5), Arrival('r1', 0, 'm', 8, 3)]
        contadores = expected_counters({'m': ['a', 'b', 'c']}, chegadas)
        self.assertEqual(contadores, {('a', 'b'): 8, ('b', 'c'): 8})

    def test_janela_de_localidade(self):
        contador = LocalityCounter(window_us=100)
        contador.record('b', 'a', 0, 3)
        contador.record('a', 'b', 150, 2)
        self.assertEqual(contador.counts(120), {('a', 'b'): 2})


class SchedulerConfigTests(SimpleTestCase):

    def test_fracao_invalida(self):
        with self.assertRaises(ConfigError) as ctx:
            SchedulerConfig(scale_threshold=1.5)
        self.assertIn('scheduler.scale_threshold', ctx.exception.errors)

    def test_alpha_menor_que_um(self):
        with self.assertRaises(ConfigError):
            SchedulerConfig(alpha=0.5)
