import numpy as np
from django.test import SimpleTestCase

from app_cluster.models import (CostProfile, Device, MemoryCategory,
                                MemoryLedger, Phase, ProfileGrid, comp_time)
from app_cluster.services import (NetworkModel, ProfileBook, default_testbed,
                                  default_testbed_document, load_cluster,
                                  path_bandwidth, swap_time)
from app_engine.services import Simulation, make_rng
from utils.app_cluster.exceptions import (CapacityExhaustedError,
                                          EmptyProfileError, LedgerLeakError,
                                          ProfileError, UnknownDeviceError)
from utils.commons.exceptions import ConfigError, SchemaViolationError
from utils.commons.units import GB


def grid(batches, lengths, values):
    return ProfileGrid(tuple(batches), tuple(lengths), np.array(values, float))


class CompTimeTests(SimpleTestCase):
    """
    Testes da interpolação das tabelas de custo.
    """

    def setUp(self):
        tabela = grid([8, 16], [512, 1024], [[100, 150], [180, 260]])
        self.perfil = CostProfile(
            block_id='b', device_class='a100',
            prefill=tabela, decode=tabela,
        )

    def test_acerto_exato_na_grade(self):
        self.assertEqual(comp_time(self.perfil, 8, Phase.PREFILL, 512), 100)

    def test_ponto_medio_entre_lotes(self):
        """Lote 12 entre 8 (100µs) e 16 (180µs) -> 140µs."""
        self.assertEqual(comp_time(self.perfil, 12, Phase.DECODE, 512), 140)

    def test_bilinear(self):
        # média dos quatro cantos no centro da célula
        self.assertEqual(comp_time(self.perfil, 12, Phase.PREFILL, 768), 173)

    def test_extrapolacao_grampeada(self):
        perfil = CostProfile(
            block_id='b', device_class='a100',
            prefill=grid([2, 4], [8, 16], [[10, 12], [14, 20]]),
            decode=grid([2, 4], [8, 16], [[10, 12], [14, 20]]),
        )
        self.assertEqual(comp_time(perfil, 1, Phase.DECODE, 1), 10)
        self.assertEqual(comp_time(perfil, 64, Phase.DECODE, 4096), 20)

    def test_perfil_vazio(self):
        vazio = CostProfile(
            block_id='x', device_class='a100',
            prefill=grid([], [], []), decode=grid([], [], []),
        )
        with self.assertRaises(EmptyProfileError):
            comp_time(vazio, 1, Phase.PREFILL, 1)

    def test_tabela_decrescente_rejeitada(self):
        with self.assertRaises(ProfileError):
            ProfileGrid.from_dict(
                {'batches': [1, 2], 'lengths': [1], 'us': [[5], [4]]}
            )

    def test_monotonia_preservada(self):
        """comp_time é monótono em lote e comprimento se a tabela é."""
        rng = make_rng(3, 'test-monotone')
        for _ in range(200):
            valores = np.cumsum(
                np.cumsum(rng.integers(0, 50, size=(3, 4)), axis=0), axis=1
            )
            perfil = CostProfile(
                block_id='m', device_class='a100',
                prefill=grid([1, 8, 32], [16, 128, 512, 1024], valores),
                decode=grid([1, 8, 32], [16, 128, 512, 1024], valores),
            )
            lotes = sorted(rng.integers(1, 40, size=2))
            comps = sorted(rng.integers(1, 1200, size=2))
            self.assertLessEqual(
                comp_time(perfil, lotes[0], Phase.PREFILL, comps[0]),
                comp_time(perfil, lotes[1], Phase.PREFILL, comps[1]),
            )

    def test_sobretaxa_por_ramo(self):
        perfil = CostProfile(
            block_id='ps', device_class='a100',
            prefill=grid([1], [1], [[1000]]), decode=grid([1], [1], [[1000]]),
            surcharge_per_branch=0.08,
        )
        self.assertEqual(comp_time(perfil, 1, Phase.DECODE, 1, branches=3),
                         1160)


class SwapAndPathTests(SimpleTestCase):
    """
    Testes de T_swap e da largura de banda de caminho.
    """

    def setUp(self):
        self.device = Device(
            id='d', server_id='s', device_class='a100',
            mem_capacity_bytes=80 * GB, mem_bandwidth_Bps=2000 * GB,
            store_bandwidth_Bps=20 * GB,
        )
        self.cluster = default_testbed()

    def test_swap_com_despejo(self):
        """2 GB saindo a 2000 GB/s e 2 GB entrando a 20 GB/s."""
        self.assertEqual(swap_time(2 * GB, 2 * GB, self.device), 101_000)

    def test_swap_dispositivo_vazio(self):
        self.assertEqual(swap_time(0, None, self.device), 0)

    def test_swap_sem_despejo(self):
        self.device.store_bandwidth_Bps = 10 * GB
        self.assertEqual(swap_time(1 * GB, None, self.device), 100_000)

    def test_mesmo_dispositivo_instantaneo(self):
        self.assertEqual(
            path_bandwidth(self.cluster, 's0-d0', 's0-d0'), float('inf')
        )

    def test_mesmo_servidor(self):
        self.assertEqual(
            path_bandwidth(self.cluster, 's0-d0', 's0-d1'), 200 * GB
        )

    def test_entre_servidores(self):
        """100 Gb/s entre servidores e 200 GB/s intra -> 12,5 GB/s."""
        self.assertEqual(
            path_bandwidth(self.cluster, 's0-d0', 's2-d3'), 12.5e9
        )

    def test_dispositivo_desconhecido(self):
        with self.assertRaises(UnknownDeviceError):
            path_bandwidth(self.cluster, 's0-d0', 'nao-existe')

    def test_topologia_padrao(self):
        self.assertEqual(len(self.cluster.devices), 12)
        self.assertEqual(
            [len(self.cluster.servers[s]) for s in self.cluster.server_ids],
            [2, 2, 4, 4],
        )

    def test_documento_fora_do_schema(self):
        documento = default_testbed_document()
        documento['servers'][0]['intra_bandwidth_gbps'] = -1
        with self.assertRaises(SchemaViolationError) as ctx:
            load_cluster(documento)
        self.assertIn('servers.0.intra_bandwidth_gbps', ctx.exception.message)

    def test_intra_menor_que_inter_rejeitada(self):
        documento = default_testbed_document()
        documento['servers'][0]['intra_bandwidth_gbps'] = 1
        with self.assertRaises(ConfigError):
            load_cluster(documento)


class NetworkModelTests(SimpleTestCase):
    """
    Testes do compartilhamento de banda entre transferências.
    """

    def setUp(self):
        self.sim = Simulation()
        self.rede = NetworkModel(self.sim, default_testbed())
        self.fim = {}

    def _marcar(self, job):
        self.fim[job.tag] = self.sim.now

    def test_transferencia_isolada(self):
        # 1 GB a 12,5 GB/s = 80 ms
        self.rede.start('s0-d0', 's2-d0', GB, self._marcar, 'a')
        self.sim.run()
        self.assertEqual(self.fim['a'], 80_000)

    def test_mesmo_dispositivo_sem_custo(self):
        self.rede.start('s0-d0', 's0-d0', GB, self._marcar, 'a')
        self.sim.run()
        self.assertEqual(self.fim['a'], 0)

    def test_divisao_igual(self):
        """Duas transferências simultâneas no mesmo enlace levam o dobro."""
        self.rede.start('s0-d0', 's2-d0', GB, self._marcar, 'a')
        self.rede.start('s0-d1', 's2-d1', GB, self._marcar, 'b')
        self.sim.run()
        self.assertEqual(self.fim, {'a': 160_000, 'b': 160_000})

    def test_chegada_tardia(self):
        """
        A começa sozinha; B chega em 40 ms. A tem 0,5 GB restantes que
        passam a correr na metade da banda: A termina em 120 ms e B,
        sozinha de novo, em 120 + 40 = 160 ms.
        """
        self.rede.start('s0-d0', 's2-d0', GB, self._marcar, 'a')

        def iniciar_b(event):
            self.rede.start('s0-d1', 's2-d1', GB, self._marcar, 'b')

        self.sim.on('custom', iniciar_b)
        self.sim.at(40_000, 'custom')
        self.sim.run()
        self.assertEqual(self.fim, {'a': 120_000, 'b': 160_000})

    def test_conservacao_de_bytes(self):
        """
        Oráculo por replay de eventos: integrando taxa x tempo de cada
        job entre chegadas e saídas obtém-se os bytes do job.
        """
        rng = make_rng(11, 'test-ps')
        for _ in range(50):
            sim = Simulation()
            rede = NetworkModel(sim, default_testbed())
            jobs = []
            for i, t in enumerate(sorted(rng.integers(0, 100_000, size=4))):
                nbytes = int(rng.integers(1, 4)) * GB // 4

                def iniciar(event, nbytes=nbytes):
                    jobs.append(rede.start('s0-d0', 's3-d0', nbytes))

                sim.on(f"start-{i}", iniciar)
                sim.at(int(t), f"start-{i}")
            sim.run()
            instantes = sorted({j.start for j in jobs} | {j.end for j in jobs})
            for job in jobs:
                movido = 0.0
                for a, b in zip(instantes, instantes[1:]):
                    if job.start <= a and b <= job.end:
                        ativos = sum(
                            1 for j in jobs if j.start <= a and b <= j.end
                        )
                        movido += 12.5e9 / ativos * (b - a) / 1e6
                self.assertAlmostEqual(movido / job.bytes, 1.0, delta=1e-3)
            self.assertEqual(
                rede.bytes_moved['inter'], sum(j.bytes for j in jobs)
            )


class MemoryLedgerTests(SimpleTestCase):
    """
    Testes do livro de memória por dispositivo.
    """

    def test_capacidade_respeitada(self):
        ledger = MemoryLedger('d', 100)
        ledger.allocate(MemoryCategory.PARAMS, 'b1', 60)
        with self.assertRaises(CapacityExhaustedError):
            ledger.allocate(MemoryCategory.KV, 'p1', 41)
        self.assertEqual(ledger.free, 40)

    def test_vazamento_detectado(self):
        ledger = MemoryLedger('d', 100)
        ledger.allocate(MemoryCategory.KV, 'p1', 10)
        with self.assertRaises(LedgerLeakError):
            ledger.assert_drained([MemoryCategory.KV])
        ledger.release(MemoryCategory.KV, 'p1')
        ledger.assert_drained()

    def test_propriedade_nunca_negativo_nem_acima(self):
        """1.000 sequências aleatórias de alocação e liberação."""
        rng = make_rng(5, 'test-ledger')
        categorias = list(MemoryCategory.values)
        for _ in range(1000):
            ledger = MemoryLedger('d', 1000)
            vivos = {}
            for _ in range(30):
                chave = f"k{int(rng.integers(0, 6))}"
                categoria = categorias[int(rng.integers(0, 3))]
                if rng.random() < 0.6:
                    pedido = int(rng.integers(0, 400))
                    try:
                        ledger.allocate(categoria, chave, pedido)
                        vivos[(categoria, chave)] = (
                            vivos.get((categoria, chave), 0) + pedido
                        )
                    except CapacityExhaustedError:
                        self.assertGreater(pedido, ledger.free)
                else:
                    ledger.release(categoria, chave)
                    vivos.pop((categoria, chave), None)
                self.assertGreaterEqual(ledger.free, 0)
                self.assertLessEqual(ledger.used, ledger.capacity)
                self.assertEqual(ledger.used, sum(vivos.values()))
            for categoria, chave in list(vivos):
                ledger.release(categoria, chave)
            ledger.assert_drained()


class ProfileBookTests(SimpleTestCase):
    """
    Testes da derivação de perfis por bloco.
    """

    def setUp(self):
        self.livro = ProfileBook({
            'launch_overhead_us': 10,
            'templates': {
                'camada': {
                    'layer_param_bytes': 1000,
                    'prefill': {'batches': [1], 'lengths': [1],
                                'us': [[100]]},
                    'decode': {'batches': [1], 'lengths': [1], 'us': [[50]]},
                },
            },
            'surrogates': {'single_layer': 20.0, 'acceptance': 0.9},
        }, surcharge_per_branch=0.08)

    def test_escala_por_bytes(self):
        perfil = self.livro.derive(
            'b', 2000, 64, 64, 'qualquer', {'attention': 2, 'ffn': 2}
        )
        self.assertEqual(comp_time(perfil, 1, Phase.DECODE, 1), 110)
        self.assertEqual(perfil.kv_bytes_per_token, 2 * 4 * 64)
        self.assertEqual(perfil.activation_bytes_per_token, 128)

    def test_substituto_por_formato(self):
        camada = self.livro.derive(
            'c', 1000, 64, 64, 'x', {'attention': 1, 'ffn': 1}
        )
        embedding = self.livro.derive(
            'e', 1000, 64, 64, 'x', {'embedding': 1}
        )
        self.assertEqual(camada.surrogate_speedup, 20.0)
        self.assertTrue(camada.has_surrogate)
        self.assertFalse(embedding.has_surrogate)

    def test_perfil_composto(self):
        self.livro.derive('a', 1000, 64, 64, 'x', {'attention': 1})
        self.livro.derive('f', 1000, 64, 64, 'x', {'ffn': 1})
        composto = self.livro.composite('pm', ['a', 'f'], branches=2)
        self.assertEqual(comp_time(composto, 1, Phase.DECODE, 1), 120)
        self.assertEqual(
            comp_time(composto, 1, Phase.DECODE, 1, branches=2), 130
        )
