from django.test import SimpleTestCase

from app_agents.models import Batch, BlockInstance, ChainOfBlocks, Request
from app_agents.services import (backoff_us, enqueue, form_batch,
                                 on_batch_complete)
from app_cluster.models import MemoryCategory, Phase
from app_engine.services import make_rng
from app_metrics.models import StepCategory
from app_scheduler.models import SchedulerConfig
from app_scheduler.tests import lote, montar, perfil, requisicao
from app_workload.models import Arrival
from utils.app_kv.exceptions import KvAllocationError

_seq = iter(range(10 ** 9))


def pedido(fase=Phase.PREFILL):
    rid = f"r{next(_seq)}"
    return Request(
        id=rid, app_id='m', arrival=0, prompt_tokens=8,
        target_output_tokens=4, chain=ChainOfBlocks.from_blocks('m', ['a']),
        generated_tokens=0 if fase == Phase.PREFILL else 1,
    )


def lote_de(tamanho, fase=Phase.PREFILL, prioridade=False):
    membros = [pedido(fase) for _ in range(tamanho)]
    return Batch(
        block_id='a', phase=str(fase), members=membros, formed_at=0,
        priority=prioridade, epochs={r.id: r.epoch for r in membros},
        steps={r.id: 0 for r in membros},
    )


class EnqueueTests(SimpleTestCase):
    """
    Testes da fila FIFO com prioridade estável.
    """

    def setUp(self):
        self.instancia = BlockInstance(id='a@d#0', block_id='a',
                                       device_id='d')

    def test_fila_vazia(self):
        self.assertEqual(enqueue(self.instancia, lote_de(1)), 0)

    def test_prioritario_passa_os_comuns(self):
        for _ in range(3):
            enqueue(self.instancia, lote_de(1))
        self.assertEqual(
            enqueue(self.instancia, lote_de(1, prioridade=True)), 0
        )

    def test_dois_prioritarios_mantem_ordem(self):
        enqueue(self.instancia, lote_de(1))
        primeiro = lote_de(1, prioridade=True)
        segundo = lote_de(1, prioridade=True)
        enqueue(self.instancia, primeiro)
        self.assertEqual(enqueue(self.instancia, segundo), 1)
        self.assertEqual(self.instancia.queue[:2], [primeiro, segundo])


class FormBatchTests(SimpleTestCase):
    """
    Testes da junção de lotes na cabeça da fila.
    """

    def _instancia(self, tamanhos, maximo):
        instancia = BlockInstance(id='a@d#0', block_id='a', device_id='d',
                                  max_batch=maximo)
        for tamanho in tamanhos:
            instancia.queue.append(lote_de(tamanho))
        return instancia

    def test_quatro_seis_oito(self):
        instancia = self._instancia((4, 6, 8), 16)
        self.assertEqual(form_batch(instancia, 0).size, 10)
        self.assertEqual([b.size for b in instancia.queue], [8])

    def test_lote_cheio_sozinho(self):
        instancia = self._instancia((32,), 32)
        self.assertEqual(form_batch(instancia, 0).size, 32)

    def test_sem_divisao(self):
        instancia = self._instancia((20, 20), 32)
        self.assertEqual(form_batch(instancia, 0).size, 20)
        self.assertEqual(len(instancia.queue), 1)

    def test_fila_vazia(self):
        self.assertIsNone(form_batch(self._instancia((), 8), 0))

    def test_fase_diferente_interrompe(self):
        instancia = self._instancia((2,), 16)
        instancia.queue.append(lote_de(2, Phase.DECODE))
        self.assertEqual(form_batch(instancia, 0).size, 2)

    def test_cabeca_obsoleta_descartada(self):
        instancia = self._instancia((3, 5), 16)
        for r in instancia.queue[0].members:
            r.epoch += 1
        formado = form_batch(instancia, 0)
        self.assertEqual(formado.size, 5)
        self.assertEqual(instancia.queue, [])

    def test_juncao_preserva_passos_e_epocas(self):
        instancia = self._instancia((2, 3), 16)
        ids = [r.id for b in instancia.queue for r in b.members]
        formado = form_batch(instancia, 0)
        self.assertEqual(sorted(formado.epochs), sorted(ids))
        self.assertEqual(sorted(formado.steps), sorted(ids))

    def test_propriedade_prefixo_guloso(self):
        rng = make_rng(4, 'form-batch')
        for _ in range(1000):
            maximo = int(rng.integers(1, 40))
            tamanhos = [int(rng.integers(1, maximo + 1))
                        for _ in range(int(rng.integers(1, 8)))]
            instancia = self._instancia(tamanhos, maximo)
            formado = form_batch(instancia, 0)

            esperado, usados = tamanhos[0], 1
            while usados < len(tamanhos) and \
                    esperado + tamanhos[usados] <= maximo:
                esperado += tamanhos[usados]
                usados += 1
            self.assertEqual(formado.size, esperado)
            self.assertLessEqual(formado.size, maximo)
            self.assertEqual([b.size for b in instancia.queue],
                             tamanhos[usados:])


class BatchCompleteTests(SimpleTestCase):
    """
    Testes da saída por EOS e do encaminhamento ao próximo passo.
    """

    def test_eos_misto(self):
        _, escalonador = montar({'m': ['a']}, [perfil('a')], por_servidor=1)
        instancia = escalonador.create_instance('a', 's0-d0', resident=True)
        membros = [
            requisicao(escalonador, f"r{i}", alvo=1 if i < 2 else 3)
            for i in range(8)
        ]
        seguem = on_batch_complete(escalonador, instancia, lote(membros))
        self.assertEqual(len(seguem), 6)
        self.assertTrue(all(r.done for r in membros[:2]))
        self.assertEqual(sorted(escalonador.metrics.records),
                         sorted(r.id for r in membros))
        self.assertEqual(
            sum(1 for r in escalonador.metrics.records.values() if r.done), 2
        )

    def test_ultimo_passo_todos_eos(self):
        sim, escalonador = montar({'m': ['a']}, [perfil('a')],
                                  por_servidor=1)
        instancia = escalonador.create_instance('a', 's0-d0', resident=True)
        membros = [requisicao(escalonador, f"r{i}") for i in range(4)]
        self.assertEqual(
            on_batch_complete(escalonador, instancia, lote(membros)), []
        )
        self.assertEqual(sim.pending, 0)

    def test_vizinho_no_mesmo_dispositivo_sem_custo(self):
        sim, escalonador = montar(
            {'m': ['a', 'b']}, [perfil('a'), perfil('b')], por_servidor=1
        )
        a = escalonador.create_instance('a', 's0-d0', resident=True)
        escalonador.create_instance('b', 's0-d0', resident=True)
        membros = [requisicao(escalonador, f"r{i}") for i in range(2)]
        seguem = on_batch_complete(escalonador, a, lote(membros))
        self.assertEqual(escalonador.transfer_term(seguem, 's0-d0'), 0)
        sim.run()
        self.assertTrue(all(r.done for r in membros))
        self.assertEqual(sum(escalonador.network.bytes_moved.values()), 0)
        for r in membros:
            registro = escalonador.metrics.records[r.id]
            for inicio, fim, categoria in registro.intervals:
                if categoria == StepCategory.TRANSFER:
                    self.assertEqual(inicio, fim)

    def test_causalidade_da_cadeia(self):
        """Cada passo começa depois do anterior terminar."""
        sim, escalonador = montar(
            {'m': ['a', 'b', 'c']},
            [perfil(b, 500 * (i + 1), params=10 ** 8)
             for i, b in enumerate('abc')],
            config=SchedulerConfig(max_batch=4), por_servidor=2,
        )
        escalonador.load([
            Arrival(f"r{i}", i * 300, 'm', 16, 3) for i in range(10)
        ])
        sim.run()
        for rid, registro in escalonador.metrics.records.items():
            computacoes = sorted(
                (s, e) for s, e, c in registro.intervals
                if c == StepCategory.COMPUTE
            )
            self.assertEqual(len(computacoes), 9)
            for (_, fim), (inicio, _) in zip(computacoes, computacoes[1:]):
                self.assertLessEqual(fim, inicio)
        self.assertEqual(len(escalonador.metrics.completed()), 10)
        escalonador.assert_drained()


class ReserveMemoryTests(SimpleTestCase):
    """
    Testes da reserva de KV e ativações de um lote.
    """

    def test_falha_desfaz_paginas_dos_membros_anteriores(self):
        _, escalonador = montar({'m': ['a']}, [perfil('a', kv=20_000_000)],
                                por_servidor=1)
        instancia = escalonador.create_instance('a', 's0-d0', resident=True)
        agente = escalonador.agents['s0-d0']
        pool = escalonador.pools['s0-d0']
        ledger = agente.device.ledger
        antiga = requisicao(escalonador, 'r0', gerados=1)
        pool.alloc('r0', 'a', 16, 20_000_000)
        livre = ledger.free
        membros = [antiga, requisicao(escalonador, 'r1'),
                   requisicao(escalonador, 'r2')]
        with self.assertRaises(KvAllocationError):
            agente._reserve_memory(instancia, lote(membros),
                                   escalonador.profiles.profile('a'))
        self.assertEqual(ledger.free, livre)
        self.assertEqual(pool.segment('r0', 'a').tokens, 16)
        self.assertEqual(len(pool.segment('r0', 'a').pages), 1)
        self.assertFalse(pool.has_segment('r1', 'a'))
        self.assertFalse(pool.has_segment('r2', 'a'))
        self.assertEqual(
            ledger.category_used(MemoryCategory.ACTIVATIONS), 0
        )


class BackoffTests(SimpleTestCase):

    def test_dobra_ate_o_teto(self):
        self.assertEqual([backoff_us(i) for i in range(9)],
                         [100, 200, 400, 800, 1600, 3200, 6400, 10_000,
                          10_000])
