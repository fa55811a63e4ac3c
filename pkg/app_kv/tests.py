import math

from django.test import SimpleTestCase

from app_cluster.models import Device, MemoryCategory
from app_engine.services import make_rng
from app_kv.models import KvPage, KvPolicy, KvSegment
from app_kv.services import (InterceptionTracker, KvPool, meet_point,
                             order_migrations, pages_for, plan_migration,
                             policy_rates, reclaim_duplicates,
                             should_migrate_proactively)
from utils.app_kv.exceptions import KvAllocationError, MigrationRefusedError


def dispositivo(device_id='d0', capacidade=1_000_000):
    return Device(
        id=device_id, server_id='s0', device_class='a100',
        mem_capacity_bytes=capacidade, mem_bandwidth_Bps=1e12,
        store_bandwidth_Bps=1e10,
    )


def segmento(paginas, device='d0', request_id='r0', block_id='b'):
    seg = KvSegment(request_id=request_id, block_id=block_id, device=device,
                    bytes_per_token=1)
    for i in range(paginas):
        seg.pages.append(KvPage(
            id=f"p{i}", device=device, block_id=block_id, bytes=16,
            span=(16 * i, 16 * (i + 1)), refs={request_id},
        ))
    seg.tokens = 16 * paginas
    return seg


def replay(paginas, r_rec, r_cp):
    """Reprodução página a página: a frente que termina primeiro avança."""
    recomputadas = copiadas = 0
    instante = 0.0
    while recomputadas + copiadas < paginas:
        proxima_rec = (recomputadas + 1) / r_rec if r_rec > 0 else math.inf
        proxima_cp = (copiadas + 1) / r_cp if r_cp > 0 else math.inf
        if proxima_rec <= proxima_cp:
            recomputadas += 1
            instante = proxima_rec
        else:
            copiadas += 1
            instante = proxima_cp
    return instante


class KvPoolTests(SimpleTestCase):
    """
    Testes da alocação paginada e da contagem de referências.
    """

    def setUp(self):
        self.device = dispositivo()
        self.pool = KvPool(self.device, tokens_per_page=16)

    def test_dezesseis_tokens_uma_pagina(self):
        seg = self.pool.alloc('r1', 'b', 16, bytes_per_token=10)
        self.assertEqual(len(seg.pages), 1)
        self.assertEqual(seg.pages[0].bytes, 160)

    def test_dezessete_tokens_duas_paginas(self):
        seg = self.pool.alloc('r1', 'b', 17, bytes_per_token=10)
        self.assertEqual(len(seg.pages), 2)

    def test_prefixo_compartilhado(self):
        a = self.pool.alloc('r1', 'b', 40, 10, prefix_key='app', prefix_tokens=32)
        b = self.pool.alloc('r2', 'b', 40, 10, prefix_key='app', prefix_tokens=32)
        self.assertEqual(a.pages[:2], b.pages[:2])
        self.assertEqual(a.pages[0].ref_count, 2)
        self.assertNotEqual(a.pages[2].id, b.pages[2].id)
        self.assertEqual(len(self.pool.pages), 4)
        self.assertEqual(a.ref, 2)

    def test_prefixo_em_outro_bloco_nao_compartilha(self):
        self.pool.alloc('r1', 'b', 32, 10, prefix_key='app', prefix_tokens=32)
        self.pool.alloc('r2', 'c', 32, 10, prefix_key='app', prefix_tokens=32)
        self.assertEqual(len(self.pool.pages), 4)

    def test_append_no_decode(self):
        self.pool.alloc('r1', 'b', 16, 10)
        seg = self.pool.append('r1', 'b', 1)
        self.assertEqual(len(seg.pages), 2)
        self.assertEqual(seg.tokens, 17)

    def test_capacidade_esgotada(self):
        pool = KvPool(dispositivo(capacidade=300), tokens_per_page=16)
        with self.assertRaises(KvAllocationError):
            pool.alloc('r1', 'b', 32, 10)
        self.assertEqual(pool.bytes_live, 0)

    def test_liberacao_compartilhada(self):
        self.pool.alloc('r1', 'b', 32, 10, prefix_key='app', prefix_tokens=32)
        self.pool.alloc('r2', 'b', 32, 10, prefix_key='app', prefix_tokens=32)
        self.assertEqual(self.pool.release('r1', 'b'), 0)
        self.assertEqual(self.pool.release('r2', 'b'), 320)
        self.device.ledger.assert_drained()

    def test_truncar_devolve_paginas_do_decode(self):
        self.pool.alloc('r1', 'b', 16, 10)
        self.pool.append('r1', 'b', 17)
        self.assertEqual(self.pool.truncate('r1', 'b', 16), 320)
        seg = self.pool.segment('r1', 'b')
        self.assertEqual((len(seg.pages), seg.tokens), (1, 16))
        self.assertEqual(self.device.ledger.category_used(MemoryCategory.KV),
                         160)

    def test_contagem_segura_aleatoria(self):
        rng = make_rng(3, 'kv-pool')
        for _ in range(1000):
            device = dispositivo(capacidade=int(rng.integers(400, 4000)))
            pool = KvPool(device, tokens_per_page=16)
            vivos = set()
            for i in range(int(rng.integers(5, 40))):
                sorteio = rng.random()
                if vivos and sorteio < 0.3:
                    chave = sorted(vivos)[int(rng.integers(0, len(vivos)))]
                    pool.release(*chave)
                    vivos.discard(chave)
                elif vivos and sorteio < 0.5:
                    chave = sorted(vivos)[int(rng.integers(0, len(vivos)))]
                    try:
                        pool.append(*chave, int(rng.integers(1, 20)))
                    except KvAllocationError:
                        pass
                elif vivos and sorteio < 0.6:
                    chave = sorted(vivos)[int(rng.integers(0, len(vivos)))]
                    tokens = pool.segment(*chave).tokens
                    pool.truncate(*chave, int(rng.integers(0, tokens + 1)))
                else:
                    chave = (f"r{i}", f"b{int(rng.integers(0, 3))}")
                    try:
                        pool.alloc(
                            *chave, int(rng.integers(1, 80)), 8,
                            prefix_key=f"app{int(rng.integers(0, 2))}",
                            prefix_tokens=32,
                        )
                        vivos.add(chave)
                    except KvAllocationError:
                        pass
                self.assertEqual(
                    pool.bytes_live,
                    device.ledger.category_used(MemoryCategory.KV),
                )
                for page in pool.pages.values():
                    self.assertGreaterEqual(page.ref_count, 1)
                    self.assertTrue(all(
                        pool.has_segment(r, page.block_id) for r in page.refs
                    ))
            for chave in list(vivos):
                pool.release(*chave)
            device.ledger.assert_drained()

    def test_compartilhamento_nunca_aumenta_paginas(self):
        rng = make_rng(5, 'kv-dedup')
        for _ in range(20):
            com = KvPool(dispositivo(), tokens_per_page=16)
            sem = KvPool(dispositivo(), tokens_per_page=16)
            for r in range(int(rng.integers(1, 10))):
                tokens = int(rng.integers(1, 100))
                com.alloc(f"r{r}", 'b', tokens, 4, prefix_key='app',
                          prefix_tokens=32)
                sem.alloc(f"r{r}", 'b', tokens, 4)
            self.assertLessEqual(len(com.pages), len(sem.pages))

    def test_paginas_para(self):
        self.assertEqual(pages_for(0, 16), 0)
        self.assertEqual(pages_for(33, 16), 3)


class MigrationTests(SimpleTestCase):
    """
    Testes do plano de migração com recomputação e cópia sobrepostas.
    """

    def test_cem_paginas(self):
        plano = plan_migration(segmento(100), 'd1', 5 / 1000, 10 / 1000)
        self.assertAlmostEqual(plano.completion_us, 6667, delta=50)
        self.assertEqual(plano.recomputed_pages, 33)
        self.assertEqual(plano.copied_pages, 67)

    def test_sem_recomputacao(self):
        plano = plan_migration(segmento(100), 'd1', 0.0, 10 / 1000)
        self.assertEqual(plano.recomputed_pages, 0)
        self.assertEqual(plano.completion_us, 10_000)

    def test_pagina_unica_vai_para_o_caminho_mais_rapido(self):
        recomputadas, conclusao = meet_point(1, 2 / 1000, 1 / 1000)
        self.assertEqual(recomputadas, 1)
        self.assertAlmostEqual(conclusao, 500)

    def test_mesmo_dispositivo_recusado(self):
        with self.assertRaises(MigrationRefusedError):
            plan_migration(segmento(3), 'd0', 1.0, 1.0)

    def test_destino_sem_espaco_recusado(self):
        pool = KvPool(dispositivo('d1', capacidade=100), tokens_per_page=16)
        with self.assertRaises(MigrationRefusedError):
            plan_migration(segmento(10), 'd1', 1.0, 1.0, dst_pool=pool)

    def test_oraculo_de_replay(self):
        rng = make_rng(13, 'kv-meet')
        for _ in range(200):
            paginas = int(rng.integers(1, 300))
            r_rec = float(rng.uniform(0, 0.05)) if rng.random() > 0.1 else 0.0
            r_cp = float(rng.uniform(0.001, 0.05))
            recomputadas, conclusao = meet_point(paginas, r_rec, r_cp)
            self.assertTrue(0 <= recomputadas <= paginas)
            esperado = replay(paginas, r_rec, r_cp)
            self.assertAlmostEqual(conclusao, esperado, delta=1e-6 * esperado)

    def test_politicas(self):
        self.assertEqual(policy_rates(KvPolicy.BEST_EFFORT, 1, 2), (1, 2))
        self.assertEqual(policy_rates(KvPolicy.RECALC_ONLY, 1, 2), (1, 0.0))
        self.assertEqual(policy_rates(KvPolicy.LEAST_BUSY, 1, 2), (0.0, 2))

    def test_decisao_proativa(self):
        plano = plan_migration(segmento(100), 'd1', 5 / 1000, 10 / 1000)
        self.assertTrue(should_migrate_proactively(plano, 10_000, now=50))
        self.assertFalse(should_migrate_proactively(plano, 5_000, now=50))
        self.assertFalse(should_migrate_proactively(plano, None, now=50))


class OrderingTests(SimpleTestCase):
    """
    Testes da ordem de migração por páginas compartilhadas.
    """

    def _com_ref(self, request_id, compartilhadas, retomada):
        seg = segmento(4, request_id=request_id)
        for page in seg.pages[:compartilhadas]:
            page.refs.add('outro')
        seg.resume_time_estimate = retomada
        return seg

    def test_refs(self):
        segs = [self._com_ref('a', 3, 0), self._com_ref('b', 1, 0),
                self._com_ref('c', 2, 0)]
        self.assertEqual(
            [s.request_id for s in order_migrations(segs)], ['b', 'c', 'a']
        )

    def test_desempate_por_retomada(self):
        segs = [self._com_ref('a', 1, 50), self._com_ref('b', 1, 10)]
        self.assertEqual(
            [s.request_id for s in order_migrations(segs)], ['b', 'a']
        )

    def test_segmento_unico(self):
        seg = self._com_ref('a', 0, 0)
        self.assertEqual(order_migrations([seg]), [seg])

    def test_ordem_aleatoria(self):
        rng = make_rng(17, 'kv-ordem')
        for _ in range(1000):
            segs = [
                self._com_ref(f"r{i}", int(rng.integers(0, 5)),
                              int(rng.integers(0, 4)))
                for i in range(int(rng.integers(1, 8)))
            ]
            ordem = order_migrations(segs)
            self.assertEqual(len(ordem), len(segs))
            for a, b in zip(ordem, ordem[1:]):
                self.assertLessEqual(
                    (a.ref, a.resume_time_estimate, a.request_id),
                    (b.ref, b.resume_time_estimate, b.request_id),
                )


class InterceptionTests(SimpleTestCase):
    """
    Testes da estimativa de interceptação e da limpeza de duplicatas.
    """

    def test_media_das_amostras(self):
        tracker = InterceptionTracker()
        self.assertIsNone(tracker.predict_remaining('r', 'b', 0))
        tracker.begin('r', 'b', 0)
        tracker.end('r', 'b', 1000)
        tracker.begin('r', 'b', 2000)
        tracker.end('r', 'b', 5000)
        tracker.begin('r', 'b', 6000)
        self.assertEqual(tracker.predict_remaining('r', 'b', 6500), 1500)
        self.assertEqual(tracker.predict_remaining('r', 'b', 9000), 0)

    def test_duplicata_liberada_fora_do_dono(self):
        pools = {
            'd0': KvPool(dispositivo('d0'), tokens_per_page=16),
            'd1': KvPool(dispositivo('d1'), tokens_per_page=16),
        }
        pools['d0'].alloc('r', 'b', 20, 4)
        pools['d1'].alloc('r', 'b', 20, 4)
        liberados = reclaim_duplicates(pools, {('r', 'b'): 'd1'})
        self.assertEqual(len(liberados), 1)
        self.assertEqual(liberados[0]['device'], 'd0')
        self.assertFalse(pools['d0'].has_segment('r', 'b'))
        self.assertTrue(pools['d1'].has_segment('r', 'b'))
