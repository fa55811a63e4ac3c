"""
Exceções do cache KV paginado e da migração de segmentos.
"""
from utils.commons.exceptions import SimulacaoException


class KvException(SimulacaoException):
    """
    Exceção base para erros do cache KV.
    """


class KvAllocationError(KvException):
    """
    Páginas insuficientes no dispositivo; a requisição continua na fila.
    """

    def __init__(self, device_id, requested, free):
        super().__init__(
            message=(
                f"KV sem espaço em {device_id}: pedido {requested} bytes, "
                f"livres {free}"
            ),
            error_code="KV_SEM_ESPACO",
            details={
                'device_id': device_id,
                'solicitado': requested,
                'livre': free,
            }
        )


class MigrationRefusedError(KvException):
    """
    Plano de migração recusado (destino igual à origem, sem capacidade ou
    sem nenhuma taxa positiva).
    """

    def __init__(self, request_id, block_id, motivo):
        super().__init__(
            message=(
                f"Migração de ({request_id}, {block_id}) recusada: {motivo}"
            ),
            error_code="MIGRACAO_RECUSADA",
            details={
                'request_id': request_id,
                'block_id': block_id,
                'motivo': motivo,
            }
        )


class UnknownSegmentError(KvException):
    """
    Segmento KV inexistente no pool.
    """

    def __init__(self, device_id, request_id, block_id):
        super().__init__(
            message=(
                f"Segmento ({request_id}, {block_id}) ausente em {device_id}"
            ),
            error_code="SEGMENTO_NAO_ENCONTRADO",
            details={
                'device_id': device_id,
                'request_id': request_id,
                'block_id': block_id,
            }
        )
