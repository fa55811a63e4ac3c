"""
Exceções do modelo físico (dispositivos, enlaces e perfis de custo).
"""
from utils.commons.exceptions import SimulacaoException


class ClusterException(SimulacaoException):
    """
    Exceção base para erros do cluster simulado.
    """


class UnknownDeviceError(ClusterException):
    """
    Dispositivo inexistente na topologia.
    """

    def __init__(self, device_id):
        super().__init__(
            message=f"Dispositivo desconhecido: {device_id}",
            error_code="DISPOSITIVO_DESCONHECIDO",
            details={'device_id': device_id}
        )


class CapacityExhaustedError(ClusterException):
    """
    Alocação que ultrapassaria a memória do dispositivo.
    """

    def __init__(self, device_id, category, requested, free):
        super().__init__(
            message=(
                f"Memória insuficiente em {device_id}: {category} pediu "
                f"{requested} bytes, livres {free}"
            ),
            error_code="CAPACIDADE_ESGOTADA",
            details={
                'device_id': device_id,
                'categoria': category,
                'solicitado': requested,
                'livre': free,
            }
        )


class LedgerLeakError(ClusterException):
    """
    Alocações sem liberação correspondente ao fim da execução.
    """

    def __init__(self, device_id, remaining):
        super().__init__(
            message=f"Vazamento de memória em {device_id}: {remaining}",
            error_code="VAZAMENTO_MEMORIA",
            details={'device_id': device_id, 'restante': remaining}
        )


class EmptyProfileError(ClusterException):
    """
    Perfil de custo sem pontos de grade.
    """

    exit_code = 2

    def __init__(self, block_id, phase):
        super().__init__(
            message=f"Perfil vazio para {block_id} ({phase}).",
            error_code="PERFIL_VAZIO",
            details={'block_id': block_id, 'fase': phase}
        )


class ProfileError(ClusterException):
    """
    Tabela de custo malformada (eixos fora de ordem, valores decrescentes).
    """

    exit_code = 2

    def __init__(self, reference, motivo):
        super().__init__(
            message=f"Perfil inválido {reference}: {motivo}",
            error_code="PERFIL_INVALIDO",
            details={'perfil': reference, 'motivo': motivo}
        )


class MissingProfileError(ClusterException):
    """
    Nenhum perfil aplicável ao bloco na classe de dispositivo pedida.
    """

    exit_code = 2

    def __init__(self, block_id, device_class):
        super().__init__(
            message=(
                f"Sem perfil para o bloco {block_id} em {device_class}."
            ),
            error_code="PERFIL_AUSENTE",
            details={'block_id': block_id, 'device_class': device_class}
        )
