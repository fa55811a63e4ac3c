"""
Exceções do zoológico de blocos (particionamento e equivalência).
"""
from utils.commons.exceptions import SimulacaoException


class ZooException(SimulacaoException):
    """
    Exceção base para erros do zoológico de blocos.
    """

    exit_code = 2


class SubComponentAttachError(ZooException):
    """
    Adaptador anexado dentro de um componente (granularidade menor que
    attention/ffn/embedding/lm_head). Viola a integridade arquitetural.
    """

    def __init__(self, model_id, target):
        super().__init__(
            message=(
                f"{model_id}: adaptador anexado em sub-componente "
                f"'{target}'; alvos válidos são attention, ffn, embedding "
                f"e lm_head."
            ),
            error_code="ANEXO_SUB_COMPONENTE",
            details={'modelo': model_id, 'alvo': target}
        )


class UnknownModelError(ZooException):
    """
    Modelo (ou fundação) ausente do zoológico.
    """

    def __init__(self, model_id):
        super().__init__(
            message=f"Modelo não encontrado no zoológico: {model_id}",
            error_code="MODELO_NAO_ENCONTRADO",
            details={'modelo': model_id}
        )


class InvalidTuningError(ZooException):
    """
    Operação incompatível com o tipo de ajuste do modelo.
    """

    def __init__(self, model_id, tuning_kind, esperado):
        super().__init__(
            message=(
                f"{model_id} tem ajuste '{tuning_kind}', esperado {esperado}."
            ),
            error_code="AJUSTE_INVALIDO",
            details={'modelo': model_id, 'ajuste': tuning_kind}
        )


class ZeroSignatureError(ZooException):
    """
    Vetor de probabilidades nulo: similaridade indefinida.
    """

    def __init__(self, reference='assinatura'):
        super().__init__(
            message=f"Vetor nulo em {reference}: similaridade indefinida.",
            error_code="ASSINATURA_NULA",
            details={'referencia': reference}
        )


class SignatureMismatchError(ZooException):
    """
    Assinaturas com vocabulários de tamanhos diferentes, ou mal formadas.
    """

    def __init__(self, reference, motivo):
        super().__init__(
            message=f"Assinatura inválida ({reference}): {motivo}",
            error_code="ASSINATURA_INVALIDA",
            details={'referencia': reference, 'motivo': motivo}
        )


class UnknownBlockError(ZooException):
    """
    Bloco inexistente no zoológico.
    """

    def __init__(self, block_id):
        super().__init__(
            message=f"Bloco não encontrado: {block_id}",
            error_code="BLOCO_NAO_ENCONTRADO",
            details={'bloco': block_id}
        )
