"""
JSON Schemas do documento de cenário (forma) e do report.json usado na
comparação. A semântica do cenário fica nos serializers.
"""

_SECTION = {'type': ['object', 'string']}

SCENARIO_SCHEMA = {
    'type': 'object',
    'required': ['zoo', 'profiles', 'workload'],
    'properties': {
        'schema_version': {'type': 'integer'},
        'mode': {'type': 'string'},
        'seed': {'type': 'integer'},
        'zoo': _SECTION,
        'cluster': _SECTION,
        'profiles': _SECTION,
        'workload': _SECTION,
        'ablation': {'type': 'object'},
        'scheduler': {'type': 'object'},
        'out': {'type': 'string'},
    },
}

REPORT_SCHEMA = {
    'type': 'object',
    'required': ['workload_digest', 'throughput_tokens_per_s', 'latency',
                 'comm_fraction', 'util_proxy'],
    'properties': {
        'workload_digest': {'type': 'string', 'minLength': 1},
        'throughput_tokens_per_s': {'type': 'number'},
        'comm_fraction': {'type': 'number'},
        'latency': {'type': 'object'},
        'util_proxy': {
            'type': 'object',
            'required': ['mean'],
            'properties': {'mean': {'type': 'number'}},
        },
    },
}
