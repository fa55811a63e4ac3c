"""
JSON Schemas dos documentos cluster.json e profiles.json.
"""

_GRID = {
    'type': 'object',
    'required': ['batches', 'lengths', 'us'],
    'properties': {
        'batches': {
            'type': 'array', 'minItems': 1,
            'items': {'type': 'integer', 'minimum': 1},
        },
        'lengths': {
            'type': 'array', 'minItems': 1,
            'items': {'type': 'integer', 'minimum': 1},
        },
        'us': {
            'type': 'array', 'minItems': 1,
            'items': {
                'type': 'array', 'minItems': 1,
                'items': {'type': 'number', 'minimum': 0},
            },
        },
    },
}

CLUSTER_SCHEMA = {
    'type': 'object',
    'required': ['device_classes', 'servers'],
    'properties': {
        'schema_version': {'type': 'integer'},
        'device_classes': {
            'type': 'object',
            'minProperties': 1,
            'additionalProperties': {
                'type': 'object',
                'required': ['mem_capacity_gb', 'mem_bandwidth_gbps'],
                'properties': {
                    'mem_capacity_gb': {'type': 'number', 'exclusiveMinimum': 0},
                    'mem_bandwidth_gbps': {
                        'type': 'number', 'exclusiveMinimum': 0
                    },
                    'store_bandwidth_gbps': {
                        'type': 'number', 'exclusiveMinimum': 0
                    },
                },
            },
        },
        'servers': {
            'type': 'array',
            'minItems': 1,
            'items': {
                'type': 'object',
                'required': ['id', 'intra_bandwidth_gbps'],
                'properties': {
                    'id': {'type': 'string', 'minLength': 1},
                    'intra_bandwidth_gbps': {
                        'type': 'number', 'exclusiveMinimum': 0
                    },
                    'device_class': {'type': 'string'},
                    'device_count': {'type': 'integer', 'minimum': 1},
                    'devices': {
                        'type': 'array',
                        'items': {
                            'type': 'object',
                            'required': ['id'],
                            'properties': {
                                'id': {'type': 'string', 'minLength': 1},
                                'device_class': {'type': 'string'},
                            },
                        },
                    },
                },
            },
        },
        'inter_server_bandwidth_gbit': {
            'type': 'number', 'exclusiveMinimum': 0
        },
        'ingress_bandwidth_gbit': {'type': 'number', 'exclusiveMinimum': 0},
        'inter_server_links': {
            'type': 'array',
            'items': {
                'type': 'object',
                'required': ['a', 'b', 'bandwidth_gbit'],
                'properties': {
                    'a': {'type': 'string'},
                    'b': {'type': 'string'},
                    'bandwidth_gbit': {'type': 'number', 'exclusiveMinimum': 0},
                },
            },
        },
    },
}

PROFILES_SCHEMA = {
    'type': 'object',
    'required': ['templates'],
    'properties': {
        'schema_version': {'type': 'integer'},
        'default_template': {'type': 'string'},
        'launch_overhead_us': {'type': 'number', 'minimum': 0},
        'templates': {
            'type': 'object',
            'minProperties': 1,
            'additionalProperties': {
                'type': 'object',
                'required': ['layer_param_bytes', 'prefill', 'decode'],
                'properties': {
                    'device_class': {'type': 'string'},
                    'layer_param_bytes': {
                        'type': 'number', 'exclusiveMinimum': 0
                    },
                    'kv_bytes_per_token_per_attention': {
                        'type': 'integer', 'minimum': 0
                    },
                    'prefill': _GRID,
                    'decode': _GRID,
                },
            },
        },
        'families': {
            'type': 'object',
            'additionalProperties': {'type': 'string'},
        },
        'surrogates': {
            'type': 'object',
            'properties': {
                'attention_only': {'type': 'number', 'exclusiveMinimum': 1},
                'ffn_only': {'type': 'number', 'exclusiveMinimum': 1},
                'single_layer': {'type': 'number', 'exclusiveMinimum': 1},
                'multi_layer': {'type': 'number', 'exclusiveMinimum': 1},
                'acceptance': {'type': 'number', 'minimum': 0, 'maximum': 1},
            },
        },
        'stitch': {
            'type': 'object',
            'required': ['prefill', 'decode'],
            'properties': {'prefill': _GRID, 'decode': _GRID},
        },
    },
}
