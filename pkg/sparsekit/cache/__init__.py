# recurrent is imported by path: it depends on attention, which depends on kv_cache.
from sparsekit.cache.kv_cache import (
    CacheEntries, EvictionReport, SparseKvCache, prune_cache,
    dump_cache, load_cache, cache_to_bytes, cache_from_bytes, CACHE_MAGIC, CACHE_VERSION,
)
