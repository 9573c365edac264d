"""memfresh: freshness-counter interleaving against memory-centric side channels.

The toolchain parses a small typed IR, rewrites it so that every value
written to memory shares its encryption block with a per-store
freshness counter (plus mask-, dummy-write- and prefetcher-hardening
variants), runs the result on a tracing machine simulator, and audits
the traces for ciphertext collisions, silenced stores and pointer-like
prefetch candidates.
"""

__version__ = "0.1.0"
