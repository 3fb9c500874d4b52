"""Storage-obfuscation engine and adversary simulator.

K concurrent filesystem images hide one actual image among K-1 sybils
that are emulated metadata-only: sybil filedata is covertly discarded,
metadata is deduplicated copy-on-write behind encrypted per-image block
translation tables, identities are shuffled faster than any observer can
track them, and sybil call streams are replayed from a segment library
recorded from the workload under protection.
"""

__version__ = "0.1.0"
