"""Spoofing-attribute classification: input type, acoustic model and vocoder.

Modules: ``corpus`` (metadata ingestion, label maps), ``protocol`` (voice
clustering and speaker-disjoint splits), ``frontend`` (LFCC features),
``models`` (ResNet backbone, LMCL, heads), ``training``, ``evaluation``,
``synth`` (desk-scale synthetic corpus) and ``cli``.
"""

__version__ = "0.1.0"
