"""Erasure-coded block store with pipelined slice repair.

Subsystems: :mod:`ecrepair.codec` (RS over GF(256)), :mod:`ecrepair.plans` /
:mod:`ecrepair.execute` (repair schemes over a pluggable transport),
:mod:`ecrepair.pathsel` (helper selection and path construction),
:mod:`ecrepair.sim` (exact timeslot simulator), :mod:`ecrepair.coordinator` /
:mod:`ecrepair.helper` (daemons), and :mod:`ecrepair.cli`.
"""

__version__ = "0.1.0"
